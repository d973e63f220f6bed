"""Shared multi-category shape dictionary with cut-off coefficients.

All categories stack into one keypoint layout of k = sum(k_z) slots; a
binary mask per category selects its block. Shapes decode from nonnegative
(ReLU-truncated) coefficients against a shared basis plus a learned bias,
which keeps basis-subset selection differentiable without losing
expressiveness; `truncation_shift_construction` is the executable proof of
that claim for any coefficient matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import reshape_structure


@dataclass(frozen=True)
class CategorySchema:
    category_id: int
    name: str
    keypoint_count: int
    keypoint_names: tuple
    block_offset: int

    def __post_init__(self):
        if self.keypoint_count < 3:
            raise ValueError(
                f"category {self.name!r}: needs >= 3 keypoints, got {self.keypoint_count}"
            )
        if len(self.keypoint_names) != self.keypoint_count:
            raise ValueError(f"category {self.name!r}: keypoint name count mismatch")
        if len(set(self.keypoint_names)) != self.keypoint_count:
            raise ValueError(f"category {self.name!r}: keypoint names must be distinct")

    @property
    def block(self):
        return slice(self.block_offset, self.block_offset + self.keypoint_count)


class CategoryRegistry:
    """Assigns category ids and block offsets in registration order."""

    def __init__(self):
        self._schemas = []
        self._by_name = {}

    def register(self, name, keypoint_names):
        if name in self._by_name:
            raise ValueError(f"category name {name!r} already registered")
        schema = CategorySchema(
            category_id=len(self._schemas),
            name=name,
            keypoint_count=len(keypoint_names),
            keypoint_names=tuple(keypoint_names),
            block_offset=self.total_keypoints,
        )
        self._schemas.append(schema)
        self._by_name[name] = schema
        return schema.category_id

    @property
    def total_keypoints(self):
        return sum(s.keypoint_count for s in self._schemas)

    def __len__(self):
        return len(self._schemas)

    def schemas(self):
        return list(self._schemas)

    def schema(self, category_id):
        if not 0 <= category_id < len(self._schemas):
            raise KeyError(f"unknown category id {category_id}")
        return self._schemas[category_id]

    def by_name(self, name):
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"unknown category name {name!r}") from None

    def mask(self, category_id):
        """Binary selector over the stacked layout for one category."""
        schema = self.schema(category_id)
        zeta = np.zeros(self.total_keypoints)
        zeta[schema.block] = 1.0
        return zeta


def registry_from_names(named_keypoints):
    """Build a registry from [(category_name, [keypoint names]), ...]."""
    reg = CategoryRegistry()
    for name, kp_names in named_keypoints:
        reg.register(name, kp_names)
    return reg


class ShapeDictionary:
    """Learnable basis S (D x 3k) and bias (3k,) decoding latent codes to shapes.

    With `cutoff=True` (the default) decoding is reshape(relu(beta) S + b);
    with `cutoff=False` it is the plain reshape(beta S) used as the
    no-truncation baseline.
    """

    def __init__(self, latent_dim, total_keypoints, rng, cutoff=True):
        if latent_dim < 1 or total_keypoints < 1:
            raise ValueError("latent_dim and total_keypoints must be positive")
        self.latent_dim = latent_dim
        self.total_keypoints = total_keypoints
        self.cutoff = bool(cutoff)
        scale = 1.0 / np.sqrt(latent_dim)
        self.basis = Tensor(
            rng.standard_normal((latent_dim, 3 * total_keypoints)) * scale,
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(3 * total_keypoints), requires_grad=True)

    def param_dict(self):
        return {"shape.basis": self.basis, "shape.bias": self.bias}

    def set_param(self, name, tensor):
        if name == "shape.basis":
            self.basis = tensor
        elif name == "shape.bias":
            self.bias = tensor
        else:
            raise KeyError(f"unknown shape dictionary parameter {name!r}")

    def decode_rows(self, beta_raw):
        """Batched decode: (N, D) coefficients -> (N, 3k) flat structures."""
        if beta_raw.shape[-1] != self.latent_dim:
            raise ValueError(
                f"latent dimension mismatch: got {beta_raw.shape[-1]}, expected {self.latent_dim}"
            )
        if self.cutoff:
            return ad.matmul(ad.relu(beta_raw), self.basis) + self.bias
        return ad.matmul(beta_raw, self.basis)


def cutoff_decode(beta_raw, dictionary):
    """Decode one latent code through the cut-off path: reshape(relu(b) S + b_S)."""
    t = beta_raw if isinstance(beta_raw, Tensor) else Tensor(beta_raw)
    if t.data.shape != (dictionary.latent_dim,):
        raise ValueError(
            f"cutoff_decode: expected shape ({dictionary.latent_dim},), got {t.data.shape}"
        )
    row = ad.reshape(t, (1, dictionary.latent_dim))
    flat = ad.matmul(ad.relu(row), dictionary.basis) + dictionary.bias
    out = reshape_structure(ad.reshape(flat, (-1,)))
    return out if isinstance(beta_raw, Tensor) else out.data


def cross_category_decode(beta_raw, category_id, dictionary, registry):
    """Decode a latent code, then keep only the target category's columns."""
    schema = registry.schema(category_id)
    full = cutoff_decode(beta_raw, dictionary)
    out = full[:, schema.block]
    return out


def truncation_shift_construction(alphas, basis, eps=None):
    """Rewrite arbitrary coefficients as nonnegative ones plus a shared bias.

    Given alphas (N x D) and basis (D x 3k), returns (betas, bias) with
    betas[n] >= eps >= 0 and betas[n] @ basis + bias == alphas[n] @ basis
    for every n. Uses the per-dimension minimum shift: m_d = min_n alpha[n,d],
    betas[n,d] = alpha[n,d] - (m_d - eps_d), bias = sum_d (m_d - eps_d) S_d.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    basis = np.asarray(basis, dtype=np.float64)
    if alphas.ndim != 2 or basis.ndim != 2 or alphas.shape[1] != basis.shape[0]:
        raise ValueError(
            f"incompatible shapes: alphas {alphas.shape}, basis {basis.shape}"
        )
    if alphas.shape[0] < 1:
        raise ValueError("need at least one coefficient row")
    d = alphas.shape[1]
    if eps is None:
        eps = np.zeros(d)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (d,) or np.any(eps < 0):
        raise ValueError("eps must be a nonnegative vector of length D")
    shift = alphas.min(axis=0) - eps
    betas = alphas - shift
    bias = shift @ basis
    return betas, bias


def dead_atoms(betas, threshold=0.99):
    """Indices of basis rows inactive (coefficient exactly 0) on more than
    `threshold` of the reference coefficient rows."""
    betas = np.asarray(betas)
    inactive_frac = np.mean(betas == 0.0, axis=0)
    return [int(i) for i in np.nonzero(inactive_frac > threshold)[0]]
