"""Lifting network: masked 2D keypoints (+ visibility mask, + optional
context vector) to shape coefficients and a camera rotation.

Input layout is fixed: the flattened stacked 2xk keypoint matrix (all x
coordinates, then all y), the k-long visibility mask, then the context
vector (zeros when absent, so context-free and context-conditioned phases
share one architecture). A three-layer ReLU trunk produces the feature
vector both heads consume: an affine map to the latent shape coefficients
and an affine map to the 6-real rotation encoding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import orthographic_project, reshape_structure, rotation_from_6d

ROT_IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


@dataclass
class LifterInput:
    keypoints2d: np.ndarray  # (2, k) stacked layout, zeros outside category block
    visibility: np.ndarray  # (k,) binary, zero outside block
    context: Optional[np.ndarray]  # (n_context,) or None
    category_id: int


@dataclass
class LifterOutput:
    beta_raw: Tensor  # (D,) pre-truncation coefficients
    rotation_raw: Tensor  # (6,)
    rotation: Tensor  # (3, 3)
    structure: Tensor  # (3, k)
    reprojection: Tensor  # (2, k)


def normalize_keypoints(points, visibility):
    """Center visible keypoints at zero mean and scale to unit RMS radius.

    Invisible entries come out exactly zero. Returns (normalized, center,
    scale) so predictions can be mapped back. Rejects samples with fewer
    than two distinct visible keypoints.
    """
    points = np.asarray(points, dtype=np.float64)
    vis = np.asarray(visibility, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] != 2 or vis.shape != (points.shape[1],):
        raise ValueError(
            f"normalize_keypoints: bad shapes {points.shape} / {vis.shape}"
        )
    idx = np.nonzero(vis > 0)[0]
    distinct = {tuple(points[:, i]) for i in idx}
    if len(distinct) < 2:
        raise ValueError("sample rejected: fewer than 2 distinct visible keypoints")
    center = points[:, idx].mean(axis=1)
    centered = points[:, idx] - center[:, None]
    scale = float(np.sqrt(np.mean(np.sum(centered**2, axis=0))))
    out = np.zeros_like(points)
    out[:, idx] = centered / scale
    return out, center, scale


def normalize_points_graph(points, eps=1e-10):
    """On-graph variant for predicted keypoints: all m points are treated as
    visible; `eps` guards the scale against collapse early in training.

    points: Tensor (m, 2). Returns (normalized (m,2), center (1,2), scale ()).
    """
    center = ad.tmean(points, axis=0, keepdims=True)
    centered = points - center
    scale = ad.sqrt(ad.tmean(ad.tsum(centered * centered, axis=1)) + eps)
    return centered / scale, center, scale


class Lifter:
    """Trunk of three 256-wide ReLU layers into 128 features, with affine
    coefficient and rotation heads.

    The rotation head keeps full He-scale weights on purpose: per-sample
    rotation diversity at initialization is what breaks the flat-shape
    degeneracy of reprojection-only training (with near-constant initial
    rotations, depth sits in the loss null space and never becomes
    supervised)."""

    def __init__(
        self,
        total_keypoints,
        rng,
        latent_dim=16,
        n_context=64,
        hidden=256,
        feature_dim=128,
    ):
        self.total_keypoints = total_keypoints
        self.latent_dim = latent_dim
        self.n_context = n_context
        self.input_dim = 3 * total_keypoints + n_context
        self.feature_dim = feature_dim
        self.params = {}

        def par(name, arr):
            t = Tensor(arr, requires_grad=True)
            self.params[name] = t
            return t

        def he(fan_in, fan_out):
            return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)

        par("lifter.trunk.w1", he(self.input_dim, hidden))
        par("lifter.trunk.b1", np.zeros(hidden))
        par("lifter.trunk.w2", he(hidden, hidden))
        par("lifter.trunk.b2", np.zeros(hidden))
        par("lifter.trunk.w3", he(hidden, feature_dim))
        par("lifter.trunk.b3", np.zeros(feature_dim))
        par("lifter.head.coeff.w", he(feature_dim, latent_dim) * 0.1)
        par("lifter.head.coeff.b", np.zeros(latent_dim))
        par("lifter.head.rot.w", he(feature_dim, 6))
        par("lifter.head.rot.b", np.zeros(6))

    def param_dict(self):
        return dict(self.params)

    def set_param(self, name, tensor):
        if name not in self.params:
            raise KeyError(f"unknown lifter parameter {name!r}")
        self.params[name] = tensor

    @property
    def coeff_weight(self):
        """The latent basis map (feature_dim x latent_dim), for coherence."""
        return self.params["lifter.head.coeff.w"]

    def features(self, x):
        """(N, input_dim) -> (N, feature_dim) trunk forward."""
        p = self.params
        h = ad.relu(ad.matmul(x, p["lifter.trunk.w1"]) + p["lifter.trunk.b1"])
        h = ad.relu(ad.matmul(h, p["lifter.trunk.w2"]) + p["lifter.trunk.b2"])
        return ad.relu(ad.matmul(h, p["lifter.trunk.w3"]) + p["lifter.trunk.b3"])

    def coefficients(self, feats):
        p = self.params
        return ad.matmul(feats, p["lifter.head.coeff.w"]) + p["lifter.head.coeff.b"]

    def rotation_raw(self, feats):
        p = self.params
        return ad.matmul(feats, p["lifter.head.rot.w"]) + p["lifter.head.rot.b"]


def input_vector(keypoints2d, visibility, context, n_context):
    """Assemble the fixed input layout as a flat numpy vector."""
    kp = np.asarray(keypoints2d, dtype=np.float64)
    vis = np.asarray(visibility, dtype=np.float64)
    if context is None:
        ctx = np.zeros(n_context)
    else:
        ctx = np.asarray(context, dtype=np.float64)
        if ctx.shape != (n_context,):
            raise ValueError(f"context must have shape ({n_context},), got {ctx.shape}")
    return np.concatenate([kp.ravel(), vis, ctx])


def lift(inp, lifter, dictionary, registry):
    """Run the lifter on one sample; returns differentiable LifterOutput.

    The reprojection is orthographic_project(rotation, structure) by
    construction, in the same normalized frame as the input keypoints.
    """
    registry.schema(inp.category_id)  # raises on unregistered categories
    if np.any((inp.visibility > 0) & (registry.mask(inp.category_id) == 0)):
        raise ValueError("visibility extends outside the category block")
    vec = input_vector(inp.keypoints2d, inp.visibility, inp.context, lifter.n_context)
    x = Tensor(vec.reshape(1, -1))
    feats = lifter.features(x)
    beta_rows = lifter.coefficients(feats)
    rot_raw = ad.reshape(lifter.rotation_raw(feats), (6,))
    rotation = rotation_from_6d(rot_raw)
    flat = dictionary.decode_rows(beta_rows)
    structure = reshape_structure(ad.reshape(flat, (-1,)))
    reprojection = orthographic_project(rotation, structure)
    return LifterOutput(
        beta_raw=ad.reshape(beta_rows, (lifter.latent_dim,)),
        rotation_raw=rot_raw,
        rotation=rotation,
        structure=structure,
        reprojection=reprojection,
    )


def build_lifter_input(points_block, visibility_block, schema, total_keypoints, context=None):
    """Normalize one category block of raw 2D keypoints and embed it in the
    stacked layout. Returns (LifterInput, center, scale)."""
    normalized, center, scale = normalize_keypoints(points_block, visibility_block)
    k = total_keypoints
    stacked = np.zeros((2, k))
    stacked[:, schema.block] = normalized
    vis = np.zeros(k)
    vis[schema.block] = np.asarray(visibility_block, dtype=np.float64)
    return (
        LifterInput(
            keypoints2d=stacked,
            visibility=vis,
            context=context,
            category_id=schema.category_id,
        ),
        center,
        scale,
    )
