"""Rotations, orthographic projection, and the 3k-vector <-> 3xk reshape.

Every function here accepts either an autodiff `Tensor` (gradients flow) or
a plain numpy array (returns numpy). The fixed structure memory layout is
per-point coordinate triples: flat index 3j+c holds coordinate c of point j.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEGENERATE_NORM = 1e-9
_PERTURB_A = np.array([1e-6, 0.0, 0.0])
_PERTURB_B = np.array([0.0, 1e-6, 0.0])


def _is_tensor(x):
    return isinstance(x, Tensor)


def _norm(v):
    return ad.sqrt(ad.tsum(v * v))


def rotation_from_6d(raw):
    """Gram-Schmidt a 6-real encoding (two stacked 3-vectors) into R in SO(3).

    Columns of the result are r1 = a1/|a1|, r2 = orthogonalized a2, and
    r3 = r1 x r2. Near-degenerate inputs (zero or parallel vectors) are
    nudged by a fixed 1e-6 pattern and retried once before failing.
    """
    tensor_in = _is_tensor(raw)
    t = raw if tensor_in else Tensor(raw)
    if t.data.shape != (6,):
        raise ValueError(f"rotation_from_6d expects shape (6,), got {t.data.shape}")
    out = _rotation_attempt(t)
    if out is None:
        nudged = t + Tensor(np.concatenate([_PERTURB_A, _PERTURB_B]))
        out = _rotation_attempt(nudged)
    if out is None:
        raise ValueError("rotation_from_6d: degenerate input (zero or parallel vectors)")
    return out if tensor_in else out.data


def _rotation_attempt(t):
    a1 = t[0:3]
    a2 = t[3:6]
    n1 = _norm(a1)
    if float(n1.data) < DEGENERATE_NORM:
        return None
    r1 = a1 / n1
    w = a2 - ad.tsum(r1 * a2) * r1
    n2 = _norm(w)
    if float(n2.data) < DEGENERATE_NORM:
        return None
    r2 = w / n2
    r3 = _cross(r1, r2)
    cols = [ad.reshape(v, (3, 1)) for v in (r1, r2, r3)]
    return ad.concatenate(cols, axis=1)


def _cross(u, v):
    parts = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ]
    return ad.concatenate([ad.reshape(p, (1,)) for p in parts])


def reshape_structure(s):
    """Row vector of length 3k -> 3xk matrix; column j is (s[3j], s[3j+1], s[3j+2])."""
    tensor_in = _is_tensor(s)
    t = s if tensor_in else Tensor(s)
    flat = ad.reshape(t, (-1,))
    n = flat.data.size
    if n % 3 != 0:
        raise ValueError(f"reshape_structure: length {n} not divisible by 3")
    out = ad.transpose(ad.reshape(flat, (n // 3, 3)))
    return out if tensor_in else out.data


def flatten_structure(x):
    """Inverse of reshape_structure: 3xk -> length-3k row vector."""
    tensor_in = _is_tensor(x)
    t = x if tensor_in else Tensor(x)
    out = ad.reshape(ad.transpose(t), (-1,))
    return out if tensor_in else out.data


def orthographic_project(rotation, structure):
    """First two rows of R @ X: rotate into the camera frame, drop depth."""
    if _is_tensor(rotation) or _is_tensor(structure):
        r = rotation if _is_tensor(rotation) else Tensor(rotation)
        x = structure if _is_tensor(structure) else Tensor(structure)
        return ad.matmul(r, x)[0:2, :]
    return (np.asarray(rotation) @ np.asarray(structure))[0:2, :]


_FLIP = np.array([[1.0], [1.0], [-1.0]])


def depth_flip(structure):
    """Negate the third coordinate of every point."""
    if _is_tensor(structure):
        return structure * Tensor(_FLIP)
    return np.asarray(structure) * _FLIP


def random_rotation(rng):
    """Uniform SO(3) sample via a normalized quaternion (numpy only)."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
