"""Finite-difference verification of every loss against every parameter
group, run on a deliberately tiny model instance so exhaustive
per-coordinate central differences stay fast.

One probe sweep per parameter group evaluates all four loss components at
once (the Hungarian match is frozen at the base point, since the losses are
only piecewise-smooth across match flips and the training step treats the
match as a constant anyway). Configurations that land a ReLU (or L1) input
within 10x the difference step of zero are re-sampled with a fresh seed:
central differences straddle the kink there and disagree with the
subgradient by construction, which says nothing about the backward pass.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import random_rotation
from .matching import hungarian_match, match_cost_matrix
from .synthdata import (
    SyntheticCategory,
    SyntheticSample,
    _orthogonalize_rows,
    render_image,
    world_to_unit,
)
from .training import build_bundle, e2e_sample_losses

TINY_DIMS = {
    "latent_dim": 3,
    "n_context": 4,
    "lifter_hidden": 8,
    "lifter_features": 6,
    "det_dim": 8,
    "det_heads": 2,
    "det_blocks": 2,
    "det_patch": 4,
    "det_spare": 2,
    "det_ffn": 8,
}
_LOSSES = ("location", "keypoint_type", "category", "reprojection")


@dataclass
class CheckResult:
    loss: str
    group: str
    error: float
    resamples: int
    passed: bool


def _tiny_category(rng, name, k):
    template = rng.standard_normal((3, k))
    template -= template.mean(axis=1, keepdims=True)
    template /= np.sqrt(np.mean(np.sum(template**2, axis=0)))
    basis = _orthogonalize_rows(rng.standard_normal((3, 3 * k)))
    basis *= np.sqrt(k) / np.linalg.norm(basis, axis=1, keepdims=True)
    skeleton = tuple((i, i + 1) for i in range(k - 1))
    return SyntheticCategory(
        name=name,
        keypoint_names=tuple(f"{name}_{j}" for j in range(k)),
        template=template,
        deformation_basis=basis,
        deformation_scale=0.2,
        skeleton=skeleton,
    )


def build_tiny_scene(seed):
    """A minimal bundle plus one synthetic image sample for loss probing."""
    rng = np.random.default_rng(seed)
    cats = [_tiny_category(rng, "probe_a", 3), _tiny_category(rng, "probe_b", 4)]
    spec = [{"name": c.name, "keypoint_names": list(c.keypoint_names)} for c in cats]
    bundle = build_bundle("e2e", spec, TINY_DIMS, window=3.2, use_context=True, seed=seed)
    cat_id = int(rng.integers(len(cats)))
    cat = cats[cat_id]
    k = cat.keypoint_count
    coeffs = 0.2 * rng.standard_normal(3)
    x3d = cat.template + (coeffs @ cat.deformation_basis).reshape(k, 3).T
    rot = random_rotation(rng)
    vis = np.ones(k)
    vis[int(rng.integers(k))] = 0.0
    sample = SyntheticSample(
        sample_id=f"probe-{seed}",
        category_id=cat_id,
        coeffs=coeffs,
        rotation=rot,
        keypoints3d=x3d,
        keypoints2d=(rot @ x3d)[0:2],
        visibility=vis,
        context_factor=float(rng.uniform()),
    )
    sample.image = render_image(sample, cat, window=3.2, size=8)
    return bundle, sample


def _frozen_match(bundle, sample):
    with ad.no_grad():
        out = bundle.detector.detect(sample.image)
    g = bundle.registry.schema(sample.category_id).keypoint_count
    gt_unit = np.clip(world_to_unit(sample.keypoints2d, bundle.window), 0.0, 1.0)
    cost = match_cost_matrix(gt_unit, np.arange(g), out.deltas.data, out.type_logits.data)
    return hungarian_match(cost).pairs


def check_group(bundle, sample, group, step, pairs):
    """One probe sweep of a named parameter: analytic and central-difference
    gradients of all four loss components at once.

    Returns ({loss: max rel error}, min kink margin seen).
    """
    params = bundle.param_dict()
    orig = params[group]
    base = orig.data.copy()

    def components(t):
        bundle.set_param(group, t)
        comps = e2e_sample_losses(
            sample, bundle, with_reprojection=True, match_pairs=pairs
        )
        bundle.set_param(group, orig)
        return comps

    with ad.kink_trace() as margins:
        probe = Tensor(base.copy(), requires_grad=True)
        comps = components(probe)
        analytic = {
            name: ad.gradient_of(value, [probe])[probe] for name, value in comps.items()
        }
        numeric = {name: np.zeros_like(base) for name in analytic}
        flat = base.ravel()
        with ad.no_grad():
            for i in range(flat.size):
                idx = np.unravel_index(i, base.shape)
                plus = base.copy()
                plus[idx] += step
                minus = base.copy()
                minus[idx] -= step
                up = components(Tensor(plus))
                down = components(Tensor(minus))
                for name in numeric:
                    numeric[name][idx] = (float(up[name].data) - float(down[name].data)) / (
                        2.0 * step
                    )
    errors = {}
    for name, ana in analytic.items():
        denom = np.maximum(1.0, np.abs(ana))
        errors[name] = float(np.max(np.abs(ana - numeric[name]) / denom))
    return errors, (min(margins) if margins else np.inf)


def run_gradient_suite(seed=0, step=1e-5, tol=1e-4, max_resamples=8, log=print):
    """Check all four losses against every parameter group at one seed;
    returns CheckResult rows (loss x group), all of which should pass."""
    results = []
    bundle, sample = build_tiny_scene(seed)
    pairs = _frozen_match(bundle, sample)
    for group in sorted(bundle.param_dict()):
        tries = 0
        b, s, p = bundle, sample, pairs
        while True:
            errors, margin = check_group(b, s, group, step, p)
            if margin >= 10.0 * step or tries >= max_resamples:
                break
            tries += 1
            b, s = build_tiny_scene(seed + 1000 * tries + zlib.crc32(group.encode()) % 997)
            p = _frozen_match(b, s)
        for loss_name in _LOSSES:
            err = errors[loss_name]
            passed = err < tol
            results.append(CheckResult(loss_name, group, err, tries, passed))
            if log is not None and not passed:
                log(f"FAIL {loss_name} w.r.t. {group}: rel err {err:.3e}")
    return results
