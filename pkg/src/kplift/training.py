"""Training phases, optimizer, evaluation, and checkpoint plumbing.

Three phases share the machinery here:

  lifter-only        GT 2D keypoints + visibility in, reprojection loss only;
                     never touches image bytes.
  detector-pretrain  images in, Hungarian-matched location/type/category
                     losses on the detector alone.
  end-to-end         detector keypoints feed the lifter (optionally with the
                     context vector); all four losses train every parameter,
                     so the detector also receives gradient through the
                     reprojection term.

Everything is deterministic given (seed, config, dataset): one RNG drives
initialization and batch shuffling, Adam runs in insertion order, and
checkpoints carry no timestamps, so identical runs produce identical bytes.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, restore_into, save_checkpoint
from .detector import Detector, select_keypoints
from .geometry import orthographic_project, reshape_structure, rotation_from_6d
from .lifter import (
    Lifter,
    LifterInput,
    build_lifter_input,
    input_vector,
    lift,
    normalize_points_graph,
)
from .matching import (
    LossWeights,
    hungarian_match,
    loss_category,
    loss_location,
    loss_reprojection,
    loss_type,
    match_cost_matrix,
    total_loss,
)
from .metrics import EvalReport, mpjpe_with_flag, stress
from .shapemodel import CategoryRegistry, ShapeDictionary, dead_atoms
from .synthdata import read_dataset, unit_to_world, world_to_unit

PHASES = ("lifter-only", "detector-pretrain", "end-to-end", "end-to-end-no-context")


@dataclass
class TrainConfig:
    phase: str
    dataset: str
    out: str = "checkpoint.kpc"
    seed: int = 0
    epochs: int = None  # phase default when None
    batch_size: int = 32
    lr: float = None  # phase default when None
    weights: LossWeights = field(default_factory=LossWeights)
    huber_delta: float = 0.1
    cutoff: bool = True
    latent_dim: int = 16
    n_context: int = 64
    lifter_hidden: int = 256
    lifter_features: int = 128
    det_dim: int = 64
    det_heads: int = 4
    det_blocks: int = 2
    det_patch: int = 8
    det_spare: int = 4
    det_ffn: int = 128
    lifter_init: str = None
    detector_init: str = None
    log: bool = True

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.epochs is None:
            self.epochs = {"lifter-only": 20, "detector-pretrain": 20}.get(self.phase, 30)
        if self.lr is None:
            self.lr = 1e-3 if self.phase in ("lifter-only", "detector-pretrain") else 1e-4
        for name in (
            "batch_size",
            "lr",
            "huber_delta",
            "latent_dim",
            "n_context",
            "lifter_hidden",
            "lifter_features",
            "det_dim",
            "det_heads",
            "det_blocks",
            "det_patch",
            "det_spare",
            "det_ffn",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"config field {name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")

    def echo(self):
        d = dataclasses.asdict(self)
        d["weights"] = dataclasses.asdict(self.weights)
        return d


class Adam:
    """Adam over a named parameter dict; updates rebind each tensor's array
    so live graphs never observe mutation."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, grads_by_tensor):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads_by_tensor[p]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c) + self.eps)
            p.data = p.data - self.lr * update


# -- model bundle -------------------------------------------------------------


@dataclass
class ModelBundle:
    kind: str  # lifter | detector | e2e
    registry: CategoryRegistry
    dims: dict
    window: float
    use_context: bool = False
    cutoff: bool = True
    dictionary: ShapeDictionary = None
    lifter: Lifter = None
    detector: Detector = None

    def param_dict(self):
        out = {}
        if self.lifter is not None:
            out.update(self.lifter.param_dict())
        if self.dictionary is not None:
            out.update(self.dictionary.param_dict())
        if self.detector is not None:
            out.update(self.detector.param_dict())
        return out

    def category_spec(self):
        return [
            {"name": s.name, "keypoint_names": list(s.keypoint_names)}
            for s in self.registry.schemas()
        ]

    def set_param(self, name, tensor):
        if name.startswith("shape."):
            self.dictionary.set_param(name, tensor)
        elif name.startswith("lifter."):
            self.lifter.set_param(name, tensor)
        elif name.startswith("det."):
            self.detector.set_param(name, tensor)
        else:
            raise KeyError(f"unknown parameter {name!r}")


def _dims_from_config(cfg):
    return {
        "latent_dim": cfg.latent_dim,
        "n_context": cfg.n_context,
        "lifter_hidden": cfg.lifter_hidden,
        "lifter_features": cfg.lifter_features,
        "det_dim": cfg.det_dim,
        "det_heads": cfg.det_heads,
        "det_blocks": cfg.det_blocks,
        "det_patch": cfg.det_patch,
        "det_spare": cfg.det_spare,
        "det_ffn": cfg.det_ffn,
    }


def build_bundle(kind, categories, dims, window, use_context=False, cutoff=True, seed=0):
    """Construct fresh models for the given category spec; parameters come
    from `seed` unless a checkpoint is restored on top."""
    reg = CategoryRegistry()
    for cat in categories:
        reg.register(cat["name"], cat["keypoint_names"])
    rng = np.random.default_rng(seed)
    bundle = ModelBundle(
        kind=kind,
        registry=reg,
        dims=dict(dims),
        window=window,
        use_context=use_context,
        cutoff=cutoff,
    )
    if kind in ("lifter", "e2e"):
        bundle.dictionary = ShapeDictionary(
            dims["latent_dim"], reg.total_keypoints, rng, cutoff=cutoff
        )
        bundle.lifter = Lifter(
            reg.total_keypoints,
            rng,
            latent_dim=dims["latent_dim"],
            n_context=dims["n_context"],
            hidden=dims["lifter_hidden"],
            feature_dim=dims["lifter_features"],
        )
    if kind in ("detector", "e2e"):
        k_max = max(s.keypoint_count for s in reg.schemas())
        bundle.detector = Detector(
            k_max,
            len(reg.schemas()),
            rng,
            dim=dims["det_dim"],
            heads=dims["det_heads"],
            blocks=dims["det_blocks"],
            patch=dims["det_patch"],
            n_context=dims["n_context"],
            spare_queries=dims["det_spare"],
            ffn_dim=dims["det_ffn"],
        )
    return bundle


def save_bundle(bundle, path, extra_meta=None):
    meta = {
        "kind": bundle.kind,
        "categories": bundle.category_spec(),
        "dims": bundle.dims,
        "window": bundle.window,
        "use_context": bundle.use_context,
        "cutoff": bundle.cutoff,
    }
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(bundle.param_dict(), meta, path)


def load_bundle(path):
    tensors, meta = load_checkpoint(path)
    bundle = build_bundle(
        meta["kind"],
        meta["categories"],
        meta["dims"],
        meta["window"],
        use_context=meta.get("use_context", False),
        cutoff=meta.get("cutoff", True),
    )
    restore_into(bundle.param_dict(), tensors, where=path)
    return bundle, meta


def _check_same_categories(reg_a, reg_b, what):
    spec_a = [(s.name, s.keypoint_names) for s in reg_a.schemas()]
    spec_b = [(s.name, s.keypoint_names) for s in reg_b.schemas()]
    if spec_a != spec_b:
        raise ValueError(f"{what}: category layout mismatch")


# -- prepared ground-truth samples --------------------------------------------


@dataclass
class PreparedSample:
    vector: np.ndarray  # lifter input vector
    target: np.ndarray  # (2, k) normalized keypoints (reprojection target)
    zeta: np.ndarray
    visibility: np.ndarray  # stacked, zeros outside block
    category_id: int
    scale: float
    sample: object


def prepare_gt_sample(sample, registry, n_context):
    schema = registry.schema(sample.category_id)
    inp, center, scale = build_lifter_input(
        sample.keypoints2d, sample.visibility, schema, registry.total_keypoints
    )
    vec = input_vector(inp.keypoints2d, inp.visibility, None, n_context)
    return PreparedSample(
        vector=vec,
        target=inp.keypoints2d.copy(),
        zeta=registry.mask(sample.category_id),
        visibility=inp.visibility,
        category_id=sample.category_id,
        scale=scale,
        sample=sample,
    )


def _component_guard(components):
    for name, value in components.items():
        if value is not None and not np.isfinite(value.data):
            raise RuntimeError(f"non-finite loss component {name!r}; aborting")


# -- loss construction ---------------------------------------------------------


def lifter_batch_loss(batch, bundle, huber_delta=0.1):
    """Reprojection loss of prepared GT samples, averaged over the batch."""
    net, dic = bundle.lifter, bundle.dictionary
    x = Tensor(np.stack([p.vector for p in batch]))
    feats = net.features(x)
    betas = net.coefficients(feats)
    rots = net.rotation_raw(feats)
    flats = dic.decode_rows(betas)
    total = None
    for i, p in enumerate(batch):
        rot = rotation_from_6d(ad.reshape(rots[i : i + 1, :], (6,)))
        struct = reshape_structure(ad.reshape(flats[i : i + 1, :], (-1,)))
        reproj = orthographic_project(rot, struct)
        term = loss_reprojection(p.target, reproj, p.zeta, p.visibility, delta=huber_delta)
        total = term if total is None else total + term
    return total * (1.0 / len(batch))


def e2e_sample_losses(sample, bundle, with_reprojection, huber_delta=0.1, match_pairs=None):
    """Detection losses (and optionally the lifting reprojection loss) for
    one image sample. Gradient flows from the reprojection loss back into
    the detector through the matched keypoint locations and the context
    vector; the match itself is constant (finite-difference harnesses pass a
    frozen `match_pairs` so probes cannot flip it)."""
    reg = bundle.registry
    det = bundle.detector
    schema = reg.schema(sample.category_id)
    g = schema.keypoint_count
    k_total = reg.total_keypoints
    out = det.detect(sample.image)

    gt_unit = np.clip(world_to_unit(sample.keypoints2d, bundle.window), 0.0, 1.0)
    if match_pairs is None:
        cost = match_cost_matrix(
            gt_unit, np.arange(g), out.deltas.data, out.type_logits.data
        )
        match_pairs = hungarian_match(cost).pairs
    q_of_gt = {gt: q for q, gt in match_pairs}
    order = [q_of_gt[t] for t in range(g)]

    matched_deltas = ad.concatenate([out.deltas[q : q + 1, :] for q in order], axis=0)
    matched_logits = ad.concatenate([out.type_logits[q : q + 1, :] for q in order], axis=0)
    onehot = np.eye(det.n_types)[:g]

    components = {
        "location": loss_location(gt_unit, ad.transpose(matched_deltas)),
        "keypoint_type": loss_type(onehot, matched_logits),
        "category": loss_category(sample.category_id, out.category_logits),
        "reprojection": None,
    }
    if with_reprojection:
        world = matched_deltas * (2.0 * bundle.window) - bundle.window
        normed, center, scale = normalize_points_graph(world)
        front = Tensor(np.zeros((schema.block_offset, 2)))
        back = Tensor(np.zeros((k_total - schema.block_offset - g, 2)))
        kp_cols = ad.concatenate([front, normed, back], axis=0)  # (k, 2)
        kp_flat = ad.reshape(ad.transpose(kp_cols), (1, 2 * k_total))
        vis_in = np.zeros((1, k_total))
        vis_in[0, schema.block] = 1.0  # detector proposals count as visible
        if bundle.use_context:
            ctx_row = ad.reshape(out.context, (1, det.n_context))
        else:
            ctx_row = Tensor(np.zeros((1, det.n_context)))
        row = ad.concatenate([kp_flat, Tensor(vis_in), ctx_row], axis=1)

        net, dic = bundle.lifter, bundle.dictionary
        feats = net.features(row)
        beta = net.coefficients(feats)
        rot = rotation_from_6d(ad.reshape(net.rotation_raw(feats), (6,)))
        struct = reshape_structure(ad.reshape(dic.decode_rows(beta), (-1,)))
        reproj = orthographic_project(rot, struct)

        gt_world_cols = Tensor(sample.keypoints2d.T)  # (g, 2)
        gt_norm = (gt_world_cols - center) / scale
        target_cols = ad.concatenate([front, gt_norm, back], axis=0)
        target = ad.transpose(target_cols)  # (2, k)
        vis_sup = np.zeros(k_total)
        vis_sup[schema.block] = sample.visibility
        components["reprojection"] = loss_reprojection(
            target, reproj, reg.mask(sample.category_id), vis_sup, delta=huber_delta
        )
    return components


def _batch_components(samples, bundle, with_reprojection, huber_delta):
    sums = {}
    for s in samples:
        comp = e2e_sample_losses(s, bundle, with_reprojection, huber_delta)
        for name, value in comp.items():
            if value is None:
                continue
            sums[name] = value if name not in sums else sums[name] + value
    return {name: value * (1.0 / len(samples)) for name, value in sums.items()}


def train_step(batch, bundle, optimizer, weights, phase, huber_delta=0.1):
    """One optimization step; returns the loss breakdown (floats)."""
    if phase == "lifter-only":
        components = {"reprojection": lifter_batch_loss(batch, bundle, huber_delta)}
    else:
        with_r = phase != "detector-pretrain"
        components = _batch_components(batch, bundle, with_r, huber_delta)
    _component_guard(components)
    loss = total_loss(components, weights)
    params = optimizer.params
    tensors = list(params.values())
    grads = ad.gradient_of(loss, tensors)
    optimizer.step(grads)
    breakdown = {name: float(v.data) for name, v in components.items() if v is not None}
    breakdown["total"] = float(loss.data)
    return breakdown


def _epoch_indices(n, batch_size, rng):
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def _run_epochs(cfg, bundle, items, phase):
    params = bundle.param_dict()
    if phase == "lifter-only":
        weights = LossWeights(location=0.0, keypoint_type=0.0, category=0.0, reprojection=1.0)
        params = {**bundle.lifter.param_dict(), **bundle.dictionary.param_dict()}
    elif phase == "detector-pretrain":
        weights = dataclasses.replace(cfg.weights, reprojection=0.0)
        params = bundle.detector.param_dict()
    else:
        weights = cfg.weights
    opt = Adam(params, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        sums, steps = {}, 0
        for idx in _epoch_indices(len(items), cfg.batch_size, rng):
            batch = [items[i] for i in idx]
            breakdown = train_step(batch, bundle, opt, weights, phase, cfg.huber_delta)
            steps += 1
            for name, value in breakdown.items():
                sums[name] = sums.get(name, 0.0) + value
        means = {name: value / steps for name, value in sums.items()}
        history.append(means)
        if cfg.log:
            parts = " ".join(f"{n}={v:.5f}" for n, v in sorted(means.items()))
            print(f"[{phase}] epoch {epoch + 1}/{cfg.epochs} {parts}", flush=True)
    return history


def train_lifter(cfg):
    """Lifter pretraining phase on GT 2D keypoints (no images, no context)."""
    if cfg.phase != "lifter-only":
        raise ValueError("train_lifter requires phase lifter-only")
    ds = read_dataset(cfg.dataset, with_images=False)
    reg = ds.registry()
    bundle = build_bundle(
        "lifter",
        [{"name": s.name, "keypoint_names": list(s.keypoint_names)} for s in reg.schemas()],
        _dims_from_config(cfg),
        ds.window,
        use_context=False,
        cutoff=cfg.cutoff,
        seed=cfg.seed,
    )
    prepared = [prepare_gt_sample(s, bundle.registry, cfg.n_context) for s in ds.samples]
    history = _run_epochs(cfg, bundle, prepared, "lifter-only")
    _report_dead_atoms(bundle, prepared, cfg)
    meta = {"phase": cfg.phase, "epoch": cfg.epochs, "config": cfg.echo(), "metrics": _final(history)}
    save_bundle(bundle, cfg.out, meta)
    return bundle, history


def _report_dead_atoms(bundle, prepared, cfg):
    with ad.no_grad():
        x = Tensor(np.stack([p.vector for p in prepared[:512]]))
        betas = bundle.lifter.coefficients(bundle.lifter.features(x)).data
    if bundle.cutoff:
        betas = np.maximum(betas, 0.0)
    dead = dead_atoms(betas)
    if dead and cfg.log:
        print(f"[lifter-only] inactive basis atoms (>99% zero coefficient): {dead}", flush=True)


def train_detector(cfg):
    """Detector pretraining on images with Hungarian-matched set losses."""
    if cfg.phase != "detector-pretrain":
        raise ValueError("train_detector requires phase detector-pretrain")
    ds = read_dataset(cfg.dataset, with_images=True)
    reg = ds.registry()
    bundle = build_bundle(
        "detector",
        [{"name": s.name, "keypoint_names": list(s.keypoint_names)} for s in reg.schemas()],
        _dims_from_config(cfg),
        ds.window,
        seed=cfg.seed,
    )
    history = _run_epochs(cfg, bundle, ds.samples, "detector-pretrain")
    meta = {"phase": cfg.phase, "epoch": cfg.epochs, "config": cfg.echo(), "metrics": _final(history)}
    save_bundle(bundle, cfg.out, meta)
    return bundle, history


def train_e2e(cfg):
    """Joint fine-tuning from images; both sub-networks must be pretrained."""
    if cfg.phase not in ("end-to-end", "end-to-end-no-context"):
        raise ValueError("train_e2e requires an end-to-end phase")
    if not cfg.lifter_init or not cfg.detector_init:
        raise ValueError("end-to-end training requires lifter_init and detector_init checkpoints")
    lifter_bundle, _ = load_bundle(cfg.lifter_init)
    detector_bundle, _ = load_bundle(cfg.detector_init)
    if lifter_bundle.lifter is None or lifter_bundle.dictionary is None:
        raise ValueError(f"{cfg.lifter_init}: not a lifter checkpoint")
    if detector_bundle.detector is None:
        raise ValueError(f"{cfg.detector_init}: not a detector checkpoint")
    ds = read_dataset(cfg.dataset, with_images=True)
    reg = ds.registry()
    _check_same_categories(reg, lifter_bundle.registry, "lifter_init vs dataset")
    _check_same_categories(reg, detector_bundle.registry, "detector_init vs dataset")
    if lifter_bundle.dims["n_context"] != detector_bundle.dims["n_context"]:
        raise ValueError("context dimensionality differs between the two checkpoints")
    dims = dict(detector_bundle.dims)
    for key in ("latent_dim", "lifter_hidden", "lifter_features"):
        dims[key] = lifter_bundle.dims[key]
    bundle = ModelBundle(
        kind="e2e",
        registry=lifter_bundle.registry,
        dims=dims,
        window=ds.window,
        use_context=(cfg.phase == "end-to-end"),
        cutoff=lifter_bundle.cutoff,
        dictionary=lifter_bundle.dictionary,
        lifter=lifter_bundle.lifter,
        detector=detector_bundle.detector,
    )
    history = _run_epochs(cfg, bundle, ds.samples, cfg.phase)
    meta = {"phase": cfg.phase, "epoch": cfg.epochs, "config": cfg.echo(), "metrics": _final(history)}
    save_bundle(bundle, cfg.out, meta)
    return bundle, history


def _final(history):
    return history[-1] if history else {}


TRAINERS = {
    "lifter-only": train_lifter,
    "detector-pretrain": train_detector,
    "end-to-end": train_e2e,
    "end-to-end-no-context": train_e2e,
}


def run_training(cfg):
    return TRAINERS[cfg.phase](cfg)


# -- evaluation ----------------------------------------------------------------


def evaluate_bundle(bundle, ds, mode):
    """MPJPE/Stress protocol over a dataset; returns an EvalReport.

    gt-keypoints mode lifts ground-truth 2D points (context absent);
    from-images mode runs the detector, reads keypoints and context off the
    most likely proposals, and lifts those. Predictions are mapped back to
    world scale through the input normalization factor and compared against
    camera-frame ground truth.
    """
    if mode not in ("gt-keypoints", "from-images"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if bundle.lifter is None:
        raise ValueError("evaluation requires a lifter in the checkpoint")
    if mode == "from-images" and bundle.detector is None:
        raise ValueError("from-images evaluation requires a detector in the checkpoint")
    reg = bundle.registry
    _check_same_categories(ds.registry(), reg, "dataset vs checkpoint")
    per_cat = {}
    rows = []
    with ad.no_grad():
        for sample in ds.samples:
            if sample.keypoints3d is None:
                raise ValueError(f"sample {sample.sample_id}: missing 3D ground truth")
            true_schema = reg.schema(sample.category_id)
            if mode == "gt-keypoints":
                inp, _, scale = build_lifter_input(
                    sample.keypoints2d, sample.visibility, true_schema, reg.total_keypoints
                )
            else:
                if sample.image is None:
                    raise ValueError(f"sample {sample.sample_id}: missing image")
                det_out = bundle.detector.detect(sample.image)
                cat_pred, stacked_unit, _ = select_keypoints(det_out, reg)
                pred_schema = reg.schema(cat_pred)
                block_world = unit_to_world(
                    stacked_unit[:, pred_schema.block], bundle.window
                )
                context = det_out.context.data if bundle.use_context else None
                inp, _, scale = build_lifter_input(
                    block_world,
                    np.ones(pred_schema.keypoint_count),
                    pred_schema,
                    reg.total_keypoints,
                    context=context,
                )
            out = lift(inp, bundle.lifter, bundle.dictionary, reg)
            pred_cam = (out.rotation.data @ out.structure.data) * scale
            pred_block = pred_cam[:, true_schema.block]
            gt_cam = sample.rotation @ sample.keypoints3d
            err, flipped = mpjpe_with_flag(pred_block, gt_cam)
            rows.append((true_schema.name, err, stress(pred_block, gt_cam), flipped))
    for name, err, st, flipped in rows:
        bucket = per_cat.setdefault(name, {"mpjpe": [], "stress": [], "flips": []})
        bucket["mpjpe"].append(err)
        bucket["stress"].append(st)
        bucket["flips"].append(flipped)
    per_category = {
        name: {
            "mpjpe": float(np.mean(b["mpjpe"])),
            "stress": float(np.mean(b["stress"])),
            "flip_fraction": float(np.mean(b["flips"])),
            "count": len(b["mpjpe"]),
        }
        for name, b in per_cat.items()
    }
    return EvalReport(
        mpjpe=float(np.mean([r[1] for r in rows])),
        stress=float(np.mean([r[2] for r in rows])),
        flip_fraction=float(np.mean([r[3] for r in rows])),
        per_category=per_category,
        sample_count=len(rows),
    )


def evaluate_checkpoint(checkpoint_path, data_dir, mode):
    bundle, _ = load_bundle(checkpoint_path)
    ds = read_dataset(data_dir, with_images=(mode == "from-images"))
    return evaluate_bundle(bundle, ds, mode)


def template_baseline_mpjpe(ds):
    """MPJPE of the degenerate model that predicts each sample's category
    template (identity pose), evaluated exactly like any other model."""
    errs = []
    for sample in ds.samples:
        template = ds.categories[sample.category_id].template
        gt_cam = sample.rotation @ sample.keypoints3d
        errs.append(mpjpe_with_flag(template, gt_cam)[0])
    return float(np.mean(errs))
