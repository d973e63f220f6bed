import dataclasses
import os

import numpy as np
import pytest

from kplift import autodiff as ad
from kplift import training as tg
from kplift.matching import LossWeights
from kplift.synthdata import generate_dataset, read_dataset, write_dataset

TINY = dict(
    latent_dim=6,
    n_context=8,
    lifter_hidden=32,
    lifter_features=16,
    det_dim=16,
    det_heads=2,
    det_blocks=2,
    det_patch=16,
    det_spare=2,
    det_ffn=32,
)


@pytest.fixture(scope="module")
def data_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    tr = generate_dataset(2, 30, 5, split="train")
    te = generate_dataset(2, 10, 5, split="test")
    write_dataset(tr, root / "train")
    write_dataset(te, root / "test")
    return str(root / "train"), str(root / "test")


def lifter_cfg(data, out, **kw):
    base = dict(phase="lifter-only", dataset=data, out=out, seed=1, epochs=2, log=False, **TINY)
    base.update(kw)
    return tg.TrainConfig(**base)


def detector_cfg(data, out, **kw):
    base = dict(
        phase="detector-pretrain", dataset=data, out=out, seed=2, epochs=1, log=False, **TINY
    )
    base.update(kw)
    return tg.TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError, match="phase"):
        tg.TrainConfig(phase="bogus", dataset="x")
    with pytest.raises(ValueError, match="positive"):
        tg.TrainConfig(phase="lifter-only", dataset="x", batch_size=0)
    cfg = tg.TrainConfig(phase="lifter-only", dataset="x")
    assert cfg.epochs == 20 and cfg.lr == 1e-3
    cfg = tg.TrainConfig(phase="end-to-end", dataset="x")
    assert cfg.epochs == 30 and cfg.lr == 1e-4


def test_zero_lr_leaves_params_unchanged(data_dirs):
    train_dir, _ = data_dirs
    ds = read_dataset(train_dir, with_images=False)
    reg = ds.registry()
    spec = [{"name": s.name, "keypoint_names": list(s.keypoint_names)} for s in reg.schemas()]
    cfg = lifter_cfg(train_dir, "unused", lr=1e-3)
    bundle = tg.build_bundle("lifter", spec, tg._dims_from_config(cfg), ds.window, seed=3)
    prepared = [tg.prepare_gt_sample(s, bundle.registry, cfg.n_context) for s in ds.samples[:8]]
    params = {**bundle.lifter.param_dict(), **bundle.dictionary.param_dict()}
    before = {n: p.data.copy() for n, p in params.items()}
    opt = tg.Adam(params, lr=0.0)
    weights = LossWeights(location=0, keypoint_type=0, category=0, reprojection=1)
    tg.train_step(prepared, bundle, opt, weights, "lifter-only")
    for n, p in params.items():
        assert np.array_equal(p.data, before[n]), n


def test_single_sample_step_descends(data_dirs):
    train_dir, _ = data_dirs
    ds = read_dataset(train_dir, with_images=False)
    reg = ds.registry()
    spec = [{"name": s.name, "keypoint_names": list(s.keypoint_names)} for s in reg.schemas()]
    cfg = lifter_cfg(train_dir, "unused")
    bundle = tg.build_bundle("lifter", spec, tg._dims_from_config(cfg), ds.window, seed=4)
    prepared = [tg.prepare_gt_sample(ds.samples[0], bundle.registry, cfg.n_context)]
    loss0 = float(tg.lifter_batch_loss(prepared, bundle).data)
    params = {**bundle.lifter.param_dict(), **bundle.dictionary.param_dict()}
    opt = tg.Adam(params, lr=1e-4)
    weights = LossWeights(location=0, keypoint_type=0, category=0, reprojection=1)
    tg.train_step(prepared, bundle, opt, weights, "lifter-only")
    loss1 = float(tg.lifter_batch_loss(prepared, bundle).data)
    assert loss1 < loss0


def test_identical_seeds_identical_trajectories(data_dirs):
    train_dir, _ = data_dirs
    h1 = tg.train_lifter(lifter_cfg(train_dir, "/tmp/traj_a.kpc"))[1]
    h2 = tg.train_lifter(lifter_cfg(train_dir, "/tmp/traj_b.kpc"))[1]
    assert h1 == h2


def test_training_checkpoint_bitwise_determinism(data_dirs, tmp_path):
    train_dir, _ = data_dirs
    out = str(tmp_path / "a.kpc")
    tg.train_lifter(lifter_cfg(train_dir, out))
    first = open(out, "rb").read()
    tg.train_lifter(lifter_cfg(train_dir, out))
    assert open(out, "rb").read() == first


def test_lifter_phase_never_touches_images(data_dirs, tmp_path):
    train_dir, _ = data_dirs
    stripped = tmp_path / "no_images"
    ds = read_dataset(train_dir, with_images=True)
    write_dataset(ds, stripped)
    for f in (stripped / "images").iterdir():
        f.unlink()
    (stripped / "images").rmdir()
    cfg = lifter_cfg(str(stripped), str(tmp_path / "lift.kpc"), epochs=1)
    bundle, history = tg.train_lifter(cfg)
    assert len(history) == 1


def test_checkpoint_roundtrip_preserves_evaluation(data_dirs, tmp_path):
    train_dir, test_dir = data_dirs
    out = str(tmp_path / "lift.kpc")
    bundle, _ = tg.train_lifter(lifter_cfg(train_dir, out))
    te = read_dataset(test_dir, with_images=False)
    rep_live = tg.evaluate_bundle(bundle, te, "gt-keypoints")
    rep_loaded = tg.evaluate_checkpoint(out, test_dir, "gt-keypoints")
    # float32 round trip quantizes parameters, so reports agree only after
    # the loaded model re-runs; compare loaded-vs-loaded for exactness
    rep_loaded2 = tg.evaluate_checkpoint(out, test_dir, "gt-keypoints")
    assert rep_loaded.mpjpe == rep_loaded2.mpjpe
    assert rep_loaded.stress == rep_loaded2.stress
    assert abs(rep_live.mpjpe - rep_loaded.mpjpe) < 1e-4


def test_detector_training_and_e2e_pipeline(data_dirs, tmp_path):
    train_dir, test_dir = data_dirs
    lift_out = str(tmp_path / "lift.kpc")
    det_out = str(tmp_path / "det.kpc")
    e2e_out = str(tmp_path / "e2e.kpc")
    tg.train_lifter(lifter_cfg(train_dir, lift_out))
    tg.train_detector(detector_cfg(train_dir, det_out))
    cfg = tg.TrainConfig(
        phase="end-to-end",
        dataset=train_dir,
        out=e2e_out,
        seed=3,
        epochs=1,
        batch_size=16,
        log=False,
        lifter_init=lift_out,
        detector_init=det_out,
        **TINY,
    )
    bundle, history = tg.train_e2e(cfg)
    assert {"location", "keypoint_type", "category", "reprojection", "total"} <= set(history[0])
    rep = tg.evaluate_checkpoint(e2e_out, test_dir, "from-images")
    assert rep.sample_count == 20
    assert rep.mpjpe >= 0.0


def test_e2e_requires_init_checkpoints(data_dirs):
    train_dir, _ = data_dirs
    cfg = tg.TrainConfig(
        phase="end-to-end", dataset=train_dir, out="x.kpc", epochs=1, log=False, **TINY
    )
    with pytest.raises(ValueError, match="requires lifter_init and detector_init"):
        tg.train_e2e(cfg)


def test_e2e_reprojection_reaches_detector_params(data_dirs):
    train_dir, _ = data_dirs
    ds = read_dataset(train_dir, with_images=True)
    reg = ds.registry()
    spec = [{"name": s.name, "keypoint_names": list(s.keypoint_names)} for s in reg.schemas()]
    cfg = lifter_cfg(train_dir, "unused")
    bundle = tg.build_bundle(
        "e2e", spec, tg._dims_from_config(cfg), ds.window, use_context=True, seed=9
    )
    comps = tg.e2e_sample_losses(ds.samples[0], bundle, with_reprojection=True)
    det_params = bundle.detector.param_dict()
    grads = ad.gradient_of(comps["reprojection"], list(det_params.values()))
    norm = sum(float(np.sum(g * g)) for g in grads.values())
    assert norm > 0.0


def test_frozen_composition_via_zero_epochs(data_dirs, tmp_path):
    train_dir, test_dir = data_dirs
    lift_out = str(tmp_path / "l.kpc")
    det_out = str(tmp_path / "d.kpc")
    frozen = str(tmp_path / "frozen.kpc")
    tg.train_lifter(lifter_cfg(train_dir, lift_out, epochs=1))
    tg.train_detector(detector_cfg(train_dir, det_out))
    cfg = tg.TrainConfig(
        phase="end-to-end-no-context",
        dataset=train_dir,
        out=frozen,
        epochs=0,
        log=False,
        lifter_init=lift_out,
        detector_init=det_out,
        **TINY,
    )
    bundle, history = tg.train_e2e(cfg)
    assert history == []
    rep = tg.evaluate_checkpoint(frozen, test_dir, "from-images")
    assert rep.sample_count == 20


def test_evaluate_mode_errors(data_dirs, tmp_path):
    train_dir, test_dir = data_dirs
    det_out = str(tmp_path / "d.kpc")
    tg.train_detector(detector_cfg(train_dir, det_out))
    with pytest.raises(ValueError, match="requires a lifter"):
        tg.evaluate_checkpoint(det_out, test_dir, "from-images")
    lift_out = str(tmp_path / "l.kpc")
    tg.train_lifter(lifter_cfg(train_dir, lift_out, epochs=1))
    with pytest.raises(ValueError, match="requires a detector"):
        tg.evaluate_checkpoint(lift_out, test_dir, "from-images")
    with pytest.raises(ValueError, match="unknown evaluation mode"):
        tg.evaluate_checkpoint(lift_out, test_dir, "nonsense")


def test_template_baseline_positive(data_dirs):
    _, test_dir = data_dirs
    te = read_dataset(test_dir, with_images=False)
    base = tg.template_baseline_mpjpe(te)
    assert base > 0.1


def test_eval_frame_conventions_admit_zero_error(data_dirs):
    # A model that predicted structure (X_gt - R^T [c;0]) / s with the true
    # rotation would reproject exactly onto the normalized input keypoints
    # AND score MPJPE 0 after the evaluator's de-normalization. This pins the
    # frame conventions shared by training and evaluation.
    from kplift.lifter import normalize_keypoints
    from kplift.metrics import mpjpe
    from kplift.geometry import orthographic_project

    _, test_dir = data_dirs
    ds = read_dataset(test_dir, with_images=False)
    for s in ds.samples[:5]:
        normed, c, scale = normalize_keypoints(s.keypoints2d, s.visibility)
        shift = s.rotation.T @ np.array([c[0], c[1], 0.0])
        x_pred = (s.keypoints3d - shift[:, None]) / scale
        reproj = orthographic_project(s.rotation, x_pred)
        vis = s.visibility > 0
        assert np.max(np.abs(reproj[:, vis] - normed[:, vis])) < 1e-9
        pred_cam = (s.rotation @ x_pred) * scale
        gt_cam = s.rotation @ s.keypoints3d
        assert mpjpe(pred_cam, gt_cam) < 1e-9


def test_nonfinite_loss_aborts_with_component_name(data_dirs):
    train_dir, _ = data_dirs
    ds = read_dataset(train_dir, with_images=False)
    reg = ds.registry()
    spec = [{"name": s.name, "keypoint_names": list(s.keypoint_names)} for s in reg.schemas()]
    cfg = lifter_cfg(train_dir, "unused")
    bundle = tg.build_bundle("lifter", spec, tg._dims_from_config(cfg), ds.window, seed=4)
    bundle.dictionary.bias.data = np.full_like(bundle.dictionary.bias.data, np.nan)
    prepared = [tg.prepare_gt_sample(ds.samples[0], bundle.registry, cfg.n_context)]
    params = {**bundle.lifter.param_dict(), **bundle.dictionary.param_dict()}
    opt = tg.Adam(params, lr=1e-3)
    weights = LossWeights(location=0, keypoint_type=0, category=0, reprojection=1)
    with pytest.raises(RuntimeError, match="reprojection"):
        tg.train_step(prepared, bundle, opt, weights, "lifter-only")
