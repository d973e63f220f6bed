"""Command-line surface.

Subcommands: gen-data, train-lifter, train-detector, train-e2e, eval,
gradcheck, coherence, morph. Training commands read a JSON config file and
any flag given on the command line overrides the matching config key.
Exit code 0 on success; failures print one diagnostic line and exit 1.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import autodiff as ad
from .gradcheck import run_gradient_suite
from .lifter import build_lifter_input, lift
from .matching import LossWeights
from .metrics import mutual_coherence
from .shapemodel import cross_category_decode
from .synthdata import generate_dataset, read_dataset, write_dataset
from .training import (
    TrainConfig,
    evaluate_checkpoint,
    load_bundle,
    run_training,
)

_CONFIG_KEYS = (
    "dataset",
    "out",
    "seed",
    "epochs",
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
    "lifter_init",
    "detector_init",
)


def _add_train_flags(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--huber-delta", type=float, dest="huber_delta")
    p.add_argument("--latent-dim", type=int, dest="latent_dim")
    p.add_argument("--n-context", type=int, dest="n_context")
    p.add_argument("--lifter-hidden", type=int, dest="lifter_hidden")
    p.add_argument("--lifter-features", type=int, dest="lifter_features")
    p.add_argument("--det-dim", type=int, dest="det_dim")
    p.add_argument("--det-heads", type=int, dest="det_heads")
    p.add_argument("--det-blocks", type=int, dest="det_blocks")
    p.add_argument("--det-patch", type=int, dest="det_patch")
    p.add_argument("--det-spare", type=int, dest="det_spare")
    p.add_argument("--det-ffn", type=int, dest="det_ffn")
    p.add_argument("--lifter-init", dest="lifter_init")
    p.add_argument("--detector-init", dest="detector_init")
    p.add_argument("--no-cutoff", action="store_true", help="plain coefficients, no truncation")
    p.add_argument("--quiet", action="store_true")


def _build_config(args, phase):
    raw = {}
    if args.config:
        with open(args.config) as f:
            raw = json.load(f)
    raw.pop("phase", None)
    weights_raw = raw.pop("weights", None)
    cutoff = raw.pop("cutoff", True)
    for key in _CONFIG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    unknown = set(raw) - set(_CONFIG_KEYS)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if args.no_cutoff:
        cutoff = False
    weights = LossWeights(**weights_raw) if weights_raw else LossWeights()
    if "dataset" not in raw:
        raise ValueError("a dataset path is required (config key 'dataset' or --dataset)")
    return TrainConfig(
        phase=phase, weights=weights, cutoff=cutoff, log=not args.quiet, **raw
    )


def cmd_gen_data(args):
    ds = generate_dataset(
        args.categories,
        args.samples,
        args.seed,
        split=args.split,
        deformation_scale=args.deformation_scale,
        context_coupling=args.context_coupling,
        workers=args.workers,
    )
    write_dataset(ds, args.out)
    print(
        f"wrote {len(ds.samples)} samples over {len(ds.categories)} categories to {args.out}"
    )
    return 0


def cmd_train(args, phase):
    if phase == "end-to-end" and args.no_context:
        phase = "end-to-end-no-context"
    cfg = _build_config(args, phase)
    _, history = run_training(cfg)
    final = history[-1] if history else {}
    parts = " ".join(f"{k}={v:.5f}" for k, v in sorted(final.items()))
    print(f"saved checkpoint {cfg.out} ({parts})" if parts else f"saved checkpoint {cfg.out}")
    return 0


def cmd_eval(args):
    report = evaluate_checkpoint(args.checkpoint, args.data, args.mode)
    print(report.table())
    if args.report:
        with open(args.report, "w") as f:
            f.write(report.to_kv())
        print(f"wrote {args.report}")
    return 0


def cmd_gradcheck(args):
    results = run_gradient_suite(seed=args.seed, step=args.step, tol=args.tol)
    checked = [r for r in results if r.resamples >= 0]
    failed = [r for r in checked if not r.passed]
    worst = {}
    for r in checked:
        worst[r.loss] = max(worst.get(r.loss, 0.0), r.error)
    for loss_name, err in sorted(worst.items()):
        print(f"{loss_name}: max rel err {err:.3e}")
    if failed:
        for r in failed:
            print(f"FAIL {r.loss} w.r.t. {r.group}: {r.error:.3e}")
        return 1
    print(f"gradcheck passed: {len(checked)} loss/group pairs")
    return 0


def cmd_coherence(args):
    bundle, _ = load_bundle(args.checkpoint)
    if bundle.lifter is None:
        raise ValueError("checkpoint has no lifter (no latent basis to measure)")
    value = mutual_coherence(bundle.lifter.coeff_weight.data)
    print(f"mutual_coherence={value!r}")
    return 0


def cmd_morph(args):
    bundle, _ = load_bundle(args.checkpoint)
    if bundle.lifter is None:
        raise ValueError("checkpoint has no lifter")
    ds = read_dataset(args.data, with_images=False)
    reg = bundle.registry
    sample = next((s for s in ds.samples if s.sample_id == args.sample), None)
    if sample is None:
        raise ValueError(f"sample {args.sample!r} not found in {args.data}")
    target = reg.by_name(args.target_category)
    schema = reg.schema(sample.category_id)
    inp, _, _ = build_lifter_input(
        sample.keypoints2d, sample.visibility, schema, reg.total_keypoints
    )
    with ad.no_grad():
        out = lift(inp, bundle.lifter, bundle.dictionary, reg)
        decoded = cross_category_decode(
            out.beta_raw.data, target.category_id, bundle.dictionary, reg
        )
    print(f"# latent code of {sample.sample_id} decoded as {target.name}")
    for j, name in enumerate(target.keypoint_names):
        x, y, z = (float(v) for v in decoded[:, j])
        print(f"{name} {x!r} {y!r} {z!r}")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="kplift")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--categories", type=int, required=True)
    g.add_argument("--samples", type=int, required=True, help="samples per category")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--split", default="train", choices=("train", "test", "val"))
    g.add_argument("--deformation-scale", type=float, default=0.2, dest="deformation_scale")
    g.add_argument("--context-coupling", type=float, default=1.0, dest="context_coupling")
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(fn=cmd_gen_data)

    for name, phase in (
        ("train-lifter", "lifter-only"),
        ("train-detector", "detector-pretrain"),
        ("train-e2e", "end-to-end"),
    ):
        t = sub.add_parser(name, help=f"run the {phase} phase")
        _add_train_flags(t)
        if name == "train-e2e":
            t.add_argument("--no-context", action="store_true", dest="no_context")
        t.set_defaults(fn=lambda a, p=phase: cmd_train(a, p))

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", required=True, choices=("gt-keypoints", "from-images"))
    e.add_argument("--report", help="write machine-readable key=value file")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--step", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(fn=cmd_gradcheck)

    h = sub.add_parser("coherence", help="mutual coherence of the latent basis")
    h.add_argument("--checkpoint", required=True)
    h.set_defaults(fn=cmd_coherence)

    m = sub.add_parser("morph", help="decode a sample's latent code as another category")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--sample", required=True)
    m.add_argument("--target-category", required=True, dest="target_category")
    m.set_defaults(fn=cmd_morph)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # one diagnostic line, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
