"""``amlab`` command line: train, eval, export, gradcheck.

Exit codes: 0 success, 1 config/input error, 2 divergence, 3 gradient-check
failure.
"""
from __future__ import annotations

import argparse
import csv
import math
import os
import sys

import numpy as np

from amlab import data, metrics
from amlab.config import ConfigError, RunConfig, load_config
from amlab.losses import ClassifierHead, LossConfig, Variant, grad_check
from amlab.margin import DEFAULT_PSI_CONFIGS, LambdaSchedule, export_psi_curve
from amlab.norm import default_direction, export_gradnorm, gradnorm_curve
from amlab.numeric import Rng
from amlab.trainer import CheckpointError, DivergenceError, embed, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4

GRADCHECK_CONFIGS = {
    "softmax": LossConfig(Variant.SOFTMAX),
    "normface": LossConfig(Variant.NORMFACE, s=30.0),
    "a_softmax": LossConfig(Variant.A_SOFTMAX, m_mult=4, lambda_schedule=LambdaSchedule.constant(5.0)),
    "am_softmax": LossConfig(Variant.AM_SOFTMAX, s=30.0, m_add=0.35),
}


class InputError(Exception):
    pass


def _split_seed(seed):
    return seed + 1


def build_dataset(cfg: RunConfig):
    """Return (train, eval) splits for the configured dataset."""
    d = cfg.dataset
    try:
        if d["kind"] == "synthetic":
            full = data.synth_blobs(d["class_count"], d["dim"], d["samples_per_class"], d["spread"], cfg.seed)
            return data.split_per_class(full, d["eval_per_class"], _split_seed(cfg.seed))
        train_set = data.parse_idx(d["train_images"], d["train_labels"], d["scaling"])
        if "eval_images" in d and "eval_labels" in d:
            eval_set = data.parse_idx(d["eval_images"], d["eval_labels"], d["scaling"])
            if eval_set.class_count != train_set.class_count:
                count = max(eval_set.class_count, train_set.class_count)
                train_set = data.LabeledDataset(train_set.inputs, train_set.labels, count)
                eval_set = data.LabeledDataset(eval_set.inputs, eval_set.labels, count)
            return train_set, eval_set
        return data.split_per_class(train_set, d["eval_per_class"], _split_seed(cfg.seed))
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from None


def evaluate(features, dataset, cfg: RunConfig):
    """Metrics report for ``features`` (rows aligned with ``dataset``)."""
    p = cfg.protocol
    seed = cfg.seed
    report = {}
    pairs = data.make_verification_pairs(dataset, p["pair_count"], seed)
    genuine, impostor = metrics.verification_scores(features, pairs)
    curve = metrics.roc(genuine, impostor)
    report["vr_at_far"] = {f"{t:g}": metrics.vr_at_far(curve, t) for t in p["far_targets"]}

    ident = data.make_identification_protocol(
        dataset, p["gallery_per_class"], p["probe_per_class"], p["distractor_classes"], seed
    )
    identities = [k for k in range(dataset.class_count) if k not in ident.distractor_classes]
    templates = metrics.class_templates(features[ident.gallery], dataset.labels[ident.gallery], identities)
    slot = {k: i for i, k in enumerate(identities)}
    truth = np.array([slot[int(k)] for k in ident.probe_truth])
    distractors = features[ident.distractors] if ident.distractors.size else None
    report["rank1"] = metrics.cmc(features[ident.probes], templates, distractors, truth).rank(1)
    if not ident.closed_set:
        probes = np.vstack([features[ident.probes], features[ident.distractors]])
        probe_truth = list(truth) + [None] * ident.distractors.size
        report["dir_at_far"] = metrics.dir_at_far(probes, templates, probe_truth, p["dir_far"])

    stats = metrics.feature_stats(features, dataset.labels)
    report["mean_intra_angle_deg"] = math.degrees(stats.mean_intra_class_angle_rad)
    report["min_inter_center_angle_deg"] = math.degrees(stats.min_inter_center_angle_rad)
    return report


def _write_history(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iter", "loss", "lr", "lambda"])
        for i, (loss, lr, lam) in enumerate(zip(history.losses, history.lrs, history.lambdas)):
            writer.writerow([i, repr(loss), repr(lr), repr(lam)])


def _write_json(path, report):
    with open(path, "w", newline="") as fh:
        fh.write(metrics.metrics_json(report))


def _resolve(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    out = args.out or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    return cfg, out


def cmd_train(args):
    cfg, out = _resolve(args)
    train_set, _ = build_dataset(cfg)
    mlp = cfg.mlp_config(train_set.inputs.shape[1])
    try:
        history = train(train_set, mlp, cfg.loss_config(), cfg.train_config())
    except DivergenceError as exc:
        print(f"amlab: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(os.path.join(out, "model.amlb"), history.net, history.head)
    _write_history(os.path.join(out, "history.csv"), history)
    report = evaluate(embed(history.net, train_set.inputs), train_set, cfg)
    report["final_train_accuracy"] = history.epoch_accuracy[-1]
    _write_json(os.path.join(out, "train_metrics.json"), report)
    print(f"trained {len(history.losses)} iterations, final loss {history.losses[-1]:.6g}")
    return EXIT_OK


def cmd_eval(args):
    if not args.checkpoint:
        raise InputError("eval needs --checkpoint")
    cfg, out = _resolve(args)
    try:
        net, _ = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise InputError(str(exc)) from None
    _, eval_set = build_dataset(cfg)
    try:
        features = embed(net, eval_set.inputs)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    report = evaluate(features, eval_set, cfg)
    text = metrics.metrics_json(report)
    with open(os.path.join(out, "eval_metrics.json"), "w", newline="") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def _spread_head(class_count, dim, seed):
    return ClassifierHead.random(class_count, dim, Rng(seed), normalized=True).weights


def cmd_export(args):
    cfg, out = _resolve(args)
    if args.what == "psi_curve":
        if args.grid < 2:
            raise InputError("--grid must be >= 2")
        export_psi_curve(DEFAULT_PSI_CONFIGS, args.grid, os.path.join(out, "psi_curve.csv"))
    elif args.what == "features":
        if not args.checkpoint:
            raise InputError("features export needs --checkpoint")
        try:
            net, _ = load_checkpoint(args.checkpoint)
        except CheckpointError as exc:
            raise InputError(str(exc)) from None
        _, eval_set = build_dataset(cfg)
        features = embed(net, eval_set.inputs)
        metrics.export_features(features, eval_set.labels, os.path.join(out, "features.csv"))
    else:
        if args.checkpoint:
            try:
                _, head = load_checkpoint(args.checkpoint)
            except CheckpointError as exc:
                raise InputError(str(exc)) from None
            weights = head.weights
        else:
            weights = _spread_head(10, 3, cfg.seed)
        if not 0 <= args.target < weights.shape[0]:
            raise InputError(f"--target must lie in [0, {weights.shape[0]})")
        if args.points < 2 or args.s <= 0:
            raise InputError("--points must be >= 2 and --s positive")
        norms = np.geomspace(args.min_norm, args.max_norm, args.points)
        direction = default_direction(weights, args.target)
        curve = gradnorm_curve(weights, direction, norms, args.s, args.target)
        export_gradnorm(curve, os.path.join(out, "gradnorm.csv"))
    print(f"wrote {args.what} to {out}")
    return EXIT_OK


def cmd_gradcheck(args):
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in GRADCHECK_CONFIGS]
    if unknown or not variants:
        raise InputError(f"unknown variants {unknown}; choose from {sorted(GRADCHECK_CONFIGS)}")
    seed = 1 if args.seed is None else args.seed
    failed = False
    for name in variants:
        errors = [
            grad_check(GRADCHECK_CONFIGS[name], seed=s, perturb=args.corrupt_gradient)
            for s in range(seed, seed + args.seeds)
        ]
        worst = max(errors)
        ok = worst < GRADCHECK_TOL
        failed |= not ok
        print(f"{name:<11} max_rel_err={worst:.3e} {'ok' if ok else 'FAIL'}")
    return EXIT_GRADCHECK if failed else EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="amlab", description="Large-margin softmax laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run configuration JSON")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (overrides output_dir)")

    p = sub.add_parser("train", help="train an embedder and write checkpoint + history")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the eval split")
    common(p)
    p.add_argument("--checkpoint", required=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="write psi curves, embedded features or gradient-norm curves as CSV")
    common(p)
    p.add_argument("what", choices=["psi_curve", "features", "gradnorm"])
    p.add_argument("--checkpoint")
    p.add_argument("--grid", type=int, default=181, help="psi_curve grid points")
    p.add_argument("--s", type=float, default=30.0, help="gradnorm scale")
    p.add_argument("--target", type=int, default=0, help="gradnorm target class")
    p.add_argument("--points", type=int, default=201)
    p.add_argument("--min-norm", type=float, default=0.5)
    p.add_argument("--max-norm", type=float, default=200.0)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    common(p)
    p.add_argument("--variants", default=",".join(GRADCHECK_CONFIGS))
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--corrupt-gradient", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, InputError, data.InsufficientSamplesError, data.IdxFormatError) as exc:
        print(f"amlab: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
