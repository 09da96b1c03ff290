"""Command-line interface.

Subcommands: gen-data, train, distill, daft, eval, analyze, search, report.
Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
failure. Metrics are emitted as JSON lines; reports render CSV tables plus
PNG figures.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys

import numpy as np

from .adversary import PerturbConfig
from .analysis import accuracy, feature_correlations, pearson, prec_at_k, rap, spearman
from .data import (
    DataFormatError,
    SPLIT_EVAL20,
    SPLIT_TRAIN80,
    estimate_color_t,
    load_dataset,
    make_colored_dataset,
    make_domain_suite,
    make_two_feature_dataset,
    save_dataset,
)
from .harness import (
    ALGORITHMS,
    ExperimentPlan,
    compare_runs,
    run_experiment,
    train_pipeline,
)
from .nn import CheckpointError, load_checkpoint, save_checkpoint
from .pipelines import (
    TrainConfig,
    TrainingDivergedError,
    distill as distill_student,
    make_teacher_bundle,
)
from .report import load_run_report, render_report
from .tensor import NumericsError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config files


_DEFAULTS = {
    "lr": 5e-4, "steps": 1000, "batch_size": 64,
    "finetune_steps": 500, "distill_steps": 1000,
    "epsilon": 0.2, "attack_steps": 5, "attack_lr": 0.05, "space": "input",
    "tau": 4.0, "alpha": 1e-3,
    "n_configs": 8, "n_seeds": 5,
    "feature_dim": 32, "arch": "smallcnn",
}

_INT_KEYS = {"steps", "batch_size", "finetune_steps", "distill_steps",
             "attack_steps", "n_configs", "n_seeds", "feature_dim"}


def load_config(path: str | None) -> dict:
    """Flat key-value config merged across INI sections, with defaults."""
    merged = dict(_DEFAULTS)
    if path is None:
        return merged
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise DataFormatError(f"{path}: config file not found or unreadable")
    for section in cp.sections():
        for key, raw in cp[section].items():
            if key in _INT_KEYS:
                merged[key] = int(float(raw))
            elif key in ("space", "arch", "mode", "algorithm", "selection"):
                merged[key] = raw.strip()
            else:
                try:
                    merged[key] = float(raw)
                except ValueError:
                    merged[key] = raw.strip()
    return merged


def _perturb_from(cfg: dict) -> PerturbConfig:
    return PerturbConfig(epsilon=float(cfg["epsilon"]), steps=int(cfg["attack_steps"]),
                         step_size=float(cfg["attack_lr"]), space=str(cfg["space"]))


def _arch_for(ds, cfg: dict) -> dict:
    n_classes = int(ds.labels.max()) + 1
    c, h, w = ds.images.shape[1:]
    if cfg["arch"] == "smallcnn":
        return {"kind": "smallcnn", "input_shape": [int(c), int(h), int(w)],
                "feature_dim": int(cfg["feature_dim"]), "num_classes": n_classes}
    if cfg["arch"] == "mlp":
        return {"kind": "mlp", "input_dim": int(c * h * w),
                "feature_dim": int(cfg["feature_dim"]), "num_classes": n_classes}
    if cfg["arch"] == "linear":
        return {"kind": "linear", "input_dim": int(c * h * w),
                "feature_dim": int(cfg["feature_dim"]), "num_classes": n_classes}
    raise UsageError(f"unknown arch {cfg['arch']!r}")


def _emit(fh, **row):
    fh.write(json.dumps(row) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg_kw = dict(seed=args.seed, image_size=args.image_size)
    if args.kind == "colored":
        mode = "train_correlated" if args.mode == "train" else "test_uncorrelated"
        ds = make_colored_dataset(n_per_class=args.n_per_class, mode=mode, **cfg_kw)
    elif args.kind == "suite":
        ds = make_domain_suite(n_per_class_per_domain=args.n_per_class, **cfg_kw)
    else:
        ds = make_two_feature_dataset(2 * args.n_per_class, seed=args.seed,
                                      spurious_strength=args.spurious_strength)
    save_dataset(ds, args.out)
    print(json.dumps({"out": args.out, "n": len(ds), "domains": ds.domains}))
    return 0


def _train_common(args, algorithm: str, mode_override: str | None = None) -> int:
    cfg = load_config(args.config)
    ds = load_dataset(args.data)
    train = ds.take(split=SPLIT_TRAIN80, purpose="cli.train")
    arch = _arch_for(ds, cfg)
    hyper = {k: cfg[k] for k in ("lr", "epsilon", "attack_steps", "attack_lr",
                                 "tau", "alpha")}
    algo = mode_override or algorithm
    model = train_pipeline(algo, arch, train.images, train.labels, hyper,
                           seed=args.seed, steps=int(cfg["steps"]),
                           finetune_steps=int(cfg["finetune_steps"]),
                           distill_steps=int(cfg["distill_steps"]),
                           batch_size=int(cfg["batch_size"]))
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "model.ckpt")
    save_checkpoint(model, ckpt)
    evald = ds.take(split=SPLIT_EVAL20, purpose="cli.train.eval")
    acc = accuracy(model, evald.images, evald.labels)
    with open(os.path.join(args.out, "metrics.jsonl"), "w") as fh:
        _emit(fh, run_id=f"{algo}-s{args.seed}", stage="train", step=int(cfg["steps"]),
              split="eval20", domain=None, metric="accuracy", value=acc)
    print(json.dumps({"checkpoint": ckpt, "algorithm": algo, "eval20_accuracy": acc}))
    return 0


def cmd_train(args) -> int:
    return _train_common(args, args.algo)


def cmd_daft(args) -> int:
    return _train_common(args, "daft")


def cmd_distill(args) -> int:
    mode_to_algo = {"plain": "distill", "single": "daft-single", "multi": "daft"}
    if args.checkpoint is None:
        return _train_common(args, mode_to_algo[args.mode])
    # reuse a trained teacher checkpoint: fine-tune its head, then distill
    cfg = load_config(args.config)
    teacher = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    train = ds.take(split=SPLIT_TRAIN80, purpose="cli.distill")
    pc = _perturb_from(cfg)
    ft = TrainConfig(lr=float(cfg["lr"]), batch_size=int(cfg["batch_size"]),
                     steps=int(cfg["finetune_steps"]), seed=args.seed + 1, perturb=pc)
    bundle = make_teacher_bundle(teacher, train.images, train.labels, ft,
                                 alpha=float(cfg["alpha"]), tau=float(cfg["tau"]))
    from .nn import build_model
    student = build_model(teacher.arch, seed=args.seed + 2)
    d_cfg = TrainConfig(lr=float(cfg["lr"]), batch_size=int(cfg["batch_size"]),
                        steps=int(cfg["distill_steps"]), seed=args.seed + 3)
    distill_student(student, train.images, train.labels, bundle, args.mode, d_cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "model.ckpt")
    save_checkpoint(student, ckpt)
    evald = ds.take(split=SPLIT_EVAL20, purpose="cli.distill.eval")
    acc = accuracy(student, evald.images, evald.labels)
    print(json.dumps({"checkpoint": ckpt, "mode": args.mode, "eval20_accuracy": acc}))
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    split = {"train80": SPLIT_TRAIN80, "eval20": SPLIT_EVAL20, "all": None}[args.split]
    rows = []
    for d in ds.domains:
        sub = ds.take(domains=[d], split=split, purpose="cli.eval")
        rows.append({"domain": d, "split": args.split, "n": len(sub),
                     "accuracy": accuracy(model, sub.images, sub.labels)})
    overall = ds.take(split=split, purpose="cli.eval")
    out = {"overall_accuracy": accuracy(model, overall.images, overall.labels),
           "per_domain": rows}
    print(json.dumps(out))
    return 0


def _probe_features(model, ds):
    t = estimate_color_t(ds.images)
    ok = np.isfinite(t)
    probe = feature_correlations(model, ds.images[ok],
                                 {"shape": ds.labels[ok], "color": t[ok]})
    return probe


def cmd_analyze(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    if args.probe == "ttest":
        rep_a = load_run_report(args.runs[0])
        rep_b = load_run_report(args.runs[1])
        out = compare_runs(rep_a, rep_b)
        with open(os.path.join(args.out, "ttest.json"), "w") as fh:
            json.dump(out, fh, indent=2, sort_keys=True)
        print(json.dumps(out))
        return 0

    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)

    if args.probe == "features":
        probe = _probe_features(model, ds)
        dom = probe.dominance()
        path = os.path.join(args.out, "features.csv")
        with open(path, "w") as fh:
            fh.write("feature,r_shape,r_color,shape_dominant,degenerate\n")
            for i in range(len(dom)):
                fh.write(f"{i},{probe.correlations['shape'][i]:.6f},"
                         f"{probe.correlations['color'][i]:.6f},"
                         f"{int(dom[i])},{int(probe.degenerate[i])}\n")
        out = {"csv": path, "shape_dominant": int(dom.sum()),
               "shape_dominant_high": probe.shape_dominant_count()}
        print(json.dumps(out))
        return 0

    if args.probe == "rap":
        cfg = load_config(args.config)
        probe = _probe_features(model, ds)
        dom = probe.dominance()
        pc_in = _perturb_from({**cfg, "space": "input"})
        pc_ft = _perturb_from({**cfg, "space": "feature"})
        rap_in = rap(model, ds.images, ds.labels, pc_in)
        rap_ft = rap(model, ds.images, ds.labels, pc_ft)
        r, degen = pearson(rap_in.values, rap_ft.values)
        path = os.path.join(args.out, "rap.csv")
        with open(path, "w") as fh:
            fh.write("feature,rap_input,rap_feature,shape_dominant\n")
            for i in range(len(dom)):
                fh.write(f"{i},{rap_in.values[i]:.6f},{rap_ft.values[i]:.6f},{int(dom[i])}\n")
        color_max = float(rap_in.values[~dom].max()) if (~dom).any() else 0.0
        shape_max = float(rap_in.values[dom].max()) if dom.any() else 0.0
        out = {"csv": path, "pearson_input_vs_feature": r, "degenerate": degen,
               "max_rap_input_color": color_max, "max_rap_input_shape": shape_max}
        print(json.dumps(out))
        return 0

    # logits: rank agreement between two checkpoints
    other = load_checkpoint(args.checkpoint_b)
    la = model.logits_np(ds.images)
    lb = other.logits_np(ds.images)
    rs = [spearman(a, b)[0] for a, b in zip(la, lb)]
    out = {"mean_spearman": float(np.mean(rs)),
           "prec_at_1": prec_at_k(la, lb, 1)}
    with open(os.path.join(args.out, "logits.json"), "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
    print(json.dumps(out))
    return 0


def cmd_search(args) -> int:
    cfg = load_config(args.config)
    ds = load_dataset(args.data)
    selection = {"lodo": "leave_one_domain_out", "oracle": "oracle"}[args.select]
    n_configs = 32 if args.full_protocol else int(cfg["n_configs"])
    plan = ExperimentPlan(
        algorithm=args.algo, dataset=ds, selection=selection,
        n_configs=n_configs, n_seeds=int(cfg["n_seeds"]), seed=args.seed,
        arch=_arch_for(ds, cfg), steps=int(cfg["steps"]),
        finetune_steps=int(cfg["finetune_steps"]),
        distill_steps=int(cfg["distill_steps"]), batch_size=int(cfg["batch_size"]))
    report = run_experiment(plan, args.out)
    print(json.dumps({"out": args.out, "selected_index": report["selected_index"],
                      "ood_mean": report["ood_accuracy"]["mean"]}))
    return 0


def cmd_report(args) -> int:
    reports = [load_run_report(d) for d in args.runs]
    comparisons = []
    base = reports[0]
    for other in reports[1:]:
        if len(other["ood_accuracy"]["per_seed"]) == len(base["ood_accuracy"]["per_seed"]):
            comparisons.append(compare_runs(other, base))
    manifest = render_report(args.runs, args.out, comparisons=comparisons)
    print(json.dumps(manifest))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="daftlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, out=True, config=True, checkpoint=False):
        if config:
            p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--seed", type=int, default=0)
        if out:
            p.add_argument("--out", required=True)
        if data:
            p.add_argument("--data", required=True, help="dataset file")
        if checkpoint:
            p.add_argument("--checkpoint", default=None)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--kind", choices=["colored", "suite", "two-feature"], default="colored")
    p.add_argument("--mode", choices=["train", "test"], default="train")
    p.add_argument("--n-per-class", type=int, default=1000)
    p.add_argument("--image-size", type=int, default=28)
    p.add_argument("--spurious-strength", type=float, default=0.9)
    common(p, data=False, config=False)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--algo", choices=["erm", "at", "trades", "af", "af-smooth"],
                   required=True)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="distill a student from a teacher")
    p.add_argument("--mode", choices=["single", "multi", "plain"], required=True)
    common(p, checkpoint=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("daft", help="full pipeline: standard training, "
                       "adversarial head fine-tuning, multi-teacher distillation")
    common(p)
    p.set_defaults(func=cmd_daft)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train80", "eval20", "all"], default="eval20")
    common(p, out=False, config=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="diagnostic probes")
    p.add_argument("--probe", choices=["features", "rap", "logits", "ttest"],
                   required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--checkpoint-b", default=None, help="second model for logits probe")
    p.add_argument("--runs", nargs=2, default=None, help="two run dirs for ttest probe")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("search", help="hyperparameter search + selection protocol")
    p.add_argument("--algo", choices=list(ALGORITHMS), required=True)
    p.add_argument("--select", choices=["lodo", "oracle"], default="lodo")
    p.add_argument("--full-protocol", action="store_true",
                   help="full-size search: 32 configs instead of the desk-scale default")
    common(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("report", help="merge run dirs into CSV + figures")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def _validate(args) -> None:
    if getattr(args, "command", None) == "analyze":
        if args.probe == "ttest":
            if not args.runs:
                raise UsageError("--probe ttest requires --runs A B")
        elif args.checkpoint is None or args.data is None:
            raise UsageError(f"--probe {args.probe} requires --checkpoint and --data")
        if args.probe == "logits" and args.checkpoint_b is None:
            raise UsageError("--probe logits requires --checkpoint-b")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _validate(args)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, CheckpointError, FileNotFoundError, IsADirectoryError,
            json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericsError, TrainingDivergedError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
