"""Experiment harness: random hyperparameter search, leave-one-domain-out and
oracle model selection, and persisted multi-seed runs.

The selection protocol follows the domain-generalization recipe: every domain
is split 80/20; hyperparameters are scored by training with one selection
domain left out at a time and averaging accuracy on the left-out domains'
20% splits; the winning config is then retrained across seeds and evaluated
on the true holdout domain's 80% split, which selection never touches.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .adversary import PerturbConfig
from .analysis import accuracy, paired_ttest
from .data import SPLIT_EVAL20, SPLIT_TRAIN80, DomainDataset
from .nn import build_model, save_checkpoint
from .pipelines import (
    TrainConfig,
    adversarial_finetune,
    run_daft,
    train_at,
    train_erm,
    train_trades,
)

ALGORITHMS = ("erm", "at", "trades", "af", "af-smooth", "distill", "daft-single", "daft")

_RANGE_KINDS = ("log_uniform_real", "uniform_real", "integer_range")


@dataclass
class HyperRange:
    name: str
    kind: str
    low: float
    high: float

    def __post_init__(self):
        if self.kind not in _RANGE_KINDS:
            raise ValueError(f"unknown range kind {self.kind!r}")
        if not self.low <= self.high:
            raise ValueError(f"{self.name}: bounds out of order ({self.low} > {self.high})")
        if self.kind == "log_uniform_real" and self.low <= 0:
            raise ValueError(f"{self.name}: log-uniform needs positive bounds")

    def sample(self, rng: np.random.Generator):
        if self.kind == "integer_range":
            return int(rng.integers(int(self.low), int(self.high) + 1))
        if self.kind == "log_uniform_real":
            return float(np.exp(rng.uniform(np.log(self.low), np.log(self.high))))
        return float(rng.uniform(self.low, self.high))


def real_range(name: str, low: float, high: float) -> HyperRange:
    """Real-valued range; log-uniform when the span covers >= 2 decades."""
    if low > 0 and math.log10(high / low) >= 2.0:
        return HyperRange(name, "log_uniform_real", low, high)
    return HyperRange(name, "uniform_real", low, high)


DEFAULT_RANGES = (
    real_range("lr", 1e-6, 1e-3),
    real_range("epsilon", 0.05, 0.5),
    HyperRange("attack_steps", "integer_range", 3, 7),
    real_range("attack_lr", 1e-3, 1e-1),
    HyperRange("tau", "integer_range", 2, 8),
    real_range("alpha", 1e-6, 1e-2),
)


def sample_configs(ranges, n: int, seed: int) -> list[dict]:
    """n independent hyperparameter draws, reproducible from the seed."""
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    rng = np.random.default_rng(seed)
    return [{r.name: r.sample(rng) for r in ranges} for _ in range(n)]


# ---------------------------------------------------------------------------
# experiment plan


@dataclass
class ExperimentPlan:
    algorithm: str
    dataset: DomainDataset
    domains: list[int] = field(default_factory=list)     # selection domains
    holdout_domain: int | None = None                    # OOD target domain
    n_configs: int = 8                                   # 32 under --full-protocol
    n_seeds: int = 5
    selection: str = "leave_one_domain_out"
    seed: int = 0
    arch: dict = field(default_factory=lambda: {
        "kind": "smallcnn", "input_shape": [3, 28, 28],
        "feature_dim": 32, "num_classes": 2})
    student_arch: dict | None = None
    steps: int = 500
    finetune_steps: int = 300
    distill_steps: int = 500
    batch_size: int = 64
    ranges: tuple = DEFAULT_RANGES

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r} (have {ALGORITHMS})")
        if self.selection not in ("leave_one_domain_out", "oracle"):
            raise ValueError(f"unknown selection {self.selection!r}")
        if self.n_configs < 1:
            raise ValueError("n_configs must be >= 1")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        all_domains = self.dataset.domains
        if self.holdout_domain is None:
            self.holdout_domain = all_domains[-1]
        if not self.domains:
            self.domains = [d for d in all_domains if d != self.holdout_domain]
        if self.selection == "leave_one_domain_out" and len(self.domains) < 2:
            raise ValueError("leave_one_domain_out needs >= 2 selection domains")


# ---------------------------------------------------------------------------
# pipeline dispatch


def train_pipeline(algorithm: str, arch: dict, x: np.ndarray, y: np.ndarray,
                   config: dict, seed: int, steps: int, finetune_steps: int,
                   distill_steps: int, batch_size: int = 64,
                   student_arch: dict | None = None):
    """Train one model with the named procedure and hyperparameter dict."""
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    lr = float(config.get("lr", 5e-4))
    pc = PerturbConfig(epsilon=float(config.get("epsilon", 0.2)),
                       steps=int(config.get("attack_steps", 5)),
                       step_size=float(config.get("attack_lr", 0.05)))
    alpha = float(config.get("alpha", 1e-3))
    tau = float(config.get("tau", 4))
    base = TrainConfig(lr=lr, batch_size=batch_size, steps=steps, seed=seed, perturb=pc)

    if algorithm in ("erm", "at", "trades", "af", "af-smooth"):
        model = build_model(arch, seed=seed)
        if algorithm == "erm":
            train_erm(model, x, y, base)
        elif algorithm == "at":
            train_at(model, x, y, base)
        elif algorithm == "trades":
            train_trades(model, x, y, base, alpha=alpha)
        else:
            train_erm(model, x, y, base)
            ft = TrainConfig(lr=lr, batch_size=batch_size, steps=finetune_steps,
                             seed=seed + 1, perturb=pc)
            adversarial_finetune(model, x, y, ft,
                                 alpha=alpha if algorithm == "af-smooth" else 0.0)
        return model

    mode = {"distill": "plain", "daft-single": "single", "daft": "multi"}[algorithm]
    ft_cfg = TrainConfig(lr=lr, batch_size=batch_size, steps=finetune_steps,
                         seed=seed + 1, perturb=pc)
    d_cfg = TrainConfig(lr=lr, batch_size=batch_size, steps=distill_steps, seed=seed + 2)
    result = run_daft(arch, student_arch or arch, x, y, base, ft_cfg, d_cfg,
                      alpha=alpha, tau=tau, mode=mode)
    return result.student


# ---------------------------------------------------------------------------
# selection protocols


def leave_one_domain_out_select(configs: list[dict], domains: list[int],
                                score_fn) -> tuple[int, list[dict]]:
    """Pick the config maximizing the mean left-out-domain score.

    ``score_fn(config, holdout_domain)`` returns that fold's validation
    accuracy; a raising fold marks the whole config failed and excluded.
    Ties break toward the lowest config index.
    """
    if not configs:
        raise ValueError("no configs to select from")
    if len(domains) < 2:
        raise ValueError("leave_one_domain_out needs >= 2 domains")
    table = []
    for i, config in enumerate(configs):
        row = {"index": i, "config": config, "scores": {}, "failed": False, "error": None}
        for d in domains:
            try:
                row["scores"][int(d)] = float(score_fn(config, d))
            except Exception as exc:  # noqa: BLE001 - any training failure disqualifies
                row["failed"] = True
                row["error"] = f"{type(exc).__name__}: {exc}"
                break
        if not row["failed"]:
            row["mean"] = float(np.mean(list(row["scores"].values())))
        table.append(row)
    viable = [row for row in table if not row["failed"]]
    if not viable:
        raise RuntimeError("every hyperparameter config failed during selection")
    best = max(viable, key=lambda row: (row["mean"], -row["index"]))
    return best["index"], table


def oracle_select(configs: list[dict], score_fn) -> tuple[int, list[dict]]:
    """Pick the config maximizing ``score_fn(config)`` on the target domain's
    validation split (the oracle strategy). Ties break toward the lowest index."""
    if not configs:
        raise ValueError("no configs to select from")
    table = []
    for i, config in enumerate(configs):
        row = {"index": i, "config": config, "failed": False, "error": None}
        try:
            row["mean"] = float(score_fn(config))
        except Exception as exc:  # noqa: BLE001
            row["failed"] = True
            row["error"] = f"{type(exc).__name__}: {exc}"
        table.append(row)
    viable = [row for row in table if not row["failed"]]
    if not viable:
        raise RuntimeError("every hyperparameter config failed during selection")
    best = max(viable, key=lambda row: (row["mean"], -row["index"]))
    return best["index"], table


# ---------------------------------------------------------------------------
# end-to-end experiment


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:12]


def _train_on(plan: ExperimentPlan, ds: DomainDataset, config: dict, seed: int,
              purpose: str):
    train = ds.take(domains=None, split=SPLIT_TRAIN80, purpose=purpose)
    return train_pipeline(plan.algorithm, plan.arch, train.images, train.labels,
                          config, seed=seed, steps=plan.steps,
                          finetune_steps=plan.finetune_steps,
                          distill_steps=plan.distill_steps,
                          batch_size=plan.batch_size,
                          student_arch=plan.student_arch)


def _default_score_fn(plan: ExperimentPlan):
    """Validation score for one (config, left-out selection domain) fold."""
    ds = plan.dataset

    def score(config, leave_out):
        fit_domains = [d for d in plan.domains if d != leave_out]
        sub = ds.take(domains=fit_domains, split=None, purpose="lodo.fit")
        model = _train_on(plan, sub, config, seed=plan.seed, purpose="lodo.fit")
        val = ds.take(domains=[leave_out], split=SPLIT_EVAL20, purpose="lodo.validate")
        return accuracy(model, val.images, val.labels)

    return score


def _default_oracle_score_fn(plan: ExperimentPlan):
    ds = plan.dataset

    def score(config):
        sub = ds.take(domains=plan.domains, split=None, purpose="oracle.fit")
        model = _train_on(plan, sub, config, seed=plan.seed, purpose="oracle.fit")
        val = ds.take(domains=[plan.holdout_domain], split=SPLIT_EVAL20,
                      purpose="oracle.validate")
        return accuracy(model, val.images, val.labels)

    return score


def _write_config_ini(path: str, plan: ExperimentPlan, config: dict) -> None:
    cp = configparser.ConfigParser()
    cp["plan"] = {
        "algorithm": plan.algorithm,
        "selection": plan.selection,
        "domains": ",".join(str(d) for d in plan.domains),
        "holdout_domain": str(plan.holdout_domain),
        "n_configs": str(plan.n_configs),
        "n_seeds": str(plan.n_seeds),
        "seed": str(plan.seed),
        "steps": str(plan.steps),
        "finetune_steps": str(plan.finetune_steps),
        "distill_steps": str(plan.distill_steps),
        "batch_size": str(plan.batch_size),
    }
    cp["hyperparameters"] = {k: repr(v) for k, v in config.items()}
    with open(path, "w") as fh:
        cp.write(fh)


def run_experiment(plan: ExperimentPlan, out_dir: str,
                   score_fn=None, oracle_score_fn=None,
                   save_models: bool = False) -> dict:
    """Search, select, retrain across seeds, evaluate, and persist.

    Final evaluation: ID accuracy on the selection domains' 20% splits and
    OOD accuracy on the holdout domain's 80% split. Returns the report dict
    (also written as JSON); the report contains no wall-clock values so a
    rerun of the same plan is byte-identical.
    """
    os.makedirs(out_dir, exist_ok=True)
    ds = plan.dataset
    configs = sample_configs(plan.ranges, plan.n_configs, plan.seed)

    if plan.selection == "leave_one_domain_out":
        fn = score_fn if score_fn is not None else _default_score_fn(plan)
        best_idx, table = leave_one_domain_out_select(configs, plan.domains, fn)
    else:
        fn = oracle_score_fn if oracle_score_fn is not None else _default_oracle_score_fn(plan)
        best_idx, table = oracle_select(configs, fn)
    best = configs[best_idx]

    run_id = f"{plan.algorithm}-{config_hash(best)}-s{plan.seed}"
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    records = []
    id_accs, ood_accs = [], []
    with open(metrics_path, "w") as metrics:
        def emit(stage, step, split, domain, metric, value):
            row = {"run_id": run_id, "stage": stage, "step": step, "split": split,
                   "domain": domain, "metric": metric, "value": value}
            metrics.write(json.dumps(row) + "\n")

        for row in table:
            if row["failed"]:
                emit("selection", row["index"], "validation", None, "failed", row["error"])
            else:
                emit("selection", row["index"], "validation", None, "mean_accuracy",
                     row["mean"])

        fit = ds.take(domains=plan.domains, split=None, purpose="final.fit")
        id_eval = ds.take(domains=plan.domains, split=SPLIT_EVAL20, purpose="final.id_eval")
        ood_eval = ds.take(domains=[plan.holdout_domain], split=SPLIT_TRAIN80,
                           purpose="final.ood_eval")
        for s in range(plan.n_seeds):
            seed = plan.seed + 1000 * (s + 1)
            model = _train_on(plan, fit, best, seed=seed, purpose="final.fit")
            id_acc = accuracy(model, id_eval.images, id_eval.labels)
            ood_acc = accuracy(model, ood_eval.images, ood_eval.labels)
            id_accs.append(id_acc)
            ood_accs.append(ood_acc)
            emit("final", s, "eval20", None, "id_accuracy", id_acc)
            emit("final", s, "train80", plan.holdout_domain, "ood_accuracy", ood_acc)
            if save_models:
                save_checkpoint(model, os.path.join(out_dir, f"model-seed{s}.ckpt"))

    report = {
        "run_id": run_id,
        "algorithm": plan.algorithm,
        "selection": plan.selection,
        "selected_index": best_idx,
        "selected_config": best,
        "n_seeds": plan.n_seeds,
        "id_accuracy": {"per_seed": id_accs, "mean": float(np.mean(id_accs)),
                        "std": float(np.std(id_accs))},
        "ood_accuracy": {"per_seed": ood_accs, "mean": float(np.mean(ood_accs)),
                         "std": float(np.std(ood_accs))},
        "selection_table": [
            {k: v for k, v in row.items()} for row in table
        ],
    }
    _write_config_ini(os.path.join(out_dir, "config.ini"), plan, best)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report


def compare_runs(report_a: dict, report_b: dict, metric: str = "ood_accuracy") -> dict:
    """Paired t-test between two runs' per-seed metrics (paired by seed)."""
    a = report_a[metric]["per_seed"]
    b = report_b[metric]["per_seed"]
    res = paired_ttest(a, b)
    return {
        "a": report_a["algorithm"], "b": report_b["algorithm"], "metric": metric,
        "mean_a": float(np.mean(a)), "mean_b": float(np.mean(b)),
        "t": res.t, "p": res.p, "dof": res.dof, "degenerate": res.degenerate,
        "significant": bool(res.p < 0.05),
    }
