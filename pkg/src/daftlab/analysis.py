"""Diagnostics: accuracy, feature/attribute correlation probes, relative
average perturbation (RAP), Spearman rank correlation, prec@k, paired t-tests.

The t-distribution CDF is computed through the regularized incomplete beta
function (continued fraction, absolute error well below 1e-6), so the module
has no statistics dependencies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .adversary import PerturbConfig, perturb_point


# ---------------------------------------------------------------------------
# accuracy


def accuracy(model, x: np.ndarray, y: np.ndarray) -> float:
    preds = model.logits_np(np.asarray(x, dtype=np.float32)).argmax(axis=1)
    return float(np.mean(preds == np.asarray(y)))


def accuracy_on(model, ds) -> float:
    return accuracy(model, ds.images, ds.labels)


# ---------------------------------------------------------------------------
# correlation probes


def pearson(u: np.ndarray, v: np.ndarray) -> tuple[float, bool]:
    """Pearson r; a zero-variance series yields (0.0, degenerate=True)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"pearson: need equal-length 1-D series, got {u.shape}, {v.shape}")
    du = u - u.mean()
    dv = v - v.mean()
    su = np.sqrt(np.sum(du * du))
    sv = np.sqrt(np.sum(dv * dv))
    if su == 0.0 or sv == 0.0:
        return 0.0, True
    return float(np.sum(du * dv) / (su * sv)), False


@dataclass
class FeatureProbe:
    """Per-feature correlations with named attribute series."""

    correlations: dict[str, np.ndarray]      # attr name -> (F,) Pearson r
    degenerate: np.ndarray                   # (F,) zero-variance feature flag
    shape_attr: str = "shape"
    color_attr: str = "color"

    def dominance(self) -> np.ndarray:
        """True where |r_shape| > |r_color| (shape-dominant feature)."""
        rs = np.abs(self.correlations[self.shape_attr])
        rc = np.abs(self.correlations[self.color_attr])
        return rs > rc

    def shape_dominant_count(self, threshold: float = 0.7) -> int:
        rs = np.abs(self.correlations[self.shape_attr])
        return int(np.sum(self.dominance() & (rs >= threshold)))


def feature_correlations(model, x: np.ndarray, attributes: dict[str, np.ndarray]) -> FeatureProbe:
    """Correlate each penultimate feature with each attribute series."""
    feats = model.features_np(np.asarray(x, dtype=np.float32))
    n_feat = feats.shape[1]
    correlations = {}
    degenerate = np.zeros(n_feat, dtype=bool)
    for name, series in attributes.items():
        series = np.asarray(series, dtype=np.float64)
        if len(series) != len(feats):
            raise ValueError(f"attribute '{name}' length {len(series)} != {len(feats)} examples")
        rs = np.empty(n_feat)
        for i in range(n_feat):
            r, degen = pearson(feats[:, i], series)
            rs[i] = r
            degenerate[i] |= degen
        correlations[name] = rs
    return FeatureProbe(correlations=correlations, degenerate=degenerate)


# ---------------------------------------------------------------------------
# relative average perturbation


@dataclass
class RapResult:
    values: np.ndarray           # (F,) mean relative perturbation per feature
    excluded: np.ndarray         # (F,) examples dropped for |f_i(x)| < threshold


def rap(model, x: np.ndarray, y: np.ndarray, cfg: PerturbConfig,
        denom_threshold: float = 1e-8, batch: int = 256) -> RapResult:
    """E[|f_i(perturbed) - f_i(x)| / |f_i(x)|] per feature.

    The perturbation is the cross-entropy PGD attack under ``cfg``;
    cfg.space selects RAP-input (perturb the image, re-extract features)
    versus RAP-feature (perturb the feature vector directly).
    """
    x = np.asarray(x, dtype=np.float32)
    clean = model.features_np(x)
    n_feat = clean.shape[1]
    ratio_sum = np.zeros(n_feat, dtype=np.float64)
    counted = np.zeros(n_feat, dtype=np.int64)
    excluded = np.zeros(n_feat, dtype=np.int64)
    for i in range(0, len(x), batch):
        bx, by = x[i : i + batch], np.asarray(y)[i : i + batch]
        adv = perturb_point(model, bx, by, "cross_entropy", cfg)
        if cfg.space == "input":
            pert = model.features_np(adv)
        else:
            pert = adv
        c = clean[i : i + batch]
        ok = np.abs(c) >= denom_threshold
        diff = np.abs(pert - c)
        ratio_sum += np.where(ok, diff / np.where(ok, np.abs(c), 1.0), 0.0).sum(axis=0)
        counted += ok.sum(axis=0)
        excluded += (~ok).sum(axis=0)
    values = np.where(counted > 0, ratio_sum / np.maximum(counted, 1), 0.0)
    return RapResult(values=values, excluded=excluded)


# ---------------------------------------------------------------------------
# rank statistics


def _ranks(u: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing the mean rank."""
    u = np.asarray(u, dtype=np.float64)
    order = np.argsort(u, kind="stable")
    ranks = np.empty(len(u))
    i = 0
    while i < len(u):
        j = i
        while j + 1 < len(u) and u[order[j + 1]] == u[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(u: np.ndarray, v: np.ndarray) -> tuple[float, bool]:
    """Pearson correlation of average ranks; constant series -> (0, True)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1 or len(u) < 2:
        raise ValueError("spearman: need two equal-length series of length >= 2")
    return pearson(_ranks(u), _ranks(v))


def prec_at_k(pred_a: np.ndarray, pred_b: np.ndarray, k: int) -> float:
    """Mean per-example overlap of the two models' top-k classes.

    Ties within a logit row are broken toward the lower class index.
    """
    pred_a = np.asarray(pred_a)
    pred_b = np.asarray(pred_b)
    if pred_a.shape != pred_b.shape or pred_a.ndim != 2:
        raise ValueError("prec_at_k: logit arrays must have identical (N, C) shapes")
    n_classes = pred_a.shape[1]
    if not (1 <= k <= n_classes):
        raise ValueError(f"k must lie in [1, {n_classes}], got {k}")
    top_a = np.argsort(-pred_a, axis=1, kind="stable")[:, :k]
    top_b = np.argsort(-pred_b, axis=1, kind="stable")[:, :k]
    overlaps = [len(set(a) & set(b)) / k for a, b in zip(top_a, top_b)]
    return float(np.mean(overlaps))


# ---------------------------------------------------------------------------
# paired t-test via regularized incomplete beta


def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 3e-14) -> float:
    """Continued fraction for the incomplete beta function (Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not (0.0 <= x <= 1.0):
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    front = math.exp(
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log(1.0 - x)
    )
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, dof: int) -> float:
    """Two-sided p-value for a t statistic with ``dof`` degrees of freedom."""
    if dof < 1:
        raise ValueError(f"dof must be >= 1, got {dof}")
    t = float(t)
    if math.isinf(t):
        return 0.0
    return betainc_reg(dof / 2.0, 0.5, dof / (dof + t * t))


@dataclass
class TTestResult:
    t: float
    p: float
    dof: int
    degenerate: bool = False


def paired_ttest(a, b) -> TTestResult:
    """Two-sided paired t-test over per-seed metrics paired by position."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("paired_ttest: need two equal-length series of length >= 2")
    diffs = a - b
    n = len(diffs)
    mean = diffs.mean()
    sd = diffs.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(t=0.0, p=1.0, dof=n - 1, degenerate=True)
        return TTestResult(t=math.copysign(math.inf, mean), p=0.0, dof=n - 1, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t=float(t), p=student_t_two_sided_p(t, n - 1), dof=n - 1)


# ---------------------------------------------------------------------------
# run metrics record


@dataclass
class MetricsRecord:
    run_id: str
    pipeline: str
    seed: int
    config_hash: str
    id_accuracy: dict[str, float] = field(default_factory=dict)   # per-domain
    ood_accuracy: float | None = None
    losses: list[float] = field(default_factory=list)
    wall_clock: float = 0.0

    def __post_init__(self):
        for k, v in self.id_accuracy.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"accuracy out of range for domain {k}: {v}")
        if self.ood_accuracy is not None and not 0.0 <= self.ood_accuracy <= 1.0:
            raise ValueError(f"accuracy out of range: {self.ood_accuracy}")
