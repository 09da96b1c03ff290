"""Training losses: standard CE, adversarial CE, logit-smoothness KL,
their weighted fine-tuning sum, and the temperature-softened distillation KL.

Conventions: all losses are means over the batch. The smoothness KL compares
softmax distributions at temperature 1. The distillation KL is scaled by
tau^2 so its gradient magnitude stays comparable across temperatures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adversary import PerturbConfig, frozen_params, perturb_point
from .tensor import Tensor, log_softmax, mul, scale, tsum


@dataclass
class DistillConfig:
    temperature: float = 4.0
    smooth_weight: float = 1e-3

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.smooth_weight < 0:
            raise ValueError(f"smooth_weight must be >= 0, got {self.smooth_weight}")


def softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)


def validate_soft_label(probs: np.ndarray, tol: float = 1e-5) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float32)
    if probs.ndim != 2:
        raise ValueError(f"soft labels must be (batch, classes), got {probs.shape}")
    if np.any(probs < 0):
        raise ValueError("soft labels must be non-negative")
    sums = probs.sum(axis=1, dtype=np.float64)
    if np.any(np.abs(sums - 1.0) > tol):
        raise ValueError("soft label rows must sum to 1")
    return probs


def _onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    eye = np.zeros((len(labels), num_classes), dtype=np.float32)
    eye[np.arange(len(labels)), labels] = 1.0
    return eye


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[y]."""
    onehot = Tensor(_onehot(labels, logits.shape[1]))
    picked = tsum(mul(log_softmax(logits), onehot))
    return scale(picked, -1.0 / logits.shape[0])


def kl_div(p: np.ndarray, q) -> float | Tensor:
    """Mean over rows of KL(p || q) for probability rows p, q.

    ``q`` may be a plain array (returns a float) or a Tensor of probabilities
    (returns a differentiable scalar). 0 * log(0/q) is treated as 0; q_i = 0
    where p_i > 0 is an error.
    """
    p = validate_soft_label(p)
    qdata = q.data if isinstance(q, Tensor) else np.asarray(q, dtype=np.float32)
    validate_soft_label(qdata)
    if np.any((qdata <= 0) & (p > 0)):
        raise ValueError("kl_div: q has zero mass where p > 0")
    mask = p > 0
    plogp = float(np.sum(np.where(mask, p * np.log(np.where(mask, p, 1.0)), 0.0),
                         dtype=np.float64)) / p.shape[0]
    if isinstance(q, Tensor):
        from .tensor import add, log as tlog
        # where p == 0 the term is defined as 0: splice 1.0 into q there so
        # log stays finite (the gradient contribution is 0 either way)
        maskf = mask.astype(np.float32)
        q_safe = add(mul(q, Tensor(maskf)), Tensor(1.0 - maskf))
        cross = scale(tsum(mul(Tensor(p), tlog(q_safe))), 1.0 / p.shape[0])
        return _add_const(scale(cross, -1.0), plogp)
    plogq = float(np.sum(np.where(mask, p * np.log(np.where(qdata > 0, qdata, 1.0)), 0.0),
                         dtype=np.float64)) / p.shape[0]
    return plogp - plogq


def _add_const(t: Tensor, c: float) -> Tensor:
    from .tensor import add
    return add(t, Tensor(np.float32(c)))


def kl_from_logits(p: np.ndarray, q_logits: Tensor) -> Tensor:
    """Mean over rows of KL(p || softmax(q_logits)), p held constant.

    Computed through log_softmax for stability; this is the differentiable
    route used inside the smoothness and distillation losses.
    """
    p = validate_soft_label(p)
    if p.shape != q_logits.shape:
        raise ValueError(f"kl_from_logits: shapes {p.shape} vs {q_logits.shape}")
    mask = p > 0
    plogp = float(np.sum(np.where(mask, p * np.log(np.where(mask, p, 1.0)), 0.0),
                         dtype=np.float64)) / p.shape[0]
    cross = scale(tsum(mul(Tensor(p), log_softmax(q_logits))), -1.0 / p.shape[0])
    return _add_const(cross, plogp)


# ---------------------------------------------------------------------------
# the four training losses


def loss_std(model, x: np.ndarray, y: np.ndarray) -> Tensor:
    """Clean cross-entropy; gradients flow to every trainable parameter."""
    return cross_entropy(model.logits(Tensor(x)), y)


def loss_adv(model, x: np.ndarray, y: np.ndarray, cfg: PerturbConfig,
             rng: np.random.Generator | None = None) -> Tensor:
    """Cross-entropy at the PGD-maximized point (perturbation held constant)."""
    adv = perturb_point(model, x, y, "cross_entropy", cfg, rng=rng)
    if cfg.space == "input":
        return cross_entropy(model.logits(Tensor(adv)), y)
    return cross_entropy(model.logits_from_features(Tensor(adv)), y)


def loss_smooth(model, x: np.ndarray, y: np.ndarray | None, cfg: PerturbConfig,
                rng: np.random.Generator | None = None) -> Tensor:
    """Worst-case KL between clean softmax and softmax inside the ball."""
    with frozen_params(model):
        if cfg.space == "input":
            clean_logits = model.logits(Tensor(np.asarray(x, dtype=np.float32))).data
        else:
            feats = model.features(Tensor(np.asarray(x, dtype=np.float32))).data
            clean_logits = model.logits_from_features(Tensor(feats)).data
    clean_probs = softmax_np(clean_logits)
    adv = perturb_point(model, x, y, "kl_to_clean", cfg, rng=rng)
    if cfg.space == "input":
        adv_logits = model.logits(Tensor(adv))
    else:
        adv_logits = model.logits_from_features(Tensor(adv))
    return kl_from_logits(clean_probs, adv_logits)


def finetune_loss(model, x: np.ndarray, y: np.ndarray, cfg: PerturbConfig, alpha: float,
                  rng: np.random.Generator | None = None,
                  share_adv_point: bool = False) -> Tensor:
    """Adversarial CE plus alpha times the smoothness KL.

    By default the two terms run independent inner maximizations; with
    ``share_adv_point`` the CE-adversarial point is reused for the KL term
    (an approximation, not the definition).
    """
    from .tensor import add
    adv_term = loss_adv(model, x, y, cfg, rng=rng)
    if alpha == 0.0:
        return adv_term
    if share_adv_point:
        adv = perturb_point(model, x, y, "cross_entropy", cfg, rng=rng)
        with frozen_params(model):
            if cfg.space == "input":
                clean = model.logits(Tensor(np.asarray(x, dtype=np.float32))).data
            else:
                f = model.features(Tensor(np.asarray(x, dtype=np.float32))).data
                clean = model.logits_from_features(Tensor(f)).data
        route = model.logits if cfg.space == "input" else model.logits_from_features
        smooth_term = kl_from_logits(softmax_np(clean), route(Tensor(adv)))
    else:
        smooth_term = loss_smooth(model, x, y, cfg, rng=rng)
    return add(adv_term, scale(smooth_term, alpha))


def loss_distill(student, x: np.ndarray, teacher_soft: np.ndarray, tau: float) -> Tensor:
    """tau^2-scaled KL(teacher || student at temperature tau)."""
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    teacher_soft = validate_soft_label(teacher_soft)
    logits = student.logits(Tensor(np.asarray(x, dtype=np.float32)))
    return scale(kl_from_logits(teacher_soft, scale(logits, 1.0 / tau)), tau * tau)
