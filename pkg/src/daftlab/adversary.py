"""l2-ball projected gradient ascent, in input space or feature space.

Each ascent step moves along the per-example normalized gradient by
``step_size`` and then projects the accumulated perturbation back onto the
epsilon-ball (exact l2 projection: rescale when the norm exceeds epsilon).
The ball is per example, over that example's flattened tensor.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, NumericsError, backward

_EPS = 1e-12


@dataclass
class PerturbConfig:
    epsilon: float
    steps: int = 5
    step_size: float = 0.1
    space: str = "input"           # "input" | "feature"
    init: str = "zero"             # "zero" | "random_in_ball"
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.space not in ("input", "feature"):
            raise ValueError(f"space must be 'input' or 'feature', got {self.space!r}")
        if self.init not in ("zero", "random_in_ball"):
            raise ValueError(f"init must be 'zero' or 'random_in_ball', got {self.init!r}")


def _flat(delta: np.ndarray, batched: bool) -> np.ndarray:
    return delta.reshape(delta.shape[0], -1) if batched else delta.reshape(1, -1)


def _project(delta: np.ndarray, epsilon: float, batched: bool) -> np.ndarray:
    flat = _flat(delta, batched)
    norms = np.linalg.norm(flat.astype(np.float64), axis=1)
    scale = np.minimum(1.0, epsilon / np.maximum(norms, _EPS))
    return (flat * scale[:, None].astype(np.float32)).reshape(delta.shape)


def _random_in_ball(shape, epsilon: float, batched: bool, rng: np.random.Generator) -> np.ndarray:
    delta = rng.standard_normal(shape).astype(np.float32)
    flat = _flat(delta, batched)
    d = flat.shape[1]
    norms = np.maximum(np.linalg.norm(flat, axis=1), _EPS)
    radii = epsilon * rng.uniform(size=flat.shape[0]) ** (1.0 / d)
    return (flat * (radii / norms)[:, None].astype(np.float32)).reshape(shape)


def pgd_maximize(objective, x0: np.ndarray, cfg: PerturbConfig,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Maximize ``objective`` over the epsilon-ball around ``x0``.

    ``objective`` maps a requires_grad Tensor (same shape as x0) to a scalar
    Tensor. Axis 0 of a multi-dimensional x0 is the batch axis; the ball
    constraint holds per example.
    """
    x0 = np.asarray(x0, dtype=np.float32)
    batched = x0.ndim > 1
    if cfg.epsilon == 0.0:
        return x0.copy()
    if cfg.init == "random_in_ball":
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        delta = _random_in_ball(x0.shape, cfg.epsilon, batched, rng)
    else:
        delta = np.zeros_like(x0)

    for _ in range(cfg.steps):
        xt = Tensor(x0 + delta, requires_grad=True)
        loss = objective(xt)
        grads = backward(loss)
        g = grads.get(xt)
        if g is None:
            g = np.zeros_like(x0)
        if not np.all(np.isfinite(g)):
            raise NumericsError("pgd_maximize: non-finite gradient during ascent")
        gflat = _flat(g, batched)
        gnorm = np.maximum(np.linalg.norm(gflat.astype(np.float64), axis=1), _EPS)
        step = (gflat / gnorm[:, None]).astype(np.float32) * np.float32(cfg.step_size)
        delta = delta + step.reshape(x0.shape)
        delta = _project(delta, cfg.epsilon, batched)
    return x0 + delta


@contextmanager
def frozen_params(model):
    """Temporarily clear requires_grad on all model parameters.

    PGD only needs gradients w.r.t. the perturbed point; skipping parameter
    gradients keeps the inner loop cheap and guarantees no parameter state
    is touched.
    """
    flags = {k: t.requires_grad for k, t in model.params.items()}
    try:
        model.set_trainable(False)
        yield
    finally:
        for k, t in model.params.items():
            t.requires_grad = flags[k]


def perturb_point(model, x: np.ndarray, y: np.ndarray | None, loss_kind: str,
                  cfg: PerturbConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Find the worst-case point for a batch under the configured attack.

    loss_kind "cross_entropy" maximizes CE against labels ``y``; "kl_to_clean"
    maximizes KL(clean softmax || perturbed softmax), with the clean logits
    computed once and held fixed. With space="input" the returned array is a
    perturbed input batch; with space="feature" it is a perturbed feature
    batch (the extractor output is perturbed directly, objective through the
    head only).

    The KL objective is stationary at the clean point (its gradient there is
    exactly zero), so a zero init would leave gradient ascent stuck; for
    "kl_to_clean" a zero init is promoted to random_in_ball.
    """
    from dataclasses import replace as _replace
    from .losses import cross_entropy, kl_from_logits, softmax_np  # cycle-free at call time

    if loss_kind not in ("cross_entropy", "kl_to_clean"):
        raise ValueError(f"unknown loss_kind {loss_kind!r}")
    if loss_kind == "kl_to_clean" and cfg.init == "zero":
        cfg = _replace(cfg, init="random_in_ball")

    with frozen_params(model):
        if cfg.space == "input":
            base = np.asarray(x, dtype=np.float32)
            logits_of = model.logits
        else:
            base = model.features(Tensor(np.asarray(x, dtype=np.float32))).data
            logits_of = model.logits_from_features

        if loss_kind == "cross_entropy":
            if y is None:
                raise ValueError("cross_entropy attack requires labels")
            objective = lambda t: cross_entropy(logits_of(t), y)
        else:
            clean_probs = softmax_np(logits_of(Tensor(base)).data)
            objective = lambda t: kl_from_logits(clean_probs, logits_of(t))

        return pgd_maximize(objective, base, cfg, rng=rng)
