"""End-to-end training procedures.

ERM, full-network adversarial training (AT), TRADES, adversarial fine-tuning
of the head (AF, optionally with the smoothness KL), vanilla distillation,
and the two distillation modes of the full recipe: "single" (adversarial
teacher everywhere) and "multi" (per example, adversarial teacher when it
predicts correctly, standard teacher otherwise).

Every pipeline is a pure function of (config, seed, data): batches are drawn
from a generator seeded by the config, and any stochastic attack init gets a
per-step derived seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .adversary import PerturbConfig
from .data import splitmix64
from .losses import (
    DistillConfig,
    cross_entropy,
    finetune_loss,
    loss_adv,
    loss_distill,
    loss_smooth,
    loss_std,
    softmax_np,
)
from .nn import Adam, Model, build_model
from .tensor import Tensor, add, backward, scale


class TrainingDivergedError(ArithmeticError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss at step {step} (value {value})")
        self.step = step


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 64
    steps: int = 2000
    seed: int = 0
    perturb: PerturbConfig | None = None
    distill: DistillConfig | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not (0 < self.lr):
            raise ValueError(f"lr must be positive, got {self.lr}")


@dataclass
class TeacherBundle:
    """Shared standard-trained extractor with both heads over it."""

    model: Model                 # standard extractor + standard head
    adv_w: np.ndarray            # adversarially fine-tuned head weight
    adv_b: np.ndarray
    tau: float = 4.0

    def __post_init__(self):
        if self.adv_w.shape != self.model.params["head.w"].shape:
            raise ValueError("adv head shape does not match standard head")

    def head_logits(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        std_w = self.model.params["head.w"].data
        std_b = self.model.params["head.b"].data
        return features @ std_w + std_b, features @ self.adv_w + self.adv_b


def _run_loop(model: Model, params: dict, loss_fn, x: np.ndarray, y: np.ndarray,
              cfg: TrainConfig) -> list[float]:
    """Shared minibatch loop: sample, evaluate loss, backward, Adam step."""
    if len(x) == 0:
        raise ValueError("training data is empty")
    opt = Adam(params, cfg.lr)
    batch_rng = np.random.default_rng(cfg.seed)
    trace: list[float] = []
    bsz = min(cfg.batch_size, len(x))
    for step in range(cfg.steps):
        idx = batch_rng.integers(0, len(x), size=bsz)
        step_rng = np.random.default_rng(splitmix64(cfg.seed, step))
        loss = loss_fn(x[idx], y[idx], step_rng)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError(step, value)
        grads_by_tensor = backward(loss)
        grads = {name: grads_by_tensor.get(t) for name, t in params.items()}
        opt.step(grads)
        trace.append(value)
    return trace


def train_erm(model: Model, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
              head_only: bool = False) -> list[float]:
    params = model.head_params() if head_only else model.params
    if head_only:
        model.set_extractor_trainable(False)
    try:
        return _run_loop(model, params,
                         lambda bx, by, rng: loss_std(model, bx, by), x, y, cfg)
    finally:
        if head_only:
            model.set_extractor_trainable(True)


def train_at(model: Model, x: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> list[float]:
    """Full-network adversarial training on the worst-case cross-entropy."""
    pc = cfg.perturb if cfg.perturb is not None else PerturbConfig(epsilon=0.0)
    return _run_loop(model, model.params,
                     lambda bx, by, rng: loss_adv(model, bx, by, pc, rng=rng),
                     x, y, cfg)


def train_trades(model: Model, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
                 alpha: float) -> list[float]:
    """Clean cross-entropy plus alpha times the worst-case smoothness KL,
    over all parameters."""
    pc = cfg.perturb if cfg.perturb is not None else PerturbConfig(epsilon=0.0)

    def loss_fn(bx, by, rng):
        if alpha == 0.0:
            return loss_std(model, bx, by)
        return add(loss_std(model, bx, by),
                   scale(loss_smooth(model, bx, by, pc, rng=rng), alpha))

    return _run_loop(model, model.params, loss_fn, x, y, cfg)


def adversarial_finetune(model: Model, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
                         alpha: float = 0.0, share_adv_point: bool = False) -> list[float]:
    """Optimize only the head on the adversarial + smoothness objective.

    The extractor is frozen for the duration; its tensors are never touched.
    """
    pc = cfg.perturb if cfg.perturb is not None else PerturbConfig(epsilon=0.0)
    model.set_extractor_trainable(False)
    try:
        return _run_loop(
            model, model.head_params(),
            lambda bx, by, rng: finetune_loss(model, bx, by, pc, alpha, rng=rng,
                                              share_adv_point=share_adv_point),
            x, y, cfg)
    finally:
        model.set_extractor_trainable(True)


def make_teacher_bundle(erm_model: Model, x: np.ndarray, y: np.ndarray,
                        finetune_cfg: TrainConfig, alpha: float, tau: float) -> TeacherBundle:
    """Adversarially fine-tune a copy of the head and package both heads."""
    af_model = erm_model.copy()
    adversarial_finetune(af_model, x, y, finetune_cfg, alpha=alpha)
    return TeacherBundle(model=erm_model, adv_w=af_model.params["head.w"].data.copy(),
                         adv_b=af_model.params["head.b"].data.copy(), tau=tau)


def af_model_from_bundle(bundle: TeacherBundle) -> Model:
    """The adversarially fine-tuned teacher as a standalone model."""
    m = bundle.model.copy()
    m.params["head.w"].data[...] = bundle.adv_w
    m.params["head.b"].data[...] = bundle.adv_b
    return m


def teacher_soft_labels(bundle: TeacherBundle, x: np.ndarray, y: np.ndarray,
                        mode: str) -> np.ndarray:
    """Per-example temperature-softened teacher targets.

    mode "single": adversarial head everywhere. mode "multi": adversarial
    head where its temperature-1 argmax equals the label, standard head
    otherwise. mode "plain": standard head everywhere (vanilla distillation).
    """
    if mode not in ("single", "multi", "plain"):
        raise ValueError(f"unknown distillation mode {mode!r}")
    feats = bundle.model.features_np(np.asarray(x, dtype=np.float32))
    std_logits, adv_logits = bundle.head_logits(feats)
    if mode == "plain":
        return softmax_np(std_logits / bundle.tau)
    soft_adv = softmax_np(adv_logits / bundle.tau)
    if mode == "single":
        return soft_adv
    correct = adv_logits.argmax(axis=1) == np.asarray(y)
    soft_std = softmax_np(std_logits / bundle.tau)
    return np.where(correct[:, None], soft_adv, soft_std)


def distill(student: Model, x: np.ndarray, y: np.ndarray, bundle: TeacherBundle,
            mode: str, cfg: TrainConfig) -> list[float]:
    """Train the student on the softened teacher targets."""
    tau = bundle.tau

    def loss_fn(bx, by, rng):
        targets = teacher_soft_labels(bundle, bx, by, mode)
        return loss_distill(student, bx, targets, tau)

    return _run_loop(student, student.params, loss_fn, x, y, cfg)


# ---------------------------------------------------------------------------
# one-shot full pipeline


@dataclass
class DaftResult:
    teacher: Model
    bundle: TeacherBundle
    student: Model
    traces: dict[str, list[float]]


def run_daft(teacher_arch: dict, student_arch: dict, x: np.ndarray, y: np.ndarray,
             train_cfg: TrainConfig, finetune_cfg: TrainConfig, distill_cfg: TrainConfig,
             alpha: float, tau: float, mode: str = "multi",
             teacher_seed: int | None = None, student_seed: int | None = None) -> DaftResult:
    """Standard teacher training, head fine-tuning, then distillation.

    Exactly the composition train_erm -> adversarial_finetune -> distill;
    stage seeds come from the three configs, model init seeds default to
    values derived from the training config seed.
    """
    teacher_seed = train_cfg.seed if teacher_seed is None else teacher_seed
    student_seed = (train_cfg.seed + 1) if student_seed is None else student_seed
    teacher = build_model(teacher_arch, seed=teacher_seed)
    erm_trace = train_erm(teacher, x, y, train_cfg)
    bundle = make_teacher_bundle(teacher, x, y, finetune_cfg, alpha=alpha, tau=tau)
    student = build_model(student_arch, seed=student_seed)
    distill_trace = distill(student, x, y, bundle, mode, distill_cfg)
    return DaftResult(teacher=teacher, bundle=bundle, student=student,
                      traces={"erm": erm_trace, "distill": distill_trace})
