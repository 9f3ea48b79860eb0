"""Alternating distillation / codebook-quantization training.

A distillation phase (gamma = 1) trains the full-precision student against
the frozen teacher's latents and the labels. A quantization phase
(gamma = 0) runs the student on codebook-reconstructed weights and trains
only the centroids plus the tensors left at full precision. ``mct_train``
alternates the two for a number of cycles and finishes with one more
quantization phase.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import losses
from .autodiff import Tape, Tensor
from .corpus import Dataset, Split
from .errors import NumericalError
from .metrics import accuracy, macro_f1
from .models import (
    EncoderConfig,
    InitMode,
    ModelGraph,
    encode_batch,
    forward_features,
    head_logits,
    initialize,
    predict,
    rng_for,
)
from .quantizer import (
    LayerCodebook,
    QuantizedModel,
    QuantPolicy,
    apply_codebook_step,
    assign,
    centroid_gradient,
    quantize_model,
    reconstruct,
)

log = logging.getLogger(__name__)

NAN = float("nan")


@dataclass
class MctSchedule:
    cycles: int = 5
    distill_epochs: int = 5
    quant_epochs: int = 5
    final_quant_epochs: int = 5
    alpha: float = 0.5
    bits: int = 4
    lr_encoder: float = 1e-6
    lr_classifier: float = 1e-3
    lr_codebook: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 32
    seed: int = 0
    refit_codebooks: bool = True
    double_count_gt: bool = False
    kmeans_restarts: int = 3

    def __post_init__(self):
        if self.cycles < 1:
            raise ValueError("cycles must be >= 1")
        for name in ("distill_epochs", "quant_epochs", "final_quant_epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if not 1 <= self.bits <= 16:
            raise ValueError("bits must be in [1, 16]")

    def gamma_sequence(self) -> list[int]:
        one_cycle = [1] * self.distill_epochs + [0] * self.quant_epochs
        return one_cycle * self.cycles + [0] * self.final_quant_epochs


class Optimizer:
    """Turns gradients into update directions; Adam keeps per-key moment estimates."""

    def __init__(self, kind: str = "adam", beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.kind = kind
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def direction(self, key: str, grad: np.ndarray) -> np.ndarray:
        if self.kind == "sgd":
            return grad
        dt = grad.dtype
        t = self._t.get(key, 0) + 1
        m = self.beta1 * self._m.get(key, 0.0) + (1 - self.beta1) * grad
        v = self.beta2 * self._v.get(key, 0.0) + (1 - self.beta2) * grad * grad
        self._t[key], self._m[key], self._v[key] = t, m, v
        m_hat = m / (1 - self.beta1**t)
        v_hat = v / (1 - self.beta2**t)
        return (m_hat / (np.sqrt(v_hat) + self.eps)).astype(dt, copy=False)

    def step(self, key: str, param: Tensor, lr: float) -> None:
        if param.grad is None:
            return
        d = self.direction(key, param.grad)
        param.data = (param.data - param.dtype.type(lr) * d).astype(param.dtype, copy=False)


@dataclass
class HistoryRow:
    cycle: int
    phase: str
    epoch: int
    gamma: int
    l1: float
    l_gt: float
    l_dis: float
    l_centroid: float
    l_quant: float
    total: float
    acc: float
    f1: float
    alpha: float = 0.5

    def breakdown(self) -> losses.LossBreakdown:
        return losses.LossBreakdown(
            self.l1, self.l_gt, self.l_dis, self.l_centroid, self.l_quant, self.total, self.alpha, self.gamma
        )

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    student: ModelGraph
    quantized: QuantizedModel | None = None
    phase: str = "distill"
    cycle_index: int = 0
    history: list[HistoryRow] = field(default_factory=list)
    epochs_run: int = 0

    def forward_weights(self) -> dict[str, Tensor] | None:
        """Weight overrides for the current phase (None means full precision)."""
        if self.phase == "distill" or self.quantized is None:
            return None
        return self.quantized.weights()


StepHook = Callable[[TrainState], None]


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = rng_for(seed * 1_000_003 + epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def evaluate_split(model: ModelGraph, split: Split, n_classes: int, weights=None) -> tuple[float, float]:
    preds = predict(model, split.features, weights)
    return accuracy(preds, split.labels), macro_f1(preds, split.labels, n_classes)


def _lr_for(name: str, sched: MctSchedule) -> float:
    return sched.lr_classifier if name.startswith("head.") else sched.lr_encoder


def _check_finite(value: float, phase: str, state: TrainState, epoch: int, batch: np.ndarray) -> None:
    if not math.isfinite(value):
        raise NumericalError(
            f"non-finite loss {value} in {phase} phase (cycle {state.cycle_index}, epoch {epoch}, "
            f"batch of {len(batch)} starting with examples {batch[:4].tolist()})"
        )


def run_distill_phase(
    state: TrainState,
    teacher: ModelGraph,
    data: Dataset,
    sched: MctSchedule,
    epochs: int | None = None,
    on_step: StepHook | None = None,
) -> TrainState:
    """Distillation epochs on full-precision weights (gamma = 1)."""
    if teacher.role != "teacher":
        raise ValueError("the teacher must be frozen (role='teacher')")
    state.phase = "distill"
    student = state.student
    train = data.train
    z_teacher = encode_batch(teacher, train.features).astype(student.dtype)
    if z_teacher.shape[1] != student.config.latent_dim:
        raise ValueError("teacher and student latent sizes differ")
    opt = Optimizer(sched.optimizer)
    params = student.parameters()
    epochs = sched.distill_epochs if epochs is None else epochs

    for epoch in range(epochs):
        sums = np.zeros(2)
        for batch in _batches(len(train), sched.batch_size, sched.seed, state.epochs_run):
            x, y = train.features[batch], train.labels[batch]
            with Tape() as tape:
                z = forward_features(student, x)
                l1 = losses.l1_feature_loss(z_teacher[batch], z)
                l_gt = losses.cross_entropy(head_logits(student, z), y)
                total = losses.combined_loss(
                    lambda: losses.distillation_loss(l1, l_gt, sched.alpha), lambda: None, 1
                )
            _check_finite(total.item(), "distill", state, epoch, batch)
            tape.backward(total)
            for name, p in params.items():
                opt.step(name, p, _lr_for(name, sched))
                p.grad = None
            sums += len(batch) * np.array([l1.item(), l_gt.item()])
            if on_step:
                on_step(state)
        l1_avg, gt_avg = (sums / len(train)).tolist()
        l_dis = losses.distillation_loss(l1_avg, gt_avg, sched.alpha)
        acc, f1 = evaluate_split(student, data.val, data.n_classes)
        _record(state, epoch, 1, l1_avg, gt_avg, l_dis, NAN, NAN, l_dis, acc, f1, sched.alpha)
    return state


def prepare_codebooks(state: TrainState, sched: MctSchedule, policy: QuantPolicy | None = None) -> QuantizedModel:
    """Fit (or warm-refit) codebooks to the student's current weights."""
    prev = state.quantized
    if prev is not None and not sched.refit_codebooks:
        cbs = {}
        params = state.student.parameters()
        for name, cb in prev.codebooks.items():
            idx = assign(params[name].data, cb.centroids).reshape(cb.indices.shape).astype(np.int32)
            cbs[name] = LayerCodebook(cb.bits, cb.centroids.copy(), idx)
        qm = QuantizedModel(state.student, cbs, set(prev.exempt))
    else:
        qm = quantize_model(
            state.student,
            sched.bits,
            policy,
            seed=sched.seed + 31 * state.cycle_index,
            restarts=sched.kmeans_restarts,
            warm_start=prev,
        )
        qm.base = state.student
    state.quantized = qm
    return qm


def run_quant_phase(
    state: TrainState,
    data: Dataset,
    sched: MctSchedule,
    epochs: int | None = None,
    final: bool = False,
    refit: bool = True,
    on_step: StepHook | None = None,
) -> TrainState:
    """Codebook training on reconstructed weights (gamma = 0); assignments stay fixed."""
    state.phase = "final_quantize" if final else "quantize"
    if refit or state.quantized is None:
        prepare_codebooks(state, sched)
    qm = state.quantized
    student = state.student
    exempt = {name: t for name, t in student.parameters().items() if name in qm.exempt}
    opt = Optimizer(sched.optimizer)
    train = data.train
    epochs = sched.quant_epochs if epochs is None else epochs

    for epoch in range(epochs):
        task_sum = 0.0
        for batch in _batches(len(train), sched.batch_size, sched.seed, state.epochs_run):
            x, y = train.features[batch], train.labels[batch]
            w_hat = {name: Tensor(reconstruct(cb), requires_grad=True) for name, cb in qm.codebooks.items()}
            with Tape() as tape:
                z = forward_features(student, x, w_hat)
                task = losses.cross_entropy(head_logits(student, z, w_hat), y)
                # the task loss through the codebook doubles as the centroid loss
                objective = losses.combined_loss(
                    lambda: None,
                    lambda: losses.quantization_loss(task, task) if sched.double_count_gt else task,
                    0,
                )
            _check_finite(task.item(), state.phase, state, epoch, batch)
            tape.backward(objective)
            for name, cb in qm.codebooks.items():
                g = w_hat[name].grad
                if g is None:
                    continue
                g_c = centroid_gradient(g, cb.indices, cb.k)
                qm.codebooks[name] = apply_codebook_step(cb, opt.direction(name, g_c), sched.lr_codebook)
            for name, p in exempt.items():
                opt.step(name, p, _lr_for(name, sched))
                p.grad = None
            task_sum += len(batch) * task.item()
            if on_step:
                on_step(state)
        l_task = task_sum / len(train)
        l_quant = losses.quantization_loss(l_task, l_task)
        acc, f1 = evaluate_split(student, data.val, data.n_classes, qm.weights())
        _record(state, epoch, 0, NAN, l_task, NAN, l_task, l_quant, l_quant, acc, f1, sched.alpha)
    return state


def _record(state, epoch, gamma, l1, l_gt, l_dis, l_c, l_q, total, acc, f1, alpha) -> None:
    row = HistoryRow(state.cycle_index, state.phase, epoch, gamma, l1, l_gt, l_dis, l_c, l_q, total, acc, f1, alpha)
    state.history.append(row)
    state.epochs_run += 1
    log.info(
        "cycle %d %-14s epoch %d  total %.4f  l1 %.4f  l_gt %.4f  acc %.4f  f1 %.4f",
        row.cycle, row.phase, row.epoch, row.total, row.l1, row.l_gt, row.acc, row.f1,
    )


def _make_student(student_init, cfg: EncoderConfig, sched: MctSchedule, n_classes: int, dtype) -> ModelGraph:
    if isinstance(student_init, ModelGraph):
        return student_init.clone()
    return initialize(cfg, student_init, sched.seed, n_classes, dtype)


def mct_train(
    teacher: ModelGraph,
    student_init: InitMode | ModelGraph,
    data: Dataset,
    sched: MctSchedule,
    cfg: EncoderConfig | None = None,
    dtype=np.float32,
    on_step: StepHook | None = None,
) -> tuple[QuantizedModel, list[HistoryRow]]:
    """Alternate distillation and quantization ``sched.cycles`` times, then a final quantization phase."""
    student = _make_student(student_init, cfg or EncoderConfig(), sched, data.n_classes, dtype)
    state = TrainState(student)
    for cycle in range(sched.cycles):
        state.cycle_index = cycle
        if state.quantized is not None:
            # hand the trained codebook back to the full-precision student
            state.student = state.quantized.materialize()
            state.quantized.base = state.student
        run_distill_phase(state, teacher, data, sched, on_step=on_step)
        run_quant_phase(state, data, sched, on_step=on_step)
    state.cycle_index = sched.cycles
    run_quant_phase(state, data, sched, sched.final_quant_epochs, final=True, refit=False, on_step=on_step)
    return state.quantized, state.history


def distill_only(
    teacher: ModelGraph,
    student_init: InitMode | ModelGraph,
    data: Dataset,
    sched: MctSchedule,
    cfg: EncoderConfig | None = None,
    dtype=np.float32,
) -> tuple[ModelGraph, list[HistoryRow]]:
    """All distillation epochs of the schedule back to back, no quantization."""
    student = _make_student(student_init, cfg or EncoderConfig(), sched, data.n_classes, dtype)
    state = TrainState(student)
    run_distill_phase(state, teacher, data, sched, epochs=sched.cycles * sched.distill_epochs)
    return state.student, state.history


def quantize_once(student: ModelGraph, sched: MctSchedule, bits: int | None = None) -> QuantizedModel:
    return quantize_model(student, bits or sched.bits, seed=sched.seed, restarts=sched.kmeans_restarts)


def baseline_quantize_after_distill(
    teacher: ModelGraph,
    student_init: InitMode | ModelGraph,
    data: Dataset,
    sched: MctSchedule,
    cfg: EncoderConfig | None = None,
    dtype=np.float32,
) -> tuple[QuantizedModel, list[HistoryRow]]:
    """Distill for every distillation epoch of the schedule, then one k-means pass with no codebook training."""
    student, history = distill_only(teacher, student_init, data, sched, cfg, dtype)
    return quantize_once(student, sched), history


def train_supervised(
    model: ModelGraph,
    data: Dataset,
    epochs: int = 40,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
    patience: int = 8,
) -> tuple[ModelGraph, list[dict]]:
    """Plain cross-entropy training with early stopping on validation accuracy.

    Returns the best-validation copy of the model and per-epoch records.
    """
    opt = Optimizer("adam")
    params = model.parameters()
    best, best_acc, stale = model.clone(), -1.0, 0
    history = []
    for epoch in range(epochs):
        loss_sum = 0.0
        for batch in _batches(len(data.train), batch_size, seed, epoch):
            with Tape() as tape:
                logits = head_logits(model, forward_features(model, data.train.features[batch]))
                loss = losses.cross_entropy(logits, data.train.labels[batch])
            if not math.isfinite(loss.item()):
                raise NumericalError(f"non-finite loss in supervised epoch {epoch}")
            tape.backward(loss)
            for name, p in params.items():
                opt.step(name, p, lr)
                p.grad = None
            loss_sum += len(batch) * loss.item()
        acc, f1 = evaluate_split(model, data.val, data.n_classes)
        history.append({"epoch": epoch, "l_gt": loss_sum / len(data.train), "acc": acc, "f1": f1})
        log.info("supervised epoch %d  l_gt %.4f  acc %.4f  f1 %.4f", epoch, history[-1]["l_gt"], acc, f1)
        if acc > best_acc:
            best, best_acc, stale = model.clone(), acc, 0
        else:
            stale += 1
            if stale >= patience:
                break
    return best, history
