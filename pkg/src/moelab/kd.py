"""Router knowledge distillation.

The student's routers are tuned so that its next-token distribution matches
the teacher's under a masked, temperature-scaled token-level KL loss::

    loss(x) = tau^2 / N_x * sum_t m[t+1] * KL(softmax(z_T[t]/tau) || softmax(z_S[t]/tau))
    N_x     = sum_t m[t+1] + eps

Gradients are computed for the whole student but only router matrices are
ever updated; every other parameter stays bit-identical.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from moelab import tensor_core as tc
from moelab.autodiff import Tensor
from moelab.errors import InvalidArgumentError, NumericalError
from moelab.model import MoEModel, TokenBatch, _as_params, forward, forward_tensors, is_router_param
from moelab.optim import make_optimizer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class KDConfig:
    temperature: float = 1.0
    learning_rate: float = 5e-5
    epochs: int = 1
    batch_size: int = 2
    grad_accum: int = 4
    max_seq_len: int = 512
    max_samples: int = 3000
    epsilon: float = 1e-8
    optimizer: str = "adam"
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise InvalidArgumentError("temperature must be positive")
        if not self.learning_rate > 0:
            raise InvalidArgumentError("learning_rate must be positive")
        if not self.epsilon > 0:
            raise InvalidArgumentError("epsilon must be positive")
        for name in ("epochs", "batch_size", "grad_accum", "max_seq_len", "max_samples"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be at least 1")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidArgumentError("optimizer must be 'adam' or 'sgd'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> KDConfig:
        return cls(**d)


@dataclass
class TrainState:
    step: int
    optimizer: object
    losses: list[float] = field(default_factory=list)

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.losses)) if self.losses else float("nan")


def _soft_targets(teacher_logits: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    p = tc.softmax(teacher_logits, tau)
    logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
    return p, logp


def kd_loss(teacher_logits, student_logits, mask, tau: float = 1.0, eps: float = 1e-8) -> float:
    """Distillation loss of one sequence (positions along the first axis)."""
    zt = tc.as_f64(teacher_logits)
    zs = tc.as_f64(student_logits)
    m = np.asarray(mask, dtype=np.float64)
    if zt.shape != zs.shape or zt.ndim != 2 or m.shape != (zt.shape[0],):
        raise InvalidArgumentError(
            f"shape mismatch: teacher {zt.shape}, student {zs.shape}, mask {m.shape}"
        )
    if not tau > 0:
        raise InvalidArgumentError("temperature must be positive")
    n_x = m[1:].sum() + eps
    total = 0.0
    for t in range(zt.shape[0] - 1):
        if m[t + 1]:
            total += m[t + 1] * tc.kl_divergence(tc.softmax(zt[t], tau), tc.softmax(zs[t], tau))
    return tau * tau * total / n_x


def kd_loss_tensor(teacher_logits: np.ndarray, student_logits: Tensor, batch: TokenBatch,
                   tau: float, eps: float) -> Tensor:
    """Mean per-sequence distillation loss over a flattened batch, as a graph node."""
    pos, _, wts = batch.next_token_targets()
    if pos.size == 0:
        return Tensor(0.0)
    seq_id = np.repeat(np.arange(len(batch)), [max(len(s) - 1, 0) for s in batch.sequences])
    n_x = np.bincount(seq_id, weights=wts, minlength=len(batch)) + eps
    coef = tau * tau * wts / n_x[seq_id] / len(batch)
    p, logp = _soft_targets(teacher_logits[pos], tau)
    logq = (student_logits[pos] * (1.0 / tau)).log_softmax()
    kl = (p * logp).sum(axis=1) - (logq * p).sum(axis=1)
    return (kl * coef).sum()


def batch_kd_loss(teacher: MoEModel, student: MoEModel, batch: TokenBatch,
                  tau: float = 1.0, eps: float = 1e-8) -> float:
    """Mean per-sequence distillation loss of ``student`` to ``teacher`` (no gradients)."""
    zt = forward(teacher, batch).logits
    zs = Tensor(forward(student, batch).logits)
    return float(kd_loss_tensor(zt, zs, batch, tau, eps).data)


def backward(model: MoEModel, batch: TokenBatch, teacher_logits: np.ndarray,
             tau: float = 1.0, eps: float = 1e-8,
             params: set[str] | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Distillation loss and reverse-mode gradients for ``params`` (default: all).

    The discrete top-k choice is held fixed; router gradients arrive through
    the renormalized gates of the selected experts.
    """
    track = set(model.parameters()) if params is None else set(params)
    tensors = _as_params(model, track)
    logits, _ = forward_tensors(model, batch.flat_tokens(), tensors)
    loss = kd_loss_tensor(teacher_logits, logits, batch, tau, eps)
    if loss.requires_grad:
        loss.backward()
    grads = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in tensors.items() if name in track
    }
    return float(loss.data), grads


def router_grad_formula(g_T, g_S, x, tau: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-logit gradient ``(g_S - g_T)/tau`` of KL(g_T||g_S) and its outer product with x."""
    g_T = tc.as_f64(g_T)
    g_S = tc.as_f64(g_S)
    if g_T.shape != g_S.shape:
        raise InvalidArgumentError(f"length mismatch: {g_T.shape} vs {g_S.shape}")
    grad = (g_S - g_T) / tau
    return grad, np.outer(grad, tc.as_f64(x))


def _check_compatible(teacher: MoEModel, student: MoEModel) -> None:
    if teacher.config.vocab_size != student.config.vocab_size:
        raise InvalidArgumentError(
            f"vocabulary mismatch: teacher {teacher.config.vocab_size}, "
            f"student {student.config.vocab_size}"
        )
    if teacher.config.d_model != student.config.d_model:
        raise InvalidArgumentError("teacher and student d_model differ")


def calibrate_router(teacher: MoEModel, student: MoEModel, corpus: TokenBatch,
                     config: KDConfig = KDConfig(),
                     log_path=None) -> tuple[MoEModel, list[dict]]:
    """Router-only distillation; returns the calibrated copy and per-step loss records.

    Micro-batches of ``batch_size`` sequences are accumulated over
    ``grad_accum`` of them before each optimizer step.  The accumulated
    gradient is the mean over micro-batches in the window, so a window of
    4 x 2 sequences matches one batch of 8.
    """
    _check_compatible(teacher, student)
    calibrated = student.copy()
    params = calibrated.parameters()
    routers = [n for n in params if is_router_param(n)]
    if not routers:
        raise InvalidArgumentError("student has no router parameters")
    data = corpus.subset(range(min(len(corpus), config.max_samples))).truncated(config.max_seq_len)
    if len(data) == 0:
        raise InvalidArgumentError("calibration corpus is empty")
    state = TrainState(0, make_optimizer(config.optimizer, routers, config.learning_rate))
    rng = np.random.default_rng(config.seed)
    history: list[dict] = []

    def apply(acc, window_losses, n_micro):
        grads = {n: g / n_micro for n, g in acc.items()}
        state.optimizer.step(params, grads)
        state.step += 1
        value = float(np.mean(window_losses))
        state.losses.append(value)
        history.append({"step": state.step, "kd_loss": value, "lr": config.learning_rate})

    for _ in range(config.epochs):
        order = rng.permutation(len(data)) if config.shuffle else np.arange(len(data))
        micro = [order[i:i + config.batch_size] for i in range(0, len(order), config.batch_size)]
        acc: dict[str, np.ndarray] = {}
        window: list[float] = []
        for mb in micro:
            batch = data.subset(mb)
            zt = forward(teacher, batch).logits
            loss, grads = backward(calibrated, batch, zt, config.temperature, config.epsilon,
                                   params=routers)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite distillation loss at step {state.step + 1}")
            for n, g in grads.items():
                acc[n] = acc[n] + g if n in acc else g.copy()
            window.append(loss)
            if len(window) == config.grad_accum:
                apply(acc, window, len(window))
                acc, window = {}, []
        if window:
            apply(acc, window, len(window))
    log.info("router calibration: %d steps, final loss %.6g", state.step,
             history[-1]["kd_loss"] if history else float("nan"))
    if log_path is not None:
        write_loss_history(history, log_path)
    return calibrated, history


def write_loss_history(history: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def count_router_fraction(model: MoEModel) -> float:
    params = model.parameters()
    total = sum(a.size for a in params.values())
    router = sum(a.size for n, a in params.items() if is_router_param(n))
    if router == 0:
        raise InvalidArgumentError("model has no router parameters")
    return router / total
