"""Losses, Adam/AdamW, the two-phase capacity schedule and EER."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gate import GateState, clamp_lambdas, lambda_penalty
from .layers import DEFAULT_THRESHOLD, ModelGraph, active_units, forward
from .profiler import effective_flops
from .rng import RngStream

BCE_EPS = 1e-7


class TrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# losses


def l1_loss(target, pred: Tensor) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(target)
    if target.shape != pred.shape:
        raise ad.ShapeError(f"l1_loss: target shape {target.shape} != prediction shape {pred.shape}")
    return ad.mean(ad.absolute(ad.sub(target, pred)))


def composite_loss(task_loss: Tensor, gates: Sequence[GateState], beta: float, l1_scale: float = 1.0) -> Tensor:
    """``l1_scale * task_loss`` plus the capacity penalty of every gate."""
    total = ad.scale(task_loss, l1_scale)
    if beta == 0:
        return total
    for g in gates:
        total = ad.add(total, lambda_penalty(g, beta))
    return total


def bce_loss(labels, probs, pos_weight: float = 1.0) -> Tensor:
    """Binary cross entropy with positive examples weighted by ``pos_weight``."""
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.float64)
    p = probs if isinstance(probs, Tensor) else Tensor(probs)
    if y.shape != p.shape:
        raise ad.ShapeError(f"bce_loss: labels shape {y.shape} != probabilities shape {p.shape}")
    if pos_weight < 0:
        raise ValueError(f"pos_weight must be nonnegative, got {pos_weight}")
    p = ad.clamp(p, BCE_EPS, 1.0 - BCE_EPS)
    pos = ad.mul(Tensor(pos_weight * y), ad.log(p))
    neg = ad.mul(Tensor(1.0 - y), ad.log(ad.sub(1.0, p)))
    return ad.scale(ad.mean(ad.add(pos, neg)), -1.0)


def eer(scores, labels) -> tuple[float, float]:
    """Equal error rate and its threshold.

    A score ``>= t`` is accepted. Candidate thresholds are midpoints of the
    sorted unique scores; the chosen ``t`` minimises ``|FAR - FRR|`` (ties go
    to the smallest ``t``) and the rate reported is ``(FAR + FRR) / 2``.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("eer needs both positive and negative examples")
    uniq = np.unique(s)
    cands = (uniq[:-1] + uniq[1:]) / 2.0 if uniq.size > 1 else uniq
    pos_sorted, neg_sorted = np.sort(pos), np.sort(neg)
    far = (neg.size - np.searchsorted(neg_sorted, cands, side="left")) / neg.size
    frr = np.searchsorted(pos_sorted, cands, side="left") / pos.size
    k = int(np.argmin(np.abs(far - frr)))  # first minimum = smallest threshold
    return float((far[k] + frr[k]) / 2.0), float(cands[k])


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Adam moments; ``weight_decay > 0`` gives decoupled (AdamW) decay."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], grads, state: AdamState) -> AdamState:
    """One bias-corrected Adam(W) update, written into ``params`` in place.

    ``grads`` maps each parameter to its gradient (or is a parallel list).
    """
    if not isinstance(grads, dict):
        grads = dict(zip(params, grads))
    for i, p in enumerate(params):
        g = np.asarray(grads[p], dtype=np.float64)
        if g.shape != p.shape:
            raise ad.ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {p.name or i!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p in params:
        key = id(p)
        g = np.asarray(grads[p], dtype=np.float64)
        m = state.m.get(key)
        v = state.v.get(key)
        m = (1.0 - state.beta1) * g if m is None else state.beta1 * m + (1.0 - state.beta1) * g
        v = (1.0 - state.beta2) * g * g if v is None else state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[key], state.v[key] = m, v
        w = p.data
        if state.weight_decay:
            w = w - state.lr * state.weight_decay * w
        p.assign(w - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
    return state


# --------------------------------------------------------------------------
# two-phase training


@dataclass
class TrainConfig:
    total_steps: int = 3000
    phase1_steps: int = 1000
    lr: float = 1e-3
    beta: float = 0.5
    lambda_min: float = 0.0625
    l1_scale: float = 1.0
    seed: int = 0
    batch_frames: int = 32
    weight_decay: float = 0.0
    threshold: float = DEFAULT_THRESHOLD
    settle_steps: int = 0

    def __post_init__(self):
        if self.total_steps < 0 or not 0 <= self.phase1_steps <= self.total_steps:
            raise ValueError(f"need 0 <= phase1_steps <= total_steps, got {self.phase1_steps}, {self.total_steps}")
        if not 0 <= self.settle_steps <= self.total_steps - self.phase1_steps:
            raise ValueError(f"settle_steps must lie in [0, total_steps - phase1_steps], got {self.settle_steps}")
        if self.beta < 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 < self.lambda_min < 1:
            raise ValueError(f"lambda_min must lie in (0, 1), got {self.lambda_min}")
        if self.batch_frames < 1:
            raise ValueError(f"batch_frames must be positive, got {self.batch_frames}")


HISTORY_COLUMNS = ("step", "task_loss", "lambda_penalty", "mean_lambda", "active_units", "flops_per_frame")


@dataclass
class TrainHistory:
    step: list[int] = field(default_factory=list)
    task_loss: list[float] = field(default_factory=list)
    lambda_penalty: list[float] = field(default_factory=list)
    mean_lambda: list[float] = field(default_factory=list)
    active_units: list[int] = field(default_factory=list)
    flops_per_frame: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.step)

    def append(self, **row) -> None:
        for name in HISTORY_COLUMNS:
            getattr(self, name).append(row[name])

    def rows(self):
        return zip(*(getattr(self, name) for name in HISTORY_COLUMNS))

    def write_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for row in self.rows():
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])


Task = Callable[[int], tuple[np.ndarray, np.ndarray]]


def _gate_stats(model: ModelGraph, threshold: float) -> tuple[float, int]:
    gates = model.gates()
    if not gates:
        return 1.0, 0
    lam = np.concatenate([g.values for g in gates])
    return float(lam.mean()), sum(active_units(layer, threshold) for layer in model.layers if hasattr(layer, "gate"))


def snap_gates(gates: Sequence[GateState], threshold: float) -> None:
    """Round every gate to its consolidated shape.

    Units at or below ``threshold`` get a zero fraction. In ``ordered_K``
    mode the kept units are fully open; per-unit fractions above the
    threshold are left as they are.
    """
    for g in gates:
        keep = g.values > threshold
        if g.mode == "ordered_K":
            g.set_lambdas([min(keep.sum() / g.width, g.upper)])
        else:
            g.set_lambdas(np.where(keep, g.lambdas.data, 0.0))


def train_two_phase(model: ModelGraph, task: Task, config: TrainConfig, rng: RngStream | None = None,
                    loss: str = "l1") -> TrainHistory:
    """Train weights throughout; train capacity fractions after ``phase1_steps``.

    Phase 1 minimises the task loss with every fraction held at its maximum.
    Phase 2 adds the capacity penalty, updates the fractions with their own
    Adam state and projects them into ``[lambda_min, lambda_max]`` after each
    step. The last ``settle_steps`` steps snap the gates to their consolidated
    shape (:func:`snap_gates`) and train the weights alone, so the model that
    is consolidated is the model that was trained. ``task(step)`` returns
    ``(inputs, targets)``.
    """
    rng = RngStream(config.seed) if rng is None else rng
    noise = rng.child("gate-noise")
    weights = model.parameters()
    gates = model.gates()
    for g in gates:
        g.lambda_min = config.lambda_min
    lams = [g.lambdas for g in gates]
    w_state = AdamState(lr=config.lr, weight_decay=config.weight_decay)
    g_state = AdamState(lr=config.lr)
    history = TrainHistory()

    settle_from = config.total_steps - config.settle_steps
    for step in range(config.total_steps):
        if step == settle_from and config.settle_steps:
            snap_gates(gates, config.threshold)
        phase2 = config.phase1_steps <= step < settle_from
        x, y = task(step)
        with ad.Tape() as tape:
            pred = forward(model, x, training=True, noise=noise, step=step)
            if loss == "l1":
                task_loss = l1_loss(y, pred)
            elif loss == "bce":
                task_loss = bce_loss(y, pred)
            else:
                raise ValueError(f"unknown loss {loss!r}")
            beta = config.beta if step >= config.phase1_steps else 0.0
            total = composite_loss(task_loss, gates, beta, config.l1_scale)
        if not math.isfinite(total.item()):
            raise TrainingError(f"non-finite loss at step {step}")
        grads = ad.backward(tape, total, weights + (lams if phase2 else []))
        try:
            adam_step(weights, grads, w_state)
            if phase2 and lams:
                adam_step(lams, grads, g_state)
                for g in gates:
                    clamp_lambdas(g)
        except TrainingError as exc:
            raise TrainingError(f"step {step}: {exc}") from None

        mean_lam, n_active = _gate_stats(model, config.threshold)
        history.append(
            step=step,
            task_loss=task_loss.item(),
            lambda_penalty=float(sum(beta * np.mean(g.lambdas.data**2) for g in gates)),
            mean_lambda=mean_lam,
            active_units=n_active,
            flops_per_frame=effective_flops(model),
        )
    return history
