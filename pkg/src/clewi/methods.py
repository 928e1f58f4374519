"""Task-level trainers: finetune, joint, ER, aGEM and DER++.

Every trainer takes the network from before the task, trains a copy with
plain SGD (optionally with momentum) on the task data, and returns a
:class:`TaskReport` holding the new network. Rehearsal trainers read from and
write to the shared :class:`MemoryBuffer`; within each batch the gradient
step always happens before the new samples are offered to the buffer.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .buffer import MemoryBuffer
from .data import Dataset, batches
from .models import ParamSet, forward

METHODS = ("finetune", "joint", "er", "agem", "derpp")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    lr: float = 0.03
    epochs: int = 5
    batch_size: int = 32
    replay_batch_size: int = 32
    method: str = "er"
    momentum: float = 0.0
    derpp_mse: float = 0.5
    derpp_ce: float = 0.5
    rehearsal: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1 or self.replay_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class TaskReport:
    params: ParamSet
    epoch_losses: list = field(default_factory=list)
    wall_clock: float = 0.0
    steps: int = 0
    loss_terms: list = field(default_factory=list)
    projections: list = field(default_factory=list)


class SGD:
    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict = {}

    def step(self, params: ParamSet, grads: dict) -> None:
        for name, g in grads.items():
            if self.momentum:
                v = self.velocity.get(name)
                v = g if v is None else self.momentum * v + g
                self.velocity[name] = v
                g = v
            params.tensors[name] = (params[name] - params[name].dtype.type(self.lr) * g).astype(params[name].dtype)


def _ce(params: ParamSet, leaves, x, y) -> tuple[T.Tensor, T.Tensor]:
    logits = forward(params, x, "train", leaves=leaves)
    return T.softmax_cross_entropy(logits, y), logits


def _grads(params: ParamSet, loss_fn: Callable) -> tuple:
    leaves = params.leaves()
    with T.GradTape() as tape:
        loss, extra = loss_fn(leaves)
    return loss, T.backward(loss, tape, leaves), extra


def _check(loss: float, ctx: dict) -> None:
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss} at {ctx}", dict(ctx, loss=loss))


def _run(params: ParamSet, data: Dataset, cfg: TrainConfig, step: Callable) -> TaskReport:
    theta = params.copy()
    opt = SGD(cfg.lr, cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 7])
    report = TaskReport(theta)
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        total, n = 0.0, 0
        for x, y in batches(data, cfg.batch_size, rng):
            loss = step(theta, opt, x, y, report)
            _check(loss, {"epoch": epoch, "step": report.steps})
            total += loss * len(y)
            n += len(y)
            report.steps += 1
        report.epoch_losses.append(total / max(n, 1))
    report.wall_clock = time.perf_counter() - t0
    return report


def _rehearse(buffer: Optional[MemoryBuffer], cfg: TrainConfig) -> bool:
    return cfg.rehearsal and buffer is not None and len(buffer) > 0


def train_finetune(params: ParamSet, data: Dataset, cfg: TrainConfig,
                   buffer: Optional[MemoryBuffer] = None, trace: Optional[list] = None) -> TaskReport:
    """Plain cross-entropy SGD on the current task. A buffer, if given, is
    only filled (so a weight-interpolation step can use it afterwards)."""

    def step(theta, opt, x, y, report):
        loss, grads, _ = _grads(theta, lambda lv: _ce(theta, lv, x, y))
        opt.step(theta, grads)
        report.loss_terms.append(1)
        if trace is not None:
            trace.append("step")
        if buffer is not None:
            buffer.add_batch(x, y)
            if trace is not None:
                trace.append("store")
        return loss.item()

    return _run(params, data, cfg, step)


def train_joint(params: ParamSet, seen: list, cfg: TrainConfig) -> TaskReport:
    """Cross-entropy SGD on the union of every task seen so far."""
    return train_finetune(params, Dataset.concat(seen), cfg)


def train_er(params: ParamSet, data: Dataset, buffer: MemoryBuffer, cfg: TrainConfig,
             trace: Optional[list] = None) -> TaskReport:
    """Experience replay: CE on the new batch plus CE on one buffer batch."""

    def step(theta, opt, x, y, report):
        replay = _rehearse(buffer, cfg)
        if replay:
            xm, ym, _ = buffer.sample_batch(cfg.replay_batch_size)

        def loss_fn(lv):
            loss, _ = _ce(theta, lv, x, y)
            if replay:
                loss = T.add(loss, _ce(theta, lv, xm, ym)[0])
            return loss, None

        loss, grads, _ = _grads(theta, loss_fn)
        opt.step(theta, grads)
        report.loss_terms.append(2 if replay else 1)
        if trace is not None:
            trace.append("step")
        buffer.add_batch(x, y)
        if trace is not None:
            trace.append("store")
        return loss.item()

    return _run(params, data, cfg, step)


def project_gradient(g: np.ndarray, g_ref: np.ndarray) -> tuple[np.ndarray, bool]:
    """aGEM projection: remove the component of ``g`` opposing ``g_ref``."""
    dot = float(np.dot(g.astype(np.float64), g_ref.astype(np.float64)))
    ref_sq = float(np.dot(g_ref.astype(np.float64), g_ref.astype(np.float64)))
    if dot >= 0 or ref_sq == 0.0:
        return g, False
    out = g.astype(np.float64) - (dot / ref_sq) * g_ref.astype(np.float64)
    return out.astype(g.dtype), True


def _flat(grads: dict, names: list) -> np.ndarray:
    return np.concatenate([grads[n].ravel() for n in names])


def _unflat(vec: np.ndarray, grads: dict, names: list) -> dict:
    out, i = {}, 0
    for n in names:
        size = grads[n].size
        out[n] = vec[i:i + size].reshape(grads[n].shape)
        i += size
    return out


def train_agem(params: ParamSet, data: Dataset, buffer: MemoryBuffer, cfg: TrainConfig,
               trace: Optional[list] = None) -> TaskReport:
    """Averaged GEM: project the new-batch gradient against a buffer-batch gradient.

    Each projection appends ``|<g', g_ref>| / (|g| |g_ref|)`` to
    ``report.projections``.
    """

    def step(theta, opt, x, y, report):
        loss, grads, _ = _grads(theta, lambda lv: (_ce(theta, lv, x, y)[0], None))
        names = list(grads)
        if _rehearse(buffer, cfg):
            xm, ym, _ = buffer.sample_batch(cfg.replay_batch_size)
            _, ref, _ = _grads(theta, lambda lv: (_ce(theta, lv, xm, ym)[0], None))
            g, g_ref = _flat(grads, names), _flat(ref, names)
            g_new, fired = project_gradient(g, g_ref)
            if fired:
                denom = np.linalg.norm(g.astype(np.float64)) * np.linalg.norm(g_ref.astype(np.float64))
                report.projections.append(abs(float(np.dot(g_new.astype(np.float64), g_ref))) / denom)
                grads = _unflat(g_new, grads, names)
            report.loss_terms.append(2)
        else:
            report.loss_terms.append(1)
        opt.step(theta, grads)
        if trace is not None:
            trace.append("step")
        buffer.add_batch(x, y)
        if trace is not None:
            trace.append("store")
        return loss.item()

    return _run(params, data, cfg, step)


def derpp_loss(theta: ParamSet, leaves, x, y, first, second, cfg: TrainConfig):
    """DER++ objective and its three parts.

    ``first`` is ``(x, logits)`` for the logit-matching term and ``second`` is
    ``(x, y)`` for the replay cross-entropy term; either may be None.
    Returns ``(total, (ce_new, mse_logits, ce_replay), new_logits)``.
    """
    ce_new, logits = _ce(theta, leaves, x, y)
    total = ce_new
    mse_t = ce_m = None
    if first is not None:
        mse_t = T.mse(forward(theta, first[0], "train", leaves=leaves), first[1])
        total = T.add(total, T.scale(mse_t, cfg.derpp_mse))
    if second is not None:
        ce_m = _ce(theta, leaves, second[0], second[1])[0]
        total = T.add(total, T.scale(ce_m, cfg.derpp_ce))
    parts = tuple(None if t is None else t.item() for t in (ce_new, mse_t, ce_m))
    return total, parts, logits.data.copy()


def train_derpp(params: ParamSet, data: Dataset, buffer: MemoryBuffer, cfg: TrainConfig,
                trace: Optional[list] = None) -> TaskReport:
    """DER++: CE on new data + logit MSE on one buffer batch + CE on another.

    New samples enter the buffer with the logits the model produced for them
    in the same step (before the update)."""
    if not buffer.store_logits:
        raise ValueError("DER++ needs a buffer created with store_logits=True")

    def step(theta, opt, x, y, report):
        first = second = None
        if _rehearse(buffer, cfg):
            xa, _, za = buffer.sample_batch(cfg.replay_batch_size)
            xb, yb, _ = buffer.sample_batch(cfg.replay_batch_size)
            first, second = (xa, za), (xb, yb)

        def loss_fn(lv):
            total, _, logits = derpp_loss(theta, lv, x, y, first, second, cfg)
            return total, logits

        loss, grads, logits = _grads(theta, loss_fn)
        opt.step(theta, grads)
        report.loss_terms.append(1 if first is None else 3)
        if trace is not None:
            trace.append("step")
        buffer.add_batch(x, y, logits)
        if trace is not None:
            trace.append("store")
        return loss.item()

    return _run(params, data, cfg, step)


def train_task(params: ParamSet, data: Dataset, buffer: Optional[MemoryBuffer], cfg: TrainConfig,
               seen: Optional[list] = None, trace: Optional[list] = None) -> TaskReport:
    """Dispatch on ``cfg.method``. ``seen`` (training sets so far) is used by joint."""
    if cfg.method == "finetune":
        return train_finetune(params, data, cfg, buffer, trace)
    if cfg.method == "joint":
        return train_joint(params, seen if seen else [data], cfg)
    if buffer is None:
        raise ValueError(f"{cfg.method} needs a memory buffer")
    if cfg.method == "er":
        return train_er(params, data, buffer, cfg, trace)
    if cfg.method == "agem":
        return train_agem(params, data, buffer, cfg, trace)
    return train_derpp(params, data, buffer, cfg, trace)
