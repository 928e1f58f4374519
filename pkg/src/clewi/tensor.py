"""Small reverse-mode autodiff engine over numpy arrays.

Only the primitives the model zoo needs are provided. Every op takes and
returns :class:`Tensor` objects; when a :class:`GradTape` is active and one of
the inputs requires a gradient, the op records a vector-Jacobian product on the
tape. :func:`backward` replays the tape in reverse.

Arrays keep the dtype they were created with (float32 by default). Reductions
accumulate in float64 and cast back.
"""

from __future__ import annotations

import threading
from typing import Callable, Mapping, Optional, Sequence, Tuple

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class MissingGradientError(RuntimeError):
    """Raised when a requested parameter is not reachable from the loss."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


class _Node:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out: Tensor, parents: Sequence[Tensor], vjp: Callable):
        self.out = out
        self.parents = tuple(parents)
        self.vjp = vjp


class GradTape:
    """Records primitive ops while active (``with GradTape() as tape:``)."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> Optional[GradTape]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _emit(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        tape.nodes.append(_Node(out, parents, vjp))
    return out


def backward(loss: Tensor, tape: GradTape, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to each tensor in ``params``."""
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = {}
    for name, p in params.items():
        g = grads.get(id(p))
        if g is None:
            raise MissingGradientError(f"no gradient path from loss to {name!r}")
        out[name] = g.astype(p.data.dtype, copy=False)
    return out


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return g @ B.T, A.T @ g

    return _emit(A @ B, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ w.T + b`` with ``w`` laid out as (out, in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear shapes x={x.shape} w={w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear bias shape {b.shape} for weight {w.shape}")
    X, W = x.data, w.data
    out = X @ W.T
    if b is not None:
        out = out + b.data

    def vjp(g):
        gx = g @ W
        gw = g.T @ X
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0, dtype=np.float64).astype(g.dtype)

    parents = (x, w) if b is None else (x, w, b)
    return _emit(out, parents, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes {a.shape} + {b.shape}")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def tensor_sum(x: Tensor) -> Tensor:
    total = np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype)
    shape = x.shape
    return _emit(total, (x,), lambda g: (np.broadcast_to(g, shape).astype(g.dtype),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(x.data * mask, (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    orig = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(f"conv2d output size not integral: size={size} k={k} stride={stride} pad={pad}")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation; x is (N, C_in, H, W), w is (C_out, C_in, k, k)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D operands, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    co, ci, k, k2 = w.shape
    if ci != c or k != k2:
        raise ShapeError(f"conv2d kernel {w.shape} incompatible with input {x.shape}")
    if k % 2 == 0:
        raise ShapeError(f"conv2d kernel size must be odd, got {k}")
    if pad < 0 or stride < 1:
        raise ShapeError(f"invalid stride={stride} pad={pad}")
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(wd, k, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = w.data.reshape(co, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        gw = (gmat.T @ cols).reshape(w.shape)
        gcols = (gmat @ wmat).reshape(n, ho, wo, c, k, k)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        if b is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=0, dtype=np.float64).astype(g.dtype)

    parents = (x, w) if b is None else (x, w, b)
    return _emit(out, parents, vjp)


def avgpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avgpool2d window {k} does not tile {h}x{w}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5), dtype=np.float64)

    def vjp(g):
        up = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
        return (up / (k * k)).astype(g.dtype),

    return _emit(out.astype(x.data.dtype), (x,), vjp)


def global_avgpool(x: Tensor) -> Tensor:
    """Mean over spatial axes: (N, C, H, W) -> (N, C)."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.data.dtype)

    def vjp(g):
        return np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(g.dtype),

    return _emit(out, (x,), vjp)


def batchnorm_forward(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    count: int = 0,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> tuple[Tensor, np.ndarray, np.ndarray, int]:
    """Batch normalization over every axis except the channel axis (1).

    Returns ``(out, running_mean, running_var, count)``. In ``train`` mode the
    running statistics follow an exponential moving average with ``momentum``
    (unbiased batch variance). ``collect`` mode normalizes with batch statistics
    like ``train`` but merges the batch into a pooled estimate of all samples
    seen since the statistics were reset; ``count`` is the number of samples
    already pooled. ``eval`` mode normalizes with the running statistics.
    """
    if mode not in ("train", "eval", "collect"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    if x.ndim not in (2, 4):
        raise ShapeError(f"batchnorm expects (N,C) or (N,C,H,W), got {x.shape}")
    ch = x.shape[1]
    if gamma.shape != (ch,) or beta.shape != (ch,) or running_mean.shape != (ch,):
        raise ShapeError(f"batchnorm parameters do not match {ch} channels")
    dt = x.data.dtype
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, ch) if x.ndim == 2 else (1, ch, 1, 1)
    n = x.data.size // ch

    if mode == "eval":
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
        new_mean, new_var, new_count = running_mean, running_var, count
    else:
        mu = x.data.mean(axis=axes, dtype=np.float64)
        var = np.maximum(((x.data - mu.reshape(bshape)) ** 2).mean(axis=axes, dtype=np.float64), 0.0)
        if mode == "train":
            unbiased = var * n / max(n - 1, 1)
            new_mean = ((1 - momentum) * running_mean + momentum * mu).astype(running_mean.dtype)
            new_var = ((1 - momentum) * running_var + momentum * unbiased).astype(running_var.dtype)
            new_count = count
        else:
            total = count + n
            delta = mu - running_mean.astype(np.float64)
            pooled_mean = running_mean.astype(np.float64) + delta * (n / total)
            m2 = running_var.astype(np.float64) * count + var * n + delta ** 2 * (count * n / total)
            new_mean = pooled_mean.astype(running_mean.dtype)
            new_var = (m2 / total).astype(running_var.dtype)
            new_count = total

    inv_std = (1.0 / np.sqrt(var + eps)).reshape(bshape)
    xhat = ((x.data - mu.reshape(bshape)) * inv_std).astype(dt)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    G = gamma.data.reshape(bshape)
    batch_stats = mode != "eval"

    def vjp(g):
        ggamma = (g * xhat).sum(axis=axes, dtype=np.float64).astype(dt)
        gbeta = g.sum(axis=axes, dtype=np.float64).astype(dt)
        dxhat = (g * G).astype(np.float64)
        if batch_stats:
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            gx = inv_std * (dxhat - s1 / n - xhat * s2 / n)
        else:
            gx = dxhat * inv_std
        return gx.astype(dt), ggamma, gbeta

    out_t = _emit(out.astype(dt), (x, gamma, beta), vjp)
    return out_t, new_mean, new_var, new_count


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    if logits.ndim != 2 or len(labels) != logits.shape[0]:
        raise ShapeError(f"cross-entropy logits {logits.shape} vs {len(labels)} labels")
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(logsum - z[np.arange(n), labels])
    dt = logits.data.dtype

    def vjp(g):
        p = softmax(logits.data)
        p[np.arange(n), labels] -= 1.0
        return (p * (float(g) / n)).astype(dt),

    return _emit(np.asarray(loss, dtype=dt), (logits,), vjp)


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error against a constant target."""
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes {pred.shape} vs {target.shape}")
    diff = pred.data.astype(np.float64) - target
    dt = pred.data.dtype

    def vjp(g):
        return (diff * (2.0 * float(g) / diff.size)).astype(dt),

    return _emit(np.asarray(np.mean(diff ** 2), dtype=dt), (pred,), vjp)
