import numpy as np
import pytest

from clewi import tensor as T
from clewi.buffer import MemoryBuffer
from clewi.models import ModelArch, build_model

ARCH_INPUTS = {
    "small-mlp": (12,),
    "small-convnet": (1, 8, 8),
    "small-resnet": (2, 8, 8),
}


def make_arch(arch_id, width=1, num_classes=5):
    return ModelArch(arch_id, ARCH_INPUTS[arch_id], num_classes, width)


def numerical_grad(f, x, h=1e-3, idx=None):
    """Central differences of scalar f() w.r.t. array x (modified in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    coords = range(flat.size) if idx is None else idx
    for i in coords:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_error(analytic, numeric, idx=None):
    """Largest absolute discrepancy relative to the gradient's scale."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if idx is not None:
        a, n = a[idx], n[idx]
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-8)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def check_op_grads(build_loss, arrays, h=1e-3):
    """build_loss(tensors) -> scalar Tensor. Returns max relative error over all arrays."""
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    with T.GradTape() as tape:
        loss = build_loss(tensors)
    grads = T.backward(loss, tape, {str(i): t for i, t in enumerate(tensors)})
    worst = 0.0
    for i, a in enumerate(arrays):
        num = numerical_grad(lambda: build_loss([T.Tensor(b) for b in arrays]).item(), a, h)
        worst = max(worst, rel_error(grads[str(i)], num))
    return worst


def filled_buffer(x, y, capacity=None, seed=0):
    buf = MemoryBuffer(capacity or len(y), seed)
    buf.add_batch(x, y)
    return buf


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["small-mlp", "small-convnet", "small-resnet"])
def arch(request):
    return make_arch(request.param)


@pytest.fixture
def model(arch):
    return build_model(arch, seed=3)
