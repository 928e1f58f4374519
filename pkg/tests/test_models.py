import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clewi import tensor as T
from clewi.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from clewi.matching import Permutation, apply_permutation
from clewi.models import (ArchitectureError, ModelArch, ParamSet, build_model, forward, layout, param_count,
                          permutation_spec_of, resnet18_reference_shapes)
from conftest import make_arch, numerical_grad, rel_error


def test_build_is_deterministic(arch):
    assert build_model(arch, 0).bitwise_equal(build_model(arch, 0))
    assert not build_model(arch, 0).bitwise_equal(build_model(arch, 1))


def test_batchnorm_init(model):
    for name, arr in model.items():
        if name.endswith((".running_var", ".gamma")):
            np.testing.assert_array_equal(arr, 1.0)
        if name.endswith((".running_mean", ".beta")):
            np.testing.assert_array_equal(arr, 0.0)


def test_unknown_arch_and_bad_width():
    with pytest.raises(ArchitectureError):
        ModelArch("vgg", (3,), 2)
    with pytest.raises(ArchitectureError):
        ModelArch("small-mlp", (3,), 2, width=0)


def test_resnet_param_count_matches_closed_form():
    arch = make_arch("small-resnet", width=2)
    c, cin, k = 32, 2, 5
    conv = 9 * c * c
    closed = 9 * c * cin + 2 * c + 2 * (2 * conv + 4 * c) + k * c + k
    assert param_count(build_model(arch, 0)) == closed


def test_param_count_linear_and_reference():
    assert param_count([("l.weight", (5, 10)), ("l.bias", (5,))]) == 55
    assert param_count([("bn.running_mean", (5,)), ("bn.running_var", (5,))]) == 0
    assert param_count(resnet18_reference_shapes()) == 11220132


def test_mlp_width_scaling():
    d, k = 12, 5
    for w in (1, 2, 4):
        h = 64 * w
        assert param_count(build_model(make_arch("small-mlp", w), 0)) == (d + 1) * h + (h + 1) * h + (h + 1) * k


def test_param_count_increases_with_width(arch):
    counts = [param_count(build_model(ModelArch(arch.arch_id, arch.input_shape, 5, w), 0)) for w in (1, 2, 4)]
    assert counts[0] < counts[1] < counts[2]


def test_forward_shapes_and_determinism(model, rng):
    x = rng.normal(size=(32, *model.arch.input_shape)).astype(np.float32)
    a = forward(model, x, "eval").data
    assert a.shape == (32, model.arch.num_classes)
    np.testing.assert_array_equal(a, forward(model, x, "eval").data)


def test_zero_input_zero_head_gives_zero_logits(model):
    p = model.copy()
    p["head.weight"] = np.zeros_like(p["head.weight"])
    p["head.bias"] = np.zeros_like(p["head.bias"])
    out = forward(p, np.zeros((3, *p.arch.input_shape), np.float32)).data
    np.testing.assert_array_equal(out, 0.0)


def test_forward_rejects_wrong_input(model):
    with pytest.raises(T.ShapeError):
        forward(model, np.zeros((2, 99), np.float32))


def test_train_mode_updates_running_stats_eval_does_not(rng):
    p = build_model(make_arch("small-convnet"), 0)
    x = rng.normal(size=(4, 1, 8, 8)).astype(np.float32)
    before = p.copy()
    forward(p, x, "eval")
    assert p.bitwise_equal(before)
    forward(p, x, "train")
    assert not np.array_equal(p["bn1.running_mean"], before["bn1.running_mean"])


@pytest.mark.parametrize("arch_id", ["small-mlp", "small-convnet", "small-resnet"])
def test_full_model_gradients_match_finite_differences(arch_id):
    rng = np.random.default_rng(0)
    arch = make_arch(arch_id)
    p64 = build_model(arch, 1).astype(np.float64)
    for n in p64.names():
        if n.endswith((".gamma", ".beta")):
            p64[n] = p64[n] + rng.normal(scale=0.2, size=p64[n].shape)
    x = rng.normal(size=(3, *arch.input_shape))
    y = np.array([0, 1, 2])

    def loss_value():
        return T.softmax_cross_entropy(forward(p64.copy(), x, "train"), y).item()

    leaves = p64.copy().leaves()
    with T.GradTape() as tape:
        loss = T.softmax_cross_entropy(forward(p64.copy(), x, "train", leaves=leaves), y)
    grads = T.backward(loss, tape, leaves)
    for name in p64.trainable_names():
        arr = p64.tensors[name]
        idx = rng.choice(arr.size, size=min(arr.size, 12), replace=False)
        # whole-network checks step below ReLU kink spacing; per-layer checks use h=1e-3
        num = numerical_grad(loss_value, arr, h=1e-5, idx=idx)
        assert rel_error(grads[name], num, idx) < 1e-3, name


def test_permutation_spec_structure():
    mlp = permutation_spec_of(make_arch("small-mlp"))
    assert len(mlp.groups) == 2
    for arch_id in ("small-mlp", "small-convnet", "small-resnet"):
        spec = permutation_spec_of(make_arch(arch_id))
        axes = [a for g in spec.groups for a in g.axes]
        assert len(axes) == len(set(axes)), "an axis belongs to two groups"
        assert ("head.weight", 0) not in axes and ("head.bias", 0) not in axes
        assert set(spec.fixed).isdisjoint(axes)
        shapes = dict(layout(make_arch(arch_id)))
        for g in spec.groups:
            for name, ax in g.axes:
                assert shapes[name][ax] == g.size


def test_resnet_skip_path_is_one_group():
    spec = permutation_spec_of(make_arch("small-resnet"))
    res = spec.group("residual")
    names = {n for n, _ in res.axes}
    assert {"stem.conv.weight", "block1.conv_b.weight", "block2.conv_b.weight", "block1.bn_b.gamma",
            "block2.bn_b.gamma", "head.weight"} <= names
    assert len(spec.groups) == 3


def test_random_permutation_then_inverse_is_bit_identical(model):
    spec = permutation_spec_of(model.arch)
    pi = Permutation.random(spec, 5)
    back = apply_permutation(apply_permutation(model, pi, spec), pi.inverse(), spec)
    assert back.bitwise_equal(model)


def test_checkpoint_round_trip(model):
    m = model.copy()
    forward(m, np.random.default_rng(0).normal(size=(4, *m.arch.input_shape)).astype(np.float32), "train")
    assert load_checkpoint(save_checkpoint(m)).bitwise_equal(m)


def test_checkpoint_corruption():
    p = build_model(make_arch("small-mlp"), 0)
    blob = save_checkpoint(p)
    with pytest.raises(CheckpointError):
        load_checkpoint(blob[:-5])
    with pytest.raises(CheckpointError):
        load_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(blob[:4] + b"\x09\x00" + blob[6:])
    with pytest.raises(CheckpointError):
        load_checkpoint(blob + b"\x00")


@settings(max_examples=25, deadline=None)
@given(st.permutations(list(range(6))))
def test_checkpoint_name_table_order_is_irrelevant(order_idx):
    p = build_model(make_arch("small-mlp"), 2)
    order = [p.names()[i] for i in order_idx]
    assert load_checkpoint(save_checkpoint(p, order=order)).bitwise_equal(p)


def test_paramset_rejects_wrong_names(model):
    bad = dict(model.tensors)
    bad.pop("head.bias")
    with pytest.raises(ArchitectureError):
        ParamSet(model.arch, bad)
