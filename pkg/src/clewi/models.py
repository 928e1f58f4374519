"""Desk-scale model zoo: parameter layouts, forward passes and permutation metadata.

Three architectures are available:

``small-mlp``
    two hidden ReLU layers, no batch norm.
``small-convnet``
    three conv -> BN -> ReLU stages with average pooling, then a linear head.
``small-resnet``
    conv stem and two identity-shortcut residual blocks on one channel width,
    so every feature map on the skip path shares a single permutation group.

All of them emit logits over every class of the stream (single shared head).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

from . import tensor as T

ARCHS = ("small-mlp", "small-convnet", "small-resnet")

MLP_HIDDEN = 64
CONVNET_CHANNELS = (16, 32, 64)
RESNET_CHANNELS = 16

RUNNING_SUFFIXES = (".running_mean", ".running_var")


class ArchitectureError(ValueError):
    """Unknown architecture id or invalid architecture parameters."""


@dataclass(frozen=True)
class ModelArch:
    arch_id: str
    input_shape: tuple
    num_classes: int
    width: int = 1

    def __post_init__(self):
        if self.arch_id not in ARCHS:
            raise ArchitectureError(f"unknown architecture {self.arch_id!r}; expected one of {ARCHS}")
        if self.width < 1:
            raise ArchitectureError(f"width multiplier must be >= 1, got {self.width}")
        if self.num_classes < 1:
            raise ArchitectureError("num_classes must be positive")
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.arch_id != "small-mlp" and len(self.input_shape) != 3:
            raise ArchitectureError(f"{self.arch_id} needs (C, H, W) inputs, got {self.input_shape}")

    @property
    def has_batchnorm(self) -> bool:
        return self.arch_id != "small-mlp"

    def to_dict(self) -> dict:
        return {
            "arch_id": self.arch_id,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelArch":
        return cls(d["arch_id"], tuple(d["input_shape"]), int(d["num_classes"]), int(d["width"]))


# ---------------------------------------------------------------------------
# layouts


def _bn_entries(prefix: str, c: int) -> list:
    return [
        (f"{prefix}.gamma", (c,)),
        (f"{prefix}.beta", (c,)),
        (f"{prefix}.running_mean", (c,)),
        (f"{prefix}.running_var", (c,)),
    ]


def layout(arch: ModelArch) -> list[tuple[str, tuple]]:
    """Ordered ``(name, shape)`` list of every tensor in a ParamSet of ``arch``."""
    w, k = arch.width, arch.num_classes
    if arch.arch_id == "small-mlp":
        d = int(np.prod(arch.input_shape))
        h = MLP_HIDDEN * w
        return [
            ("fc1.weight", (h, d)), ("fc1.bias", (h,)),
            ("fc2.weight", (h, h)), ("fc2.bias", (h,)),
            ("head.weight", (k, h)), ("head.bias", (k,)),
        ]
    cin = arch.input_shape[0]
    if arch.arch_id == "small-convnet":
        c1, c2, c3 = (c * w for c in CONVNET_CHANNELS)
        out = [("conv1.weight", (c1, cin, 3, 3))] + _bn_entries("bn1", c1)
        out += [("conv2.weight", (c2, c1, 3, 3))] + _bn_entries("bn2", c2)
        out += [("conv3.weight", (c3, c2, 3, 3))] + _bn_entries("bn3", c3)
        out += [("head.weight", (k, c3)), ("head.bias", (k,))]
        return out
    c = RESNET_CHANNELS * w
    out = [("stem.conv.weight", (c, cin, 3, 3))] + _bn_entries("stem.bn", c)
    for b in ("block1", "block2"):
        out += [(f"{b}.conv_a.weight", (c, c, 3, 3))] + _bn_entries(f"{b}.bn_a", c)
        out += [(f"{b}.conv_b.weight", (c, c, 3, 3))] + _bn_entries(f"{b}.bn_b", c)
    out += [("head.weight", (k, c)), ("head.bias", (k,))]
    return out


def is_running_stat(name: str) -> bool:
    return name.endswith(RUNNING_SUFFIXES)


# ---------------------------------------------------------------------------
# parameter sets


class ParamSet:
    """Ordered name -> array map for one network, including BN running statistics.

    Treated as a value: operations that change weights return a new ParamSet
    (see :meth:`copy`). Training code owns its copy and may replace entries.
    """

    def __init__(self, arch: ModelArch, tensors: Mapping[str, np.ndarray]):
        self.arch = arch
        expected = layout(arch)
        if set(tensors) != {n for n, _ in expected}:
            missing = sorted({n for n, _ in expected} - set(tensors))
            extra = sorted(set(tensors) - {n for n, _ in expected})
            raise ArchitectureError(f"parameter names do not match {arch.arch_id}: missing={missing} extra={extra}")
        self.tensors: dict[str, np.ndarray] = {}
        for name, shape in expected:
            arr = np.asarray(tensors[name])
            if arr.shape != shape:
                raise ArchitectureError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self.tensors:
            raise KeyError(name)
        value = np.asarray(value, dtype=self.tensors[name].dtype)
        if value.shape != self.tensors[name].shape:
            raise ArchitectureError(f"{name}: shape {value.shape} != {self.tensors[name].shape}")
        self.tensors[name] = value

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable_names(self) -> list[str]:
        return [n for n in self.tensors if not is_running_stat(n)]

    def copy(self) -> "ParamSet":
        return ParamSet(self.arch, {n: a.copy() for n, a in self.tensors.items()})

    def astype(self, dtype) -> "ParamSet":
        return ParamSet(self.arch, {n: a.astype(dtype) for n, a in self.tensors.items()})

    def leaves(self) -> dict[str, T.Tensor]:
        """Fresh gradient-tracking tensors for every trainable parameter."""
        return {n: T.Tensor(self.tensors[n], requires_grad=True, name=n) for n in self.trainable_names()}

    def flat_trainable(self) -> np.ndarray:
        return np.concatenate([self.tensors[n].ravel() for n in self.trainable_names()])

    def bitwise_equal(self, other: "ParamSet") -> bool:
        if self.arch != other.arch or list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.dtype == b.dtype and a.tobytes() == b.tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )

    @property
    def has_batchnorm(self) -> bool:
        return self.arch.has_batchnorm

    def __repr__(self) -> str:
        return f"ParamSet({self.arch.arch_id}, width={self.arch.width}, tensors={len(self.tensors)})"


def build_model(arch: ModelArch, seed: int) -> ParamSet:
    """Kaiming fan-in initialization; BN gamma=1, beta=0, running stats (0, 1)."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in layout(arch):
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            gain = 1.0 if name.startswith("head.") else 2.0
            arr = rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)
        elif name.endswith((".gamma", ".running_var")):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        tensors[name] = arr.astype(np.float32)
    return ParamSet(arch, tensors)


def param_count(params) -> int:
    """Number of trainable scalars; BN running statistics are excluded.

    Accepts a :class:`ParamSet` or any iterable of ``(name, shape)`` pairs.
    """
    if isinstance(params, ParamSet):
        pairs = ((n, a.shape) for n, a in params.items())
    else:
        pairs = params
    return int(sum(int(np.prod(s)) for n, s in pairs if not is_running_stat(n)))


def resnet18_reference_shapes(num_classes: int = 100, nf: int = 64, in_channels: int = 3) -> list[tuple[str, tuple]]:
    """Shape table of the reduced ResNet18 used in split-CIFAR benchmarks.

    Documentation only: this network is never built. 3x3 stem without bias,
    four stages of two basic blocks with widths nf*(1, 2, 4, 8), 1x1
    projection shortcuts where the shape changes, linear classifier.
    """
    shapes = [("conv1.weight", (nf, in_channels, 3, 3))] + _bn_entries("bn1", nf)
    cin = nf
    for stage, mult in enumerate((1, 2, 4, 8), start=1):
        cout = nf * mult
        for blk in range(2):
            stride = 2 if stage > 1 and blk == 0 else 1
            p = f"layer{stage}.{blk}"
            shapes += [(f"{p}.conv1.weight", (cout, cin, 3, 3))] + _bn_entries(f"{p}.bn1", cout)
            shapes += [(f"{p}.conv2.weight", (cout, cout, 3, 3))] + _bn_entries(f"{p}.bn2", cout)
            if stride != 1 or cin != cout:
                shapes += [(f"{p}.shortcut.weight", (cout, cin, 1, 1))] + _bn_entries(f"{p}.shortcut_bn", cout)
            cin = cout
    shapes += [("linear.weight", (num_classes, cin)), ("linear.bias", (num_classes,))]
    return shapes


# ---------------------------------------------------------------------------
# forward


class _Ctx:
    def __init__(self, params: ParamSet, mode: str, leaves, hooks, bn_counts):
        self.params = params
        self.mode = mode
        self.leaves = leaves
        self.hooks = hooks
        self.bn_counts = bn_counts

    def t(self, name: str) -> T.Tensor:
        if self.leaves is not None and name in self.leaves:
            return self.leaves[name]
        return T.Tensor(self.params[name])

    def hook(self, name: str, x: T.Tensor) -> None:
        if self.hooks is not None:
            self.hooks[name] = x.data

    def bn(self, prefix: str, x: T.Tensor) -> T.Tensor:
        p = self.params
        counts = self.bn_counts if self.bn_counts is not None else {}
        out, rm, rv, n = T.batchnorm_forward(
            x, self.t(f"{prefix}.gamma"), self.t(f"{prefix}.beta"),
            p[f"{prefix}.running_mean"], p[f"{prefix}.running_var"],
            mode=self.mode, count=counts.get(prefix, 0),
        )
        if self.mode != "eval":
            p[f"{prefix}.running_mean"] = rm
            p[f"{prefix}.running_var"] = rv
            if self.mode == "collect":
                counts[prefix] = n
        return out


def forward(
    params: ParamSet,
    x,
    mode: str = "eval",
    *,
    leaves: Optional[Mapping[str, T.Tensor]] = None,
    hooks: Optional[dict] = None,
    bn_counts: Optional[dict] = None,
) -> T.Tensor:
    """Logits for a batch ``x``.

    ``train`` and ``collect`` modes write updated BN running statistics back
    into ``params``. Pass ``leaves`` (from :meth:`ParamSet.leaves`) inside a
    GradTape to obtain gradients, ``hooks`` to capture intermediate feature
    maps, and ``bn_counts`` to accumulate collect-mode sample counts.
    """
    if mode not in ("train", "eval", "collect"):
        raise ValueError(f"unknown mode {mode!r}")
    arch = params.arch
    xd = x.data if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float32)
    if tuple(xd.shape[1:]) != arch.input_shape and not (
        arch.arch_id == "small-mlp" and int(np.prod(xd.shape[1:])) == int(np.prod(arch.input_shape))
    ):
        raise T.ShapeError(f"input shape {xd.shape[1:]} does not match {arch.input_shape}")
    xt = x if isinstance(x, T.Tensor) else T.Tensor(xd)
    ctx = _Ctx(params, mode, leaves, hooks, bn_counts)
    if arch.arch_id == "small-mlp":
        return _mlp(ctx, xt)
    if arch.arch_id == "small-convnet":
        return _convnet(ctx, xt)
    return _resnet(ctx, xt)


def _mlp(ctx: _Ctx, x: T.Tensor) -> T.Tensor:
    h = T.reshape(x, (x.shape[0], -1)) if x.ndim != 2 else x
    for layer in ("fc1", "fc2"):
        h = T.linear(h, ctx.t(f"{layer}.weight"), ctx.t(f"{layer}.bias"))
        ctx.hook(f"{layer}.pre", h)
        h = T.relu(h)
        ctx.hook(f"{layer}.post", h)
    return T.linear(h, ctx.t("head.weight"), ctx.t("head.bias"))


def _convnet(ctx: _Ctx, x: T.Tensor) -> T.Tensor:
    h = x
    for i in (1, 2, 3):
        h = T.conv2d(h, ctx.t(f"conv{i}.weight"), stride=1, pad=1)
        h = T.relu(ctx.bn(f"bn{i}", h))
        ctx.hook(f"conv{i}.post", h)
        if i < 3 and h.shape[2] % 2 == 0 and h.shape[3] % 2 == 0:
            h = T.avgpool2d(h, 2)
    h = T.global_avgpool(h)
    return T.linear(h, ctx.t("head.weight"), ctx.t("head.bias"))


def _resnet(ctx: _Ctx, x: T.Tensor) -> T.Tensor:
    h = T.conv2d(x, ctx.t("stem.conv.weight"), stride=1, pad=1)
    h = T.relu(ctx.bn("stem.bn", h))
    ctx.hook("stem.post", h)
    for b in ("block1", "block2"):
        z = T.conv2d(h, ctx.t(f"{b}.conv_a.weight"), stride=1, pad=1)
        z = T.relu(ctx.bn(f"{b}.bn_a", z))
        ctx.hook(f"{b}.inner", z)
        z = T.conv2d(z, ctx.t(f"{b}.conv_b.weight"), stride=1, pad=1)
        z = ctx.bn(f"{b}.bn_b", z)
        h = T.relu(T.add(z, h))
        ctx.hook(f"{b}.post", h)
        if b == "block1" and h.shape[2] % 2 == 0 and h.shape[3] % 2 == 0:
            h = T.avgpool2d(h, 2)
    h = T.global_avgpool(h)
    return T.linear(h, ctx.t("head.weight"), ctx.t("head.bias"))


# ---------------------------------------------------------------------------
# permutation metadata


@dataclass(frozen=True)
class PermGroup:
    """Axes that must be permuted together, plus where to observe the group.

    ``hooks`` are post-activation feature maps used for correlation matching.
    ``producer``/``pre_hook`` name the affine layer whose output the group is
    (no-BN networks only) and the hook holding its pre-activation output.
    """

    name: str
    size: int
    axes: tuple
    hooks: tuple
    producer: Optional[str] = None
    pre_hook: Optional[str] = None


@dataclass(frozen=True)
class PermutationSpec:
    groups: tuple
    fixed: tuple = field(default=())

    def group(self, name: str) -> PermGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [g.name for g in self.groups]


def _bn_axes(prefix: str) -> list:
    return [(f"{prefix}.{s}", 0) for s in ("gamma", "beta", "running_mean", "running_var")]


def permutation_spec_of(arch: ModelArch) -> PermutationSpec:
    k_in = "fc1.weight" if arch.arch_id == "small-mlp" else (
        "conv1.weight" if arch.arch_id == "small-convnet" else "stem.conv.weight")
    fixed = ((k_in, 1), ("head.weight", 0), ("head.bias", 0))
    shapes = dict(layout(arch))

    if arch.arch_id == "small-mlp":
        h = shapes["fc1.bias"][0]
        groups = (
            PermGroup("fc1", h, (("fc1.weight", 0), ("fc1.bias", 0), ("fc2.weight", 1)),
                      ("fc1.post",), producer="fc1", pre_hook="fc1.pre"),
            PermGroup("fc2", h, (("fc2.weight", 0), ("fc2.bias", 0), ("head.weight", 1)),
                      ("fc2.post",), producer="fc2", pre_hook="fc2.pre"),
        )
        return PermutationSpec(groups, fixed)

    if arch.arch_id == "small-convnet":
        groups = []
        for i in (1, 2, 3):
            consumer = (f"conv{i + 1}.weight", 1) if i < 3 else ("head.weight", 1)
            axes = ((f"conv{i}.weight", 0), *_bn_axes(f"bn{i}"), consumer)
            groups.append(PermGroup(f"conv{i}", shapes[f"bn{i}.gamma"][0], axes, (f"conv{i}.post",)))
        return PermutationSpec(tuple(groups), fixed)

    c = shapes["stem.bn.gamma"][0]
    res_axes = [("stem.conv.weight", 0), *_bn_axes("stem.bn")]
    groups = []
    for b in ("block1", "block2"):
        res_axes += [(f"{b}.conv_a.weight", 1), (f"{b}.conv_b.weight", 0), *_bn_axes(f"{b}.bn_b")]
        inner = ((f"{b}.conv_a.weight", 0), *_bn_axes(f"{b}.bn_a"), (f"{b}.conv_b.weight", 1))
        groups.append(PermGroup(f"{b}.inner", c, inner, (f"{b}.inner",)))
    res_axes.append(("head.weight", 1))
    res = PermGroup("residual", c, tuple(res_axes), ("stem.post", "block1.post", "block2.post"))
    return PermutationSpec((res, *groups), fixed)


def hook_names(spec: PermutationSpec) -> Sequence[str]:
    return [h for g in spec.groups for h in g.hooks]
