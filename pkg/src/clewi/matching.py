"""Activation-based permutation alignment, weight interpolation and repair.

After each task the freshly trained network ``theta`` is merged with the
network from before the task ``theta_p``:

1. channels of ``theta_p`` are reordered to best correlate with ``theta`` on
   buffer data (one linear assignment per permutation group),
2. the aligned weights are averaged, ``(1 - alpha) * theta + alpha * pi(theta_p)``,
3. feature-map statistics of the merged network are restored, either by
   recomputing BN running statistics on the buffer or, for networks without
   BN, by folding a per-channel affine correction into the producing layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .buffer import EmptyBufferError, MemoryBuffer
from .lsap import solve_lsap
from .models import ParamSet, PermutationSpec, forward

# Feature maps are observed after the group's nonlinearity ("post") for
# matching; "pre" (affine producer output) is used by repair_affine.
MATCH_HOOK = "post"
ACTIVATION_BATCH = 32
_ZERO_VAR = 1e-12


class MatchingError(ValueError):
    """Incompatible inputs to a matching or merge operation."""


class Permutation:
    """Per-group index arrays; ``perm[g][i]`` is the source channel placed at ``i``."""

    def __init__(self, perms: Mapping[str, np.ndarray]):
        self.perms = {}
        for g, p in perms.items():
            p = np.asarray(p, dtype=np.int64)
            if not np.array_equal(np.sort(p), np.arange(len(p))):
                raise MatchingError(f"group {g!r}: not a bijection")
            self.perms[g] = p

    def __getitem__(self, group: str) -> np.ndarray:
        return self.perms[group]

    def __contains__(self, group: str) -> bool:
        return group in self.perms

    def inverse(self) -> "Permutation":
        return Permutation({g: np.argsort(p) for g, p in self.perms.items()})

    def is_identity(self) -> bool:
        return all(np.array_equal(p, np.arange(len(p))) for p in self.perms.values())

    @classmethod
    def identity(cls, spec: PermutationSpec) -> "Permutation":
        return cls({g.name: np.arange(g.size) for g in spec.groups})

    @classmethod
    def random(cls, spec: PermutationSpec, rng) -> "Permutation":
        rng = np.random.default_rng(rng)
        return cls({g.name: rng.permutation(g.size) for g in spec.groups})

    def __eq__(self, other) -> bool:
        return (isinstance(other, Permutation) and self.perms.keys() == other.perms.keys()
                and all(np.array_equal(p, other.perms[g]) for g, p in self.perms.items()))

    def __repr__(self) -> str:
        return f"Permutation({ {g: p.tolist() for g, p in self.perms.items()} })"


@dataclass
class GroupStats:
    mean_a: np.ndarray
    var_a: np.ndarray
    mean_b: np.ndarray
    var_b: np.ndarray
    corr: np.ndarray
    count: int


@dataclass
class ActivationStats:
    groups: dict
    hook: str

    def __getitem__(self, group: str) -> GroupStats:
        return self.groups[group]


@dataclass
class InterpolationResult:
    params: ParamSet
    alpha: float
    permutation: Optional[Permutation]
    diagnostics: dict = field(default_factory=dict)


def _channels_last(a: np.ndarray) -> np.ndarray:
    if a.ndim == 2:
        return a
    return np.moveaxis(a, 1, -1).reshape(-1, a.shape[1])


def _hooks_for(group, hook: str) -> tuple:
    if hook == "post":
        return group.hooks
    if group.pre_hook is None:
        raise MatchingError(f"group {group.name!r} has no pre-activation hook")
    return (group.pre_hook,)


def _check_pair(theta: ParamSet, theta_p: ParamSet) -> None:
    if theta.arch != theta_p.arch:
        raise MatchingError("networks have different architectures")


def collect_activations(theta: ParamSet, theta_p: ParamSet, buffer: MemoryBuffer,
                        spec: PermutationSpec, batch_size: int = ACTIVATION_BATCH,
                        hook: str = MATCH_HOOK) -> ActivationStats:
    """Channel moments of both networks and their C x C Pearson correlation.

    Rows of ``corr`` index channels of ``theta``, columns channels of
    ``theta_p``. Zero-variance channels get correlation 0.
    """
    _check_pair(theta, theta_p)
    if len(buffer) == 0:
        raise EmptyBufferError("cannot collect activations from an empty buffer")
    acc = {g.name: [0, np.zeros(g.size), np.zeros(g.size), np.zeros(g.size), np.zeros(g.size),
                    np.zeros((g.size, g.size))] for g in spec.groups}
    for xb, _ in buffer.iterate_all(batch_size):
        ha, hb = {}, {}
        forward(theta, xb, "eval", hooks=ha)
        forward(theta_p, xb, "eval", hooks=hb)
        for g in spec.groups:
            s = acc[g.name]
            for h in _hooks_for(g, hook):
                a = _channels_last(ha[h]).astype(np.float64)
                b = _channels_last(hb[h]).astype(np.float64)
                s[0] += a.shape[0]
                s[1] += a.sum(0)
                s[2] += b.sum(0)
                s[3] += (a * a).sum(0)
                s[4] += (b * b).sum(0)
                s[5] += a.T @ b
    out = {}
    for g in spec.groups:
        n, sa, sb, ssa, ssb, cross = acc[g.name]
        ma, mb = sa / n, sb / n
        va = np.maximum(ssa / n - ma ** 2, 0.0)
        vb = np.maximum(ssb / n - mb ** 2, 0.0)
        va[va <= _ZERO_VAR * (1.0 + ma ** 2)] = 0.0
        vb[vb <= _ZERO_VAR * (1.0 + mb ** 2)] = 0.0
        cov = cross / n - np.outer(ma, mb)
        denom = np.outer(np.sqrt(va), np.sqrt(vb))
        with np.errstate(divide="ignore", invalid="ignore"):
            corr = np.where(denom > 0, cov / denom, 0.0)
        out[g.name] = GroupStats(ma, va, mb, vb, np.clip(corr, -1.0, 1.0), n)
    return ActivationStats(out, hook)


def permutation_from_stats(stats: ActivationStats, spec: PermutationSpec) -> Permutation:
    return Permutation({g.name: solve_lsap(stats[g.name].corr, maximize=True).perm for g in spec.groups})


def calc_permutation(theta: ParamSet, theta_p: ParamSet, buffer: MemoryBuffer,
                     spec: PermutationSpec, batch_size: int = ACTIVATION_BATCH) -> Permutation:
    """Reindexing of ``theta_p``'s channels that maximizes matched correlation with ``theta``."""
    return permutation_from_stats(collect_activations(theta, theta_p, buffer, spec, batch_size), spec)


def apply_permutation(params: ParamSet, pi: Permutation, spec: PermutationSpec) -> ParamSet:
    """Reorder every axis of every group; the network function is unchanged."""
    out = params.copy()
    for g in spec.groups:
        if g.name not in pi:
            raise MatchingError(f"permutation does not cover group {g.name!r}")
        p = pi[g.name]
        if len(p) != g.size:
            raise MatchingError(f"group {g.name!r}: permutation of length {len(p)}, expected {g.size}")
        for name, axis in g.axes:
            out.tensors[name] = np.take(out.tensors[name], p, axis=axis)
    return out


def interpolate(theta: ParamSet, theta_p: ParamSet, alpha: float) -> ParamSet:
    """Element-wise ``(1 - alpha) * theta + alpha * theta_p`` over all tensors."""
    _check_pair(theta, theta_p)
    if not 0.0 <= alpha <= 1.0:
        raise MatchingError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return theta.copy()
    if alpha == 1.0:
        return theta_p.copy()
    out = {}
    for name, a in theta.items():
        b = theta_p[name]
        out[name] = ((1.0 - alpha) * a.astype(np.float64) + alpha * b.astype(np.float64)).astype(a.dtype)
    return ParamSet(theta.arch, out)


def update_batchnorm(params: ParamSet, buffer: MemoryBuffer, batch_size: int = ACTIVATION_BATCH) -> ParamSet:
    """Reset BN running statistics and re-estimate them in one pass over the buffer."""
    if len(buffer) == 0:
        raise EmptyBufferError("cannot recompute batch-norm statistics from an empty buffer")
    out = params.copy()
    for name in out.names():
        if name.endswith(".running_mean"):
            out.tensors[name] = np.zeros_like(out[name])
        elif name.endswith(".running_var"):
            out.tensors[name] = np.ones_like(out[name])
    counts: dict = {}
    for xb, _ in buffer.iterate_all(batch_size):
        forward(out, xb, "collect", bn_counts=counts)
    return out


def _group_moments(params: ParamSet, buffer: MemoryBuffer, hook: str, batch_size: int) -> tuple:
    n, s, ss = 0, 0.0, 0.0
    for xb, _ in buffer.iterate_all(batch_size):
        hooks = {}
        forward(params, xb, "eval", hooks=hooks)
        a = _channels_last(hooks[hook]).astype(np.float64)
        n += a.shape[0]
        s = s + a.sum(0)
        ss = ss + (a * a).sum(0)
    mean = s / n
    return mean, np.maximum(ss / n - mean ** 2, 0.0)


def repair_affine(params: ParamSet, stats: ActivationStats, alpha: float, buffer: MemoryBuffer,
                  spec: PermutationSpec, batch_size: int = ACTIVATION_BATCH) -> ParamSet:
    """Rescale each producer's outputs so its channel moments on buffer data
    equal the alpha-weighted moments of the two endpoints.

    ``stats`` must hold pre-activation moments (``hook="pre"``) of the
    reference network (``mean_a``/``var_a``) and the permuted previous network
    (``mean_b``/``var_b``). Groups are corrected in forward order, each after
    the earlier ones, so later targets are measured on repaired inputs.
    """
    if params.has_batchnorm:
        raise MatchingError("repair_affine is for networks without batch norm; use update_batchnorm")
    if stats.hook != "pre":
        raise MatchingError("repair_affine needs pre-activation statistics")
    out = params.copy()
    for g in spec.groups:
        st = stats[g.name]
        target_mean = (1.0 - alpha) * st.mean_a + alpha * st.mean_b
        target_var = (1.0 - alpha) * st.var_a + alpha * st.var_b
        mean, var = _group_moments(out, buffer, g.pre_hook, batch_size)
        ok = (var > _ZERO_VAR * (1.0 + mean ** 2)) & (target_var > 0)
        scale = np.ones_like(mean)
        scale[ok] = np.sqrt(target_var[ok] / var[ok])
        shift = target_mean - scale * mean
        w = out[f"{g.producer}.weight"].astype(np.float64)
        b = out[f"{g.producer}.bias"].astype(np.float64)
        out[f"{g.producer}.weight"] = w * scale[:, None]
        out[f"{g.producer}.bias"] = b * scale + shift
    return out


def mean_matched_correlation(stats: ActivationStats, pi: Permutation) -> dict:
    return {g: float(np.mean(st.corr[np.arange(len(pi[g])), pi[g]])) for g, st in stats.groups.items()}


def repair(params: ParamSet, theta: ParamSet, theta_p_aligned: ParamSet, alpha: float,
           buffer: MemoryBuffer, spec: PermutationSpec, batch_size: int = ACTIVATION_BATCH) -> ParamSet:
    """BN reset for BN networks, affine moment correction otherwise."""
    if params.has_batchnorm:
        return update_batchnorm(params, buffer, batch_size)
    pre = collect_activations(theta, theta_p_aligned, buffer, spec, batch_size, hook="pre")
    return repair_affine(params, pre, alpha, buffer, spec, batch_size)


def clewi_task_step(theta: ParamSet, theta_p: Optional[ParamSet], buffer: MemoryBuffer, alpha: float,
                    spec: PermutationSpec, batch_size: int = ACTIVATION_BATCH) -> InterpolationResult:
    """Align ``theta_p`` to ``theta``, interpolate, and repair.

    With no previous network (first task) ``theta`` is returned unchanged.
    The caller keeps the result as the next task's previous network.
    """
    if theta_p is None:
        return InterpolationResult(theta.copy(), alpha, None, {})
    stats = collect_activations(theta, theta_p, buffer, spec, batch_size)
    pi = permutation_from_stats(stats, spec)
    aligned = apply_permutation(theta_p, pi, spec)
    merged = interpolate(theta, aligned, alpha)
    merged = repair(merged, theta, aligned, alpha, buffer, spec, batch_size)
    return InterpolationResult(merged, alpha, pi, mean_matched_correlation(stats, pi))

