"""Config-driven experiment runs and the artifacts they emit.

``run`` writes into the configured output directory:

results.csv
    ``run_id,seed,after_task,metric,value``; one row per metric after every
    task. Metrics: ``acc`` (mean accuracy over tasks seen so far),
    ``acc_last`` (accuracy on the newest task), ``fm`` (forgetting measure),
    ``loss_forgetting`` and ``acc_t<j>`` for every task ``j``.
summary.json
    mean and standard deviation over seeds of the final ``acc``,
    ``acc_last`` and ``fm``.
diagnostics.csv
    mean matched activation correlation per permutation group after every
    interpolation step.
timings.csv
    wall-clock seconds per task (kept out of results.csv so that file is
    byte-identical across repeated runs).
checkpoints/
    the network after every task.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .buffer import MemoryBuffer
from .checkpoint import save_checkpoint
from .config import ExperimentConfig, to_ini
from .data import Dataset, TaskStream, load_idx, split_by_class, synth_blobs, train_test_split
from .matching import (apply_permutation, calc_permutation, clewi_task_step, interpolate, repair)
from .methods import train_task
from .metrics import (accuracy, dataset_loss, evaluate, final_acc, forgetting_measure, last_task_acc,
                      loss_forgetting)
from .models import ModelArch, ParamSet, PermutationSpec, build_model, param_count, permutation_spec_of

log = logging.getLogger(__name__)

RESULTS_HEADER = ("run_id", "seed", "after_task", "metric", "value")
SUMMARY_METRICS = ("acc", "acc_last", "fm")
INTERP_GRID = tuple(round(0.05 * i, 2) for i in range(21))

# bytes per stored image at 8 bits per channel
IMAGE_SHAPES = {
    "cifar10": (32, 32, 3),
    "cifar100": (32, 32, 3),
    "tiny-imagenet": (64, 64, 3),
    "idx": (28, 28, 1),
    "split-synth-10": (32,),
}
REFERENCE_PARAM_COUNTS = {"resnet18": 11220132, "mobilenetv2": 2351972}


@dataclass
class SeedResult:
    seed: int
    acc_matrix: np.ndarray
    rows: list
    diagnostics: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    interp_rows: list = field(default_factory=list)
    events: list = field(default_factory=list)
    final_params: Optional[ParamSet] = None


def build_stream(cfg: ExperimentConfig, seed: int) -> TaskStream:
    d = cfg.data
    if d.dataset == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not Path(getattr(d, key)).exists():
                raise FileNotFoundError(f"data.{key}: {getattr(d, key)} does not exist")
        train = load_idx(d.train_images, d.train_labels, mean=d.mean, std=d.std)
        test = load_idx(d.test_images, d.test_labels, mean=d.mean, std=d.std)
        k = max(train.num_classes, test.num_classes)
        train, test = Dataset(train.x, train.y, k), Dataset(test.x, test.y, k)
    else:
        k = 10 if d.dataset == "split-synth-10" else d.num_classes
        full = synth_blobs(k, d.dim, d.n_per_class, d.seed, d.separation, d.noise)
        train, test = train_test_split(full, d.seed)
    return split_by_class(train, test, d.num_tasks, seed)


def _fmt(v: float) -> str:
    return repr(float(v))


def run_seed(cfg: ExperimentConfig, seed: int, checkpoint_dir: Optional[Path] = None,
             interp_alphas: Optional[Sequence[float]] = None) -> SeedResult:
    """Train one seed through the whole stream; after each task the network is
    merged with the previous one when interpolation is enabled."""
    stream = build_stream(cfg, seed)
    arch = ModelArch(cfg.model.arch, stream[0].train.input_shape, stream.num_classes, cfg.model.width)
    spec = permutation_spec_of(arch)
    theta = build_model(arch, seed)
    tcfg = cfg.train_config(seed)
    buffer = None
    if tcfg.method != "joint":
        buffer = MemoryBuffer(cfg.buffer.capacity, seed, store_logits=tcfg.method == "derpp")
    n = len(stream)
    A = np.zeros((n, n))
    ref_losses: list = []
    res = SeedResult(seed, A, [])
    theta_prev = None
    run_id = cfg.run_id
    for t, task in enumerate(stream):
        t0 = time.perf_counter()
        seen = [stream[j].train for j in range(t + 1)]
        report = train_task(theta, task.train, buffer, tcfg, seen=seen)
        theta = report.params
        res.events.append(("train", t))
        if cfg.clewi.enabled:
            if theta_prev is not None:
                if interp_alphas is not None:
                    tests = [stream[j].test for j in range(t + 1)]
                    for task_id, alpha, acc in interp_plot(theta, theta_prev, buffer, spec, interp_alphas, tests):
                        res.interp_rows.append((t, task_id, alpha, acc))
                step = clewi_task_step(theta, theta_prev, buffer, cfg.alpha, spec, cfg.clewi.batch_size)
                theta = step.params
                res.events.append(("clewi", t))
                for group, corr in step.diagnostics.items():
                    res.diagnostics.append((run_id, seed, t, group, corr))
            theta_prev = theta
        A[t] = evaluate(theta, [tk.test for tk in stream])
        ref_losses.append(dataset_loss(theta, task.test))
        lf = loss_forgetting(theta, ref_losses[:t], [stream[j].test for j in range(t)])
        k = t + 1
        metrics = [("acc", final_acc(A, k)), ("acc_last", last_task_acc(A, k)),
                   ("fm", forgetting_measure(A, k)), ("loss_forgetting", lf)]
        metrics += [(f"acc_t{j}", A[t, j]) for j in range(n)]
        for name, value in metrics:
            if not math.isfinite(value):
                raise ValueError(f"non-finite metric {name} after task {t}")
            res.rows.append((run_id, seed, t, name, value))
        res.timings.append((run_id, seed, t, time.perf_counter() - t0))
        if checkpoint_dir is not None:
            checkpoint_dir.mkdir(parents=True, exist_ok=True)
            (checkpoint_dir / f"{run_id}_seed{seed}_task{t}.clwi").write_bytes(save_checkpoint(theta))
        log.info("%s seed=%d task=%d acc=%.4f fm=%.4f", run_id, seed, t, final_acc(A, k), forgetting_measure(A, k))
    res.final_params = theta
    return res


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def summarize(results: Sequence[SeedResult]) -> dict:
    out = {}
    for metric in SUMMARY_METRICS:
        vals = []
        for r in results:
            last = max(row[2] for row in r.rows)
            vals += [row[4] for row in r.rows if row[2] == last and row[3] == metric]
        out[metric] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "values": [float(v) for v in vals]}
    return out


@dataclass
class RunOutput:
    summary: dict
    seeds: list
    out_dir: Optional[Path]


def run(cfg: ExperimentConfig, out_dir: Optional[Path] = None, write: bool = True,
        interp_alphas: Optional[Sequence[float]] = None) -> RunOutput:
    """Run every seed and (optionally) write the artifacts listed above."""
    out_dir = Path(out_dir if out_dir is not None else cfg.experiment.out_dir)
    ckpt = out_dir / "checkpoints" if write else None
    seeds = []
    for seed in cfg.experiment.seeds:
        try:
            seeds.append(run_seed(cfg, seed, ckpt, interp_alphas))
        except Exception:
            if write and seeds:
                _write(cfg, out_dir, seeds)
            raise
    summary = summarize(seeds)
    if write:
        _write(cfg, out_dir, seeds)
    return RunOutput(summary, seeds, out_dir if write else None)


def _write(cfg: ExperimentConfig, out_dir: Path, seeds: list) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "results.csv").write_text(_csv([r for s in seeds for r in s.rows], RESULTS_HEADER))
    (out_dir / "diagnostics.csv").write_text(
        _csv([r for s in seeds for r in s.diagnostics], ("run_id", "seed", "after_task", "group", "mean_corr")))
    (out_dir / "timings.csv").write_text(
        _csv([r for s in seeds for r in s.timings], ("run_id", "seed", "after_task", "seconds")))
    (out_dir / "summary.json").write_text(json.dumps(
        {"run_id": cfg.run_id, "seeds": [s.seed for s in seeds], "metrics": summarize(seeds)},
        indent=2, sort_keys=True) + "\n")
    (out_dir / "config.ini").write_text(to_ini(cfg))


# ---------------------------------------------------------------------------
# sweeps and plots


def sweep_alpha(cfg: ExperimentConfig, alphas: Sequence[float], out_dir: Optional[Path] = None,
                write: bool = True) -> list[dict]:
    """One full interpolation run per alpha; returns rows of final mean metrics."""
    out_dir = Path(out_dir if out_dir is not None else cfg.experiment.out_dir)
    table = []
    for alpha in alphas:
        sub = cfg.replace(clewi__enabled=True, clewi__alpha=float(alpha))
        res = run(sub, out_dir / f"alpha_{alpha:g}", write=write)
        row = {"alpha": float(alpha)}
        for m in SUMMARY_METRICS:
            row[m] = res.summary[m]["mean"]
            row[f"{m}_std"] = res.summary[m]["std"]
        table.append(row)
    if write:
        _write_table(out_dir / "sweep_alpha.csv", table)
    return table


def width_sweep(cfg: ExperimentConfig, widths: Sequence[int], out_dir: Optional[Path] = None,
                write: bool = True) -> list[dict]:
    """One full run per width multiplier."""
    out_dir = Path(out_dir if out_dir is not None else cfg.experiment.out_dir)
    method = f"clewi+{cfg.train.method}" if cfg.clewi.enabled else cfg.train.method
    table = []
    for w in widths:
        sub = cfg.replace(model__width=int(w))
        res = run(sub, out_dir / f"width_{w}", write=write)
        stream = build_stream(sub, sub.experiment.seeds[0])
        arch = ModelArch(sub.model.arch, stream[0].train.input_shape, stream.num_classes, int(w))
        table.append({"width": int(w), "method": method, "params": param_count(build_model(arch, 0)),
                      "acc": res.summary["acc"]["mean"], "acc_std": res.summary["acc"]["std"]})
    if write:
        _write_table(out_dir / "width_sweep.csv", table)
    return table


def _write_table(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    header = list(rows[0]) if rows else []
    path.write_text(_csv([[r[h] for h in header] for r in rows], header))


def interp_plot(theta: ParamSet, theta_p: ParamSet, buffer: MemoryBuffer, spec: PermutationSpec,
                alphas: Sequence[float], test_sets: Sequence[Dataset]) -> list[tuple]:
    """Accuracy along the aligned interpolation path; nothing is mutated.

    Returns ``(task, alpha, accuracy)`` rows for every test set plus a
    ``"seen"`` row pooling all of them. The endpoints are the trained
    networks themselves (the previous one permuted), so the statistics repair
    is applied only strictly between them.
    """
    pi = calc_permutation(theta, theta_p, buffer, spec)
    aligned = apply_permutation(theta_p, pi, spec)
    pooled = Dataset.concat(list(test_sets))
    rows = []
    for alpha in alphas:
        merged = interpolate(theta, aligned, float(alpha))
        if 0.0 < alpha < 1.0:
            merged = repair(merged, theta, aligned, float(alpha), buffer, spec)
        for t, acc in enumerate(evaluate(merged, test_sets)):
            rows.append((t, float(alpha), float(acc)))
        rows.append(("seen", float(alpha), accuracy(merged, pooled)))
    return rows


def interp_plot_run(cfg: ExperimentConfig, alphas: Sequence[float] = INTERP_GRID,
                    out_dir: Optional[Path] = None) -> list[tuple]:
    """Train the first configured seed with interpolation enabled, emitting the
    interpolation curve at every task boundary into ``interp_plot.csv``."""
    out_dir = Path(out_dir if out_dir is not None else cfg.experiment.out_dir)
    sub = cfg.replace(clewi__enabled=True)
    res = run_seed(sub, sub.experiment.seeds[0], None, alphas)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "interp_plot.csv").write_text(_csv(res.interp_rows, ("after_task", "task", "alpha", "accuracy")))
    return res.interp_rows


def memory_budget(params: int, dataset: str, buffer_images: int) -> dict:
    """Express stored 32-bit weights as a number of extra 8-bit images."""
    if dataset not in IMAGE_SHAPES:
        raise KeyError(f"unknown dataset {dataset!r}; known: {sorted(IMAGE_SHAPES)}")
    weight_bytes = int(params) * 4
    image_bytes = int(np.prod(IMAGE_SHAPES[dataset]))
    equivalent = weight_bytes // image_bytes
    return {
        "params": int(params),
        "dataset": dataset,
        "weight_bytes": weight_bytes,
        "image_bytes": image_bytes,
        "equivalent_images": equivalent,
        "buffer_images": int(buffer_images),
        "er_equivalent_buffer": int(buffer_images) + equivalent,
    }
