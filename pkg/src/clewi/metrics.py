"""Continual-learning metrics.

``A[j, t]`` is the test accuracy on task ``t`` after training task ``j``
(both 0-based). ``K`` below is the number of tasks trained so far, so the
latest row is ``A[K - 1]``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, eval_batches
from .models import ParamSet, forward


def predict(params: ParamSet, ds: Dataset, batch_size: int = 256) -> np.ndarray:
    """Argmax over all class logits (no task identity)."""
    if len(ds) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([forward(params, x, "eval").data.argmax(axis=1) for x, _ in eval_batches(ds, batch_size)])


def accuracy(params: ParamSet, ds: Dataset) -> float:
    if len(ds) == 0:
        return float("nan")
    return float(np.mean(predict(params, ds) == ds.y))


def evaluate(params: ParamSet, test_sets: Sequence[Dataset]) -> np.ndarray:
    """One row of the accuracy matrix: accuracy on each task's test set."""
    return np.array([accuracy(params, ds) for ds in test_sets])


def dataset_loss(params: ParamSet, ds: Dataset, batch_size: int = 256) -> float:
    """Mean cross-entropy over ``ds`` in eval mode."""
    total = 0.0
    for x, y in eval_batches(ds, batch_size):
        total += T.softmax_cross_entropy(forward(params, x, "eval"), y).item() * len(y)
    return total / len(ds)


def final_acc(A: np.ndarray, K: int) -> float:
    """Unweighted mean accuracy over the first ``K`` tasks after task ``K``."""
    return float(np.mean(np.asarray(A)[K - 1, :K]))


def last_task_acc(A: np.ndarray, K: int) -> float:
    return float(np.asarray(A)[K - 1, K - 1])


def forgetting_measure(A: np.ndarray, K: int) -> float:
    """Mean over earlier tasks of (best accuracy since learning it - current accuracy)."""
    if K <= 1:
        return 0.0
    A = np.asarray(A)
    drops = [A[t:K, t].max() - A[K - 1, t] for t in range(K - 1)]
    return float(np.mean(drops))


def loss_forgetting(params: ParamSet, reference_losses: Sequence[float], datasets: Sequence[Dataset]) -> float:
    """Summed loss increase on earlier tasks relative to the loss each task
    had right after it was learned (``reference_losses[t]``)."""
    if len(reference_losses) != len(datasets):
        raise ValueError("need one reference loss per dataset")
    return float(sum(dataset_loss(params, ds) - ref for ds, ref in zip(datasets, reference_losses)))
