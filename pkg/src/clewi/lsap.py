"""Linear sum assignment on square cost matrices.

Shortest-augmenting-path Hungarian method with row/column potentials,
O(C^3) in float64. Among all optimal assignments the lexicographically
smallest permutation is returned, so results are reproducible when the
cost matrix has ties.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Assignment:
    perm: np.ndarray
    value: float


def _hungarian_min(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Minimum-cost assignment. Returns (row->col, u, v) with a - u - v >= 0."""
    n = a.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    row_to_col[p[1:] - 1] = np.arange(n)
    return row_to_col, u[1:], v[1:]


def _lexicographic(tight: np.ndarray, match: np.ndarray) -> np.ndarray:
    """Smallest permutation (lexicographic) among perfect matchings of ``tight``,
    starting from the perfect matching ``match``."""
    n = len(match)
    match = match.copy()
    owner = np.empty(n, dtype=np.int64)
    owner[match] = np.arange(n)
    adj = [np.flatnonzero(tight[i]) for i in range(n)]
    for i in range(n):
        for c in adj[i]:
            if c == match[i]:
                break
            r = owner[c]
            if r < i:
                continue
            # move row r off column c onto match[i] via an alternating path over rows > i
            target = match[i]
            parent_col = {}
            seen = {c}
            queue = deque([r])
            end = None
            while queue and end is None:
                row = queue.popleft()
                for col in adj[row]:
                    if col in seen:
                        continue
                    seen.add(col)
                    parent_col[col] = row
                    if col == target:
                        end = col
                        break
                    nxt = owner[col]
                    if nxt > i:
                        queue.append(nxt)
            if end is None:
                continue
            col = end
            while True:
                row = parent_col[col]
                prev = match[row]
                match[row] = col
                owner[col] = row
                if row == r:
                    break
                col = prev
            match[i] = c
            owner[c] = i
            break
    return match


def solve_lsap(cost, maximize: bool = False) -> Assignment:
    """Optimal bijection ``perm`` with ``perm[i]`` the column given to row ``i``."""
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite entries")
    n = c.shape[0]
    if n == 0:
        return Assignment(np.zeros(0, dtype=np.int64), 0.0)
    a = -c if maximize else c
    match, u, v = _hungarian_min(a)
    reduced = a - u[:, None] - v[None, :]
    scale = max(1.0, float(np.abs(a).max()))
    tight = reduced <= 1e-9 * scale * n
    tight[np.arange(n), match] = True
    perm = _lexicographic(tight, match)
    best = a[np.arange(n), match].sum()
    if a[np.arange(n), perm].sum() > best + 1e-9 * scale * n:
        perm = match
    return Assignment(perm, float(c[np.arange(n), perm].sum()))
