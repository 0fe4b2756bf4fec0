"""Evaluating a nested solution's surface stack along simulated paths.

During interval ``i`` a path is looked up on the slice of interval ``i`` whose
parameters are the grid nodes nearest to its realized earlier increments, at
``x = B_s - B_{t_{i-1}}``. Slices are solved lazily with layers stored only at
the path grid's time points. Paths are processed in groups of slices so that
memory stays bounded; solved slices are kept in a size-capped cache.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from gexpect.payoff import NestedSolution


class AlignmentError(ValueError):
    """Payoff time points are not nodes of the path time grid."""


def payoff_indices(times: np.ndarray, payoff_times) -> list[int]:
    """Indices of ``0, t1, ..., tn`` in ``times``."""
    tol = 1e-9 * max(1.0, float(times[-1]))
    out = [0]
    for t in payoff_times:
        j = int(np.argmin(np.abs(times - t)))
        if abs(times[j] - t) > tol:
            raise AlignmentError(f"payoff time {t} is not on the path time grid")
        out.append(j)
    return out


def lookup(field: np.ndarray, rows: np.ndarray, layer, x: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """Linear interpolation in ``x`` of ``field[rows, layer, :]`` (``x`` clipped to the grid)."""
    xc = np.clip(x, nodes[0], nodes[-1])
    j = np.clip(np.searchsorted(nodes, xc, side="right") - 1, 0, len(nodes) - 2)
    w = (xc - nodes[j]) / (nodes[j + 1] - nodes[j])
    a = field[rows, layer, j]
    b = field[rows, layer, j + 1]
    return a + w * (b - a)


class SliceGroup:
    """Paths sharing a batch of materialized slices of one interval."""

    def __init__(self, paths, rows, ok, v, vx, vxx):
        self.paths = paths
        self.rows = rows
        self.ok = ok
        self.v = v
        self.vx = vx
        self.vxx = vxx


class StackEvaluator:
    """``(v, vx, vxx)`` of a nested solution at the nodes of one path time grid."""

    def __init__(self, solution: NestedSolution, times: np.ndarray,
                 cache_bytes: int = 512 << 20, group_bytes: int = 128 << 20):
        self.solution = solution
        self.times = np.asarray(times, dtype=float)
        self.idx = payoff_indices(self.times, solution.payoff.times)
        if self.idx[-1] != len(self.times) - 1:
            raise AlignmentError("path time grid must end at the payoff horizon")
        self.sg = solution.space_grid
        self.nodes = self.sg.nodes
        self.nx = self.sg.n_points
        self.cache_bytes = cache_bytes
        self.group_bytes = group_bytes
        self._cache: list[OrderedDict] = [OrderedDict() for _ in solution.surfaces]
        self._cached = 0

    @property
    def n_intervals(self) -> int:
        return len(self.idx) - 1

    def _slice_bytes(self, i: int) -> int:
        return 3 * 8 * self.nx * (self.idx[i] - self.idx[i - 1] + 1)

    def _fetch(self, i: int, codes: list[int]):
        """Per-code ``(v, vx, vxx)`` arrays for interval ``i``, solving what is missing."""
        cache = self._cache[i - 1]
        missing = [c for c in codes if c not in cache]
        fresh = {}
        if missing:
            fam = self.solution.surfaces[i - 1]
            keep = self.times[self.idx[i - 1]:self.idx[i] + 1]
            if i == 1:
                keys = np.zeros((len(missing), 0), dtype=np.int64)
            else:
                keys = np.stack(np.unravel_index(np.asarray(missing), (self.nx,) * (i - 1)), axis=1)
            s = fam.materialize(keys, keep_times=keep)
            for r, c in enumerate(missing):
                fresh[c] = (s.v[r], s.vx[r], s.vxx[r])
            size = self._slice_bytes(i)
            for c, arrs in fresh.items():
                if self._cached + size > self.cache_bytes:
                    break
                cache[c] = arrs
                self._cached += size
        return [cache[c] if c in cache else fresh[c] for c in codes]

    def _codes(self, i: int, B: np.ndarray):
        n_paths = B.shape[0]
        if i == 1:
            return np.zeros(n_paths, dtype=np.int64), np.ones(n_paths, dtype=bool)
        inc = np.stack([B[:, self.idx[j]] - B[:, self.idx[j - 1]] for j in range(1, i)], axis=1)
        node = self.sg.nearest_index(inc)
        ok = np.all((node >= 0) & (node < self.nx), axis=1)
        node = np.clip(node, 0, self.nx - 1)
        return np.ravel_multi_index(tuple(node.T), (self.nx,) * (i - 1)), ok

    def groups(self, i: int, B: np.ndarray) -> Iterator[SliceGroup]:
        """Path groups for interval ``i``; ``B`` needs valid columns up to ``t_{i-1}``."""
        codes, ok = self._codes(i, B)
        uniq, inv = np.unique(codes, return_inverse=True)
        inv = inv.reshape(-1)
        per = max(1, self.group_bytes // self._slice_bytes(i))
        for g0 in range(0, len(uniq), per):
            sel = np.arange(g0, min(g0 + per, len(uniq)))
            arrs = self._fetch(i, uniq[sel].tolist())
            v = np.stack([a[0] for a in arrs])
            vx = np.stack([a[1] for a in arrs])
            vxx = np.stack([a[2] for a in arrs])
            paths = np.nonzero((inv >= sel[0]) & (inv <= sel[-1]))[0]
            yield SliceGroup(paths, inv[paths] - sel[0], ok[paths], v, vx, vxx)

    def evaluate_all(self, B: np.ndarray):
        """Arrays ``(n_paths, n_steps)`` of ``v, vx, vxx`` at every left endpoint, plus validity."""
        n_paths = B.shape[0]
        n_steps = len(self.times) - 1
        V = np.empty((n_paths, n_steps))
        VX = np.empty_like(V)
        VXX = np.empty_like(V)
        OK = np.empty(V.shape, dtype=bool)
        for i in range(1, self.n_intervals + 1):
            a, b = self.idx[i - 1], self.idx[i]
            m = b - a
            layer = np.arange(m)[None, :]
            for g in self.groups(i, B):
                x = B[g.paths, a:b] - B[g.paths, a][:, None]
                r = g.rows[:, None]
                V[g.paths, a:b] = lookup(g.v, r, layer, x, self.nodes)
                VX[g.paths, a:b] = lookup(g.vx, r, layer, x, self.nodes)
                VXX[g.paths, a:b] = lookup(g.vxx, r, layer, x, self.nodes)
                inside = (x >= self.nodes[0]) & (x <= self.nodes[-1])
                OK[g.paths, a:b] = inside & g.ok[:, None]
        return V, VX, VXX, OK
