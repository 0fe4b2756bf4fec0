"""Monotone explicit scheme for the G-heat equation ``V_t + G(V_xx) = 0``.

The sweep runs backward from the terminal layer::

    V(t - dt, x_i) = V(t, x_i) + max(c_bar * D2V_i, c_low * D2V_i),  c = sigma^2 dt / 2

where ``D2V`` is the three-point second difference written as a difference of
adjacent slopes (zero on affine data up to the rounding of the node values). The two extreme nodes keep
``D2V = 0``, i.e. the solution is continued linearly past the domain. With
``sigma_bar^2 dt / dx^2 <= 1`` every update is a nonnegative combination of
neighbours, so the scheme is monotone and converges to the viscosity solution.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from gexpect.gcore import GDriver


class GridError(ValueError):
    """Invalid grid or a grid that violates the stability bound."""


class OutOfHullError(ValueError):
    """Query outside the (t, x) rectangle covered by a surface."""


@dataclass(frozen=True)
class SpaceGrid:
    x_min: float
    x_max: float
    n_points: int

    def __post_init__(self) -> None:
        if not (self.x_min < 0.0 < self.x_max):
            raise GridError(f"need x_min < 0 < x_max, got [{self.x_min}, {self.x_max}]")
        if self.n_points < 3:
            raise GridError(f"need at least 3 space points, got {self.n_points}")

    @classmethod
    def default(cls, driver: GDriver, horizon: float, n_points: int = 801) -> "SpaceGrid":
        """Symmetric domain of half-width ten upper standard deviations over the horizon."""
        half = 10.0 * math.sqrt(driver.sigma_bar_sq * horizon)
        return cls(-half, half, n_points)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_points - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_points)

    def refine(self) -> "SpaceGrid":
        """Halve the spacing, keeping every existing node."""
        return SpaceGrid(self.x_min, self.x_max, 2 * (self.n_points - 1) + 1)

    def nearest_index(self, x) -> np.ndarray:
        i = np.rint((np.asarray(x, dtype=float) - self.x_min) / self.dx).astype(np.int64)
        return i

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x >= self.x_min) & (x <= self.x_max)


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    t_end: float
    n_steps: int

    def __post_init__(self) -> None:
        if not self.t_start < self.t_end:
            raise GridError(f"need t_start < t_end, got [{self.t_start}, {self.t_end}]")
        if self.n_steps < 1:
            raise GridError(f"need n_steps >= 1, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.t_start, self.t_end, self.n_steps + 1)

    @classmethod
    def for_cfl(cls, driver: GDriver, sg: SpaceGrid, t_start: float, t_end: float,
                cfl: float = 0.5) -> "TimeGrid":
        """Fewest uniform steps with ``sigma_bar^2 dt / dx^2 <= cfl``."""
        if not 0.0 < cfl <= 1.0:
            raise GridError(f"cfl must lie in (0, 1], got {cfl}")
        n = math.ceil((t_end - t_start) * driver.sigma_bar_sq / (cfl * sg.dx**2) * (1.0 - 1e-12))
        return cls(t_start, t_end, max(n, 1))


def cfl_ratio(driver: GDriver, tg: TimeGrid, sg: SpaceGrid) -> float:
    return driver.sigma_bar_sq * tg.dt / sg.dx**2


@dataclass(frozen=True, eq=False)
class ValueSurface:
    """Discrete solution on stored time layers, with difference quotients.

    ``values``, ``dx_values`` and ``dxx_values`` have shape ``(len(times), n_points)``.
    The ``dxx_values`` row at ``t_end`` repeats the last interior layer, so that
    ``V_xx`` is never read off the (possibly kinked) terminal data.
    """

    time_grid: TimeGrid
    space_grid: SpaceGrid
    times: np.ndarray
    values: np.ndarray
    dx_values: np.ndarray
    dxx_values: np.ndarray

    def at_time_index(self, j: int) -> np.ndarray:
        return self.values[j]

    def value_at_origin(self, j: int = 0) -> float:
        return float(_interp_x(self.space_grid, self.values[j], 0.0))

    def to_csv(self, path) -> None:
        """Write ``t,x,v,vx,vxx`` rows, time-major, with 17 significant digits."""
        xs = self.space_grid.nodes
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x", "v", "vx", "vxx"])
            for j, t in enumerate(self.times):
                for i, x in enumerate(xs):
                    w.writerow([_fmt(t), _fmt(x), _fmt(self.values[j, i]),
                                _fmt(self.dx_values[j, i]), _fmt(self.dxx_values[j, i])])


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _interp_x(sg: SpaceGrid, row: np.ndarray, x: float) -> np.ndarray:
    xs = sg.nodes
    i = int(np.clip(np.searchsorted(xs, x, side="right") - 1, 0, sg.n_points - 2))
    w = (x - xs[i]) / (xs[i + 1] - xs[i])
    return row[..., i] + w * (row[..., i + 1] - row[..., i])


class _Stencil:
    """Slopes and difference quotients on a fixed node set (batch over leading axes)."""

    def __init__(self, xs: np.ndarray):
        self.h = np.diff(xs)
        self.hc = 0.5 * (xs[2:] - xs[:-2])
        self.span = xs[2:] - xs[:-2]

    def d2(self, v: np.ndarray) -> np.ndarray:
        s = np.diff(v, axis=-1) / self.h
        out = np.zeros_like(v)
        out[..., 1:-1] = (s[..., 1:] - s[..., :-1]) / self.hc
        return out

    def d1(self, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(v)
        out[..., 1:-1] = (v[..., 2:] - v[..., :-2]) / self.span
        out[..., 0] = (v[..., 1] - v[..., 0]) / self.h[0]
        out[..., -1] = (v[..., -1] - v[..., -2]) / self.h[-1]
        return out


def _check_solve(driver: GDriver, tg: TimeGrid, sg: SpaceGrid) -> None:
    ratio = cfl_ratio(driver, tg, sg)
    if ratio > 1.0 + 1e-12:
        raise GridError(
            f"CFL violated: sigma_bar^2 dt / dx^2 = {ratio:.6g} > 1 "
            f"(dt={tg.dt:.6g}, dx={sg.dx:.6g}); use more time steps"
        )


@dataclass
class _Stored:
    times: np.ndarray
    v: np.ndarray
    vx: np.ndarray
    vxx: np.ndarray


def _sweep(driver: GDriver, terminal: np.ndarray, tg: TimeGrid, sg: SpaceGrid,
           keep_times: np.ndarray | None) -> _Stored:
    """Backward sweep on a batch ``terminal`` of shape ``(..., n_points)``.

    ``keep_times=None`` stores every layer. Otherwise each requested time is stored
    as the linear interpolation of its two bracketing layers.
    """
    st = _Stencil(sg.nodes)
    ts = tg.times
    n = tg.n_steps
    cb = 0.5 * driver.sigma_bar_sq * tg.dt
    cl = 0.5 * driver.sigma_low_sq * tg.dt
    batch = terminal.shape[:-1]
    nx = terminal.shape[-1]

    if keep_times is None:
        out_t = ts
    else:
        out_t = np.asarray(keep_times, dtype=float)
        if out_t.size and (out_t.min() < tg.t_start - 1e-12 or out_t.max() > tg.t_end + 1e-12):
            raise OutOfHullError("requested layer times outside the time grid")
        out_t = np.clip(out_t, tg.t_start, tg.t_end)
    m = len(out_t)
    sv = np.empty(batch + (m, nx))
    svx = np.empty_like(sv)
    svxx = np.empty_like(sv)

    # assign each stored time to the step [t_j, t_{j+1}] it falls in
    seg = np.clip(np.searchsorted(ts, out_t, side="right") - 1, 0, n - 1)
    if keep_times is None:
        seg = np.arange(m)
    wts = np.zeros(m) if keep_times is None else (out_t - ts[seg]) / (ts[seg + 1] - ts[seg])
    by_seg: dict[int, list[int]] = {}
    for k, s in enumerate(seg):
        by_seg.setdefault(int(s), []).append(k)

    v_prev = np.array(terminal, dtype=float)
    d2_prev = st.d2(v_prev)
    vx_prev = st.d1(v_prev)
    if keep_times is None:
        sv[..., n, :] = v_prev
        svx[..., n, :] = vx_prev
    for j in range(n - 1, -1, -1):
        v = v_prev + np.maximum(cb * d2_prev, cl * d2_prev)
        d2 = st.d2(v)
        vx = st.d1(v)
        # terminal-layer curvature is replaced by the next layer down
        d2_hi = d2 if j == n - 1 else d2_prev
        if keep_times is None:
            sv[..., j, :] = v
            svx[..., j, :] = vx
            svxx[..., j, :] = d2
            if j == n - 1:
                svxx[..., n, :] = d2
        else:
            for k in by_seg.get(j, ()):
                w = wts[k]
                if w == 1.0:
                    sv[..., k, :] = v_prev
                    svx[..., k, :] = vx_prev
                    svxx[..., k, :] = d2_hi
                    continue
                sv[..., k, :] = v + w * (v_prev - v)
                svx[..., k, :] = vx + w * (vx_prev - vx)
                svxx[..., k, :] = d2 + w * (d2_hi - d2)
        v_prev, d2_prev, vx_prev = v, d2, vx
    return _Stored(out_t, sv, svx, svxx)


def _terminal_on_grid(terminal, sg: SpaceGrid) -> np.ndarray:
    if callable(terminal):
        vals = np.asarray(terminal(sg.nodes), dtype=float)
        vals = np.broadcast_to(vals, (sg.n_points,)).copy()
    else:
        vals = np.array(terminal, dtype=float)
    if vals.shape[-1] != sg.n_points:
        raise GridError(f"terminal data has {vals.shape[-1]} points, grid has {sg.n_points}")
    if not np.all(np.isfinite(vals)):
        raise ValueError("terminal function is not finite on the grid")
    return vals


def solve_gheat(driver: GDriver, terminal: Callable | np.ndarray, tg: TimeGrid, sg: SpaceGrid,
                keep_times: Sequence[float] | None = None) -> ValueSurface:
    """Solve ``V_t + G(V_xx) = 0`` on ``[t_start, t_end]`` with ``V(t_end) = terminal``.

    ``terminal`` is a vectorised function of ``x`` or its values on the grid nodes.
    """
    _check_solve(driver, tg, sg)
    vals = _terminal_on_grid(terminal, sg)
    if vals.ndim != 1:
        raise GridError("solve_gheat takes a single terminal; use solve_gheat_batch")
    kt = None if keep_times is None else np.asarray(keep_times, dtype=float)
    s = _sweep(driver, vals, tg, sg, kt)
    return ValueSurface(tg, sg, s.times, s.v, s.vx, s.vxx)


def _chunks(n: int, size: int) -> list[slice]:
    return [slice(a, min(a + size, n)) for a in range(0, n, size)]


def solve_gheat_batch(driver: GDriver, terminals: np.ndarray, tg: TimeGrid, sg: SpaceGrid,
                      keep_times: Sequence[float] | None = None, workers: int = 1,
                      chunk_elems: int = 1 << 20) -> _Stored:
    """Solve many independent terminal problems ``terminals[k, :]`` on one grid.

    Rows are split into chunks that may run on a thread pool; every row goes
    through identical arithmetic, so output does not depend on ``workers``.
    """
    _check_solve(driver, tg, sg)
    terminals = np.asarray(terminals, dtype=float)
    if terminals.ndim != 2 or terminals.shape[1] != sg.n_points:
        raise GridError(f"terminals must have shape (k, {sg.n_points}), got {terminals.shape}")
    if not np.all(np.isfinite(terminals)):
        raise ValueError("terminal function is not finite on the grid")
    kt = None if keep_times is None else np.asarray(keep_times, dtype=float)
    rows = max(1, chunk_elems // sg.n_points)
    parts = _chunks(terminals.shape[0], rows)

    def run(sl: slice) -> _Stored:
        return _sweep(driver, terminals[sl], tg, sg, kt)

    if workers > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(run, parts))
    else:
        done = [run(p) for p in parts]
    return _Stored(
        done[0].times,
        np.concatenate([d.v for d in done]),
        np.concatenate([d.vx for d in done]),
        np.concatenate([d.vxx for d in done]),
    )


def continuation_at_origin(driver: GDriver, terminals: np.ndarray, tg: TimeGrid, sg: SpaceGrid,
                           workers: int = 1) -> np.ndarray:
    """``V^k(t_start, 0)`` for each terminal row, without keeping intermediate layers."""
    s = solve_gheat_batch(driver, terminals, tg, sg, keep_times=[tg.t_start], workers=workers)
    return _interp_x(sg, s.v[:, 0, :], 0.0)


def locate(times: np.ndarray, nodes: np.ndarray, t, x):
    """Bracketing indices and weights for bilinear lookup; also an in-hull mask."""
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    inside = (x >= nodes[0]) & (x <= nodes[-1]) & (t >= times[0]) & (t <= times[-1])
    if len(times) > 1:
        j = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2)
        wt = (np.clip(t, times[0], times[-1]) - times[j]) / (times[j + 1] - times[j])
    else:
        j = np.zeros(np.shape(t), dtype=np.int64)
        wt = np.zeros(np.shape(t))
    i = np.clip(np.searchsorted(nodes, x, side="right") - 1, 0, len(nodes) - 2)
    wx = (np.clip(x, nodes[0], nodes[-1]) - nodes[i]) / (nodes[i + 1] - nodes[i])
    return j, wt, i, wx, inside


def bilinear(field: np.ndarray, j, wt, i, wx, row=None) -> np.ndarray:
    """Interpolate ``field[(row,) j, i]``; ``a + w (b - a)`` keeps constants exact."""
    if row is None:
        f = field
        a0, a1 = f[j, i], f[j, i + 1]
        b0, b1 = f[np.minimum(j + 1, f.shape[0] - 1), i], f[np.minimum(j + 1, f.shape[0] - 1), i + 1]
    else:
        f = field
        jn = np.minimum(j + 1, f.shape[1] - 1)
        a0, a1 = f[row, j, i], f[row, j, i + 1]
        b0, b1 = f[row, jn, i], f[row, jn, i + 1]
    lo = a0 + wx * (a1 - a0)
    hi = b0 + wx * (b1 - b0)
    return lo + wt * (hi - lo)


def surface_eval(s: ValueSurface, t, x):
    """``(v, vx, vxx)`` at ``(t, x)`` by bilinear interpolation of the stored layers."""
    nodes = s.space_grid.nodes
    j, wt, i, wx, inside = locate(s.times, nodes, t, x)
    if not np.all(inside):
        raise OutOfHullError(
            f"query outside [{s.times[0]}, {s.times[-1]}] x [{nodes[0]}, {nodes[-1]}]"
        )
    out = tuple(bilinear(f, j, wt, i, wx) for f in (s.values, s.dx_values, s.dxx_values))
    if np.ndim(out[0]) == 0:
        return tuple(float(o) for o in out)
    return out


@dataclass(frozen=True)
class RefinementLevel:
    dx: float
    value: float
    change: float  # |value - previous value|; nan on the first level


def refinement_study(driver: GDriver, terminal: Callable, tg: TimeGrid, sg: SpaceGrid,
                     levels: int = 3, cfl: float | None = None) -> list[RefinementLevel]:
    """Value at ``(t_start, 0)`` under successive halvings of ``dx``.

    ``dt`` is rescaled to keep the CFL ratio of the base grids (or ``cfl`` if given).
    """
    if levels < 2:
        raise ValueError("refinement_study needs at least 2 levels")
    ratio = cfl if cfl is not None else cfl_ratio(driver, tg, sg)
    out: list[RefinementLevel] = []
    g = sg
    prev = math.nan
    for _ in range(levels):
        tgl = TimeGrid.for_cfl(driver, g, tg.t_start, tg.t_end, cfl=min(ratio, 1.0))
        surf = solve_gheat(driver, terminal, tgl, g, keep_times=[tg.t_start])
        val = surf.value_at_origin(0)
        out.append(RefinementLevel(g.dx, val, abs(val - prev) if out else math.nan))
        prev = val
        g = g.refine()
    return out


__all__ = [
    "GridError",
    "OutOfHullError",
    "SpaceGrid",
    "TimeGrid",
    "ValueSurface",
    "cfl_ratio",
    "solve_gheat",
    "solve_gheat_batch",
    "continuation_at_origin",
    "surface_eval",
    "refinement_study",
    "RefinementLevel",
]
