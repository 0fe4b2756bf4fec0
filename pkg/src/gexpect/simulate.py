"""Path simulation under volatility scenarios and Monte Carlo sup-estimates.

Each scenario fixes an adapted variance rate ``sigma_t^2`` in the driver's band;
``E_G`` is approximated from below by the largest sample mean over a finite
family of scenarios. Standard normals come from a counter-based stream keyed
by ``(seed, path)`` and indexed by step, so every scenario sees the same shocks
and results do not depend on how paths are split among workers.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from gexpect.gcore import GDriver
from gexpect.gheat import TimeGrid, _fmt
from gexpect.payoff import CylinderPayoff, NestedSolution
from gexpect.stack import StackEvaluator, lookup, payoff_indices

_MASK64 = (1 << 64) - 1


def counter_normals(seed: int, n_paths: int, n_steps: int, first_path: int = 0,
                    workers: int = 1) -> np.ndarray:
    """Standard normals ``Z[p, k]`` from a Philox stream keyed by ``(seed, first_path + p)``.

    Uniforms use the top 53 bits of each 64-bit draw, shifted off zero; normals
    come from the inverse normal CDF.
    """
    out = np.empty((n_paths, n_steps))

    def fill(sl: slice) -> None:
        for p in range(sl.start, sl.stop):
            gen = np.random.Philox(key=np.array([seed & _MASK64, first_path + p], dtype=np.uint64))
            raw = gen.random_raw(n_steps)
            u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
            out[p] = ndtri(u)

    if workers > 1 and n_paths > 1:
        size = math.ceil(n_paths / workers)
        parts = [slice(a, min(a + size, n_paths)) for a in range(0, n_paths, size)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, parts))
    else:
        fill(slice(0, n_paths))
    return out


@dataclass(frozen=True, eq=False)
class VolatilityControl:
    """A scenario: constant, piecewise-constant in time, or state feedback.

    A feedback scenario takes the upper variance wherever ``V_xx >= 0`` on the
    surface stack of ``solution`` (evaluated along the path itself), else the lower.
    """

    name: str
    driver: GDriver
    kind: str
    level: float | None = None
    schedule: tuple[tuple[float, float], ...] = ()
    solution: NestedSolution | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        lo, hi = self.driver.band
        if self.kind == "constant":
            if self.level is None or not lo <= self.level <= hi:
                raise ValueError(f"constant level {self.level} outside band [{lo}, {hi}]")
        elif self.kind == "piecewise":
            if not self.schedule:
                raise ValueError("piecewise control needs at least one breakpoint")
            ts = [t for t, _ in self.schedule]
            if any(b <= a for a, b in zip(ts, ts[1:])):
                raise ValueError("piecewise breakpoints must be strictly increasing")
            for _, s in self.schedule:
                if not lo <= s <= hi:
                    raise ValueError(f"piecewise level {s} outside band [{lo}, {hi}]")
        elif self.kind == "feedback":
            if self.solution is None:
                raise ValueError("feedback control needs a solution")
        else:
            raise ValueError(f"unknown control kind {self.kind!r}")

    def deterministic_rates(self, times: np.ndarray) -> np.ndarray | None:
        """Per-step variance for non-feedback controls (left endpoints), else ``None``."""
        left = times[:-1]
        if self.kind == "constant":
            return np.full(len(left), float(self.level))
        if self.kind == "piecewise":
            ts = np.array([t for t, _ in self.schedule])
            ss = np.array([s for _, s in self.schedule])
            j = np.clip(np.searchsorted(ts, left, side="right") - 1, 0, len(ts) - 1)
            return ss[j]
        return None


def constant_control(driver: GDriver, level: float, name: str | None = None) -> VolatilityControl:
    return VolatilityControl(name or f"const({level:g})", driver, "constant", level=float(level))


def extreme_controls(driver: GDriver) -> list[VolatilityControl]:
    lo, hi = driver.band
    if lo == hi:
        return [constant_control(driver, hi)]
    return [constant_control(driver, lo), constant_control(driver, hi)]


def piecewise_control(driver: GDriver, schedule, name: str = "piecewise") -> VolatilityControl:
    return VolatilityControl(name, driver, "piecewise",
                             schedule=tuple((float(t), float(s)) for t, s in schedule))


def random_piecewise_controls(driver: GDriver, horizon: float, count: int, seed: int,
                              max_pieces: int = 6) -> list[VolatilityControl]:
    rng = np.random.default_rng(seed)
    lo, hi = driver.band
    out = []
    for c in range(count):
        k = int(rng.integers(1, max_pieces + 1))
        cuts = np.sort(rng.uniform(0.0, horizon, size=k - 1))
        ts = np.concatenate([[0.0], cuts])
        levels = rng.uniform(lo, hi, size=k)
        out.append(piecewise_control(driver, zip(ts, levels), name=f"piecewise#{c}"))
    return out


def feedback_control(driver: GDriver, solution: NestedSolution,
                     name: str = "feedback") -> VolatilityControl:
    """Bang-bang scenario: upper variance where the surface's ``V_xx >= 0``, else lower."""
    return VolatilityControl(name, driver, "feedback", solution=solution)


def sign_control(driver: GDriver, integrand: np.ndarray, times: np.ndarray,
                 name: str = "bang-bang") -> VolatilityControl:
    """Bang-bang scenario for a deterministic integrand ``zeta(t_k)``: upper where ``zeta >= 0``."""
    lo, hi = driver.band
    levels = np.where(np.asarray(integrand) >= 0.0, hi, lo)
    keep = np.concatenate([[True], levels[1:] != levels[:-1]])
    return piecewise_control(driver, zip(times[:-1][keep], levels[keep]), name=name)


def default_control_family(driver: GDriver, horizon: float, solution: NestedSolution | None = None,
                           n_piecewise: int = 8, seed: int = 0) -> list[VolatilityControl]:
    """Two extremes, ``n_piecewise`` random piecewise scenarios and (if given) the feedback one."""
    fam = extreme_controls(driver) + random_piecewise_controls(driver, horizon, n_piecewise, seed)
    if solution is not None:
        fam.append(feedback_control(driver, solution))
    return fam


@dataclass(eq=False)
class PathBundle:
    """Simulated paths: per-step increments of ``B`` and of ``<B>`` on a time grid."""

    times: np.ndarray
    dB: np.ndarray
    dQV: np.ndarray
    control: str
    seed: int
    driver: GDriver

    @property
    def n_paths(self) -> int:
        return self.dB.shape[0]

    @property
    def n_steps(self) -> int:
        return self.dB.shape[1]

    @cached_property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    @cached_property
    def B(self) -> np.ndarray:
        return _running(self.dB)

    @cached_property
    def QV(self) -> np.ndarray:
        return _running(self.dQV)

    def increments_at(self, payoff_times) -> list[np.ndarray]:
        idx = payoff_indices(self.times, payoff_times)
        B = self.B
        return [B[:, b] - B[:, a] for a, b in zip(idx, idx[1:])]

    def to_csv(self, path) -> None:
        """``path_id,t,B,QV`` rows, path-major."""
        B, QV = self.B, self.QV
        with open(path, "w") as fh:
            fh.write("path_id,t,B,QV\n")
            ts = [_fmt(t) for t in self.times]
            for p in range(self.n_paths):
                for k, t in enumerate(ts):
                    fh.write(f"{p},{t},{_fmt(B[p, k])},{_fmt(QV[p, k])}\n")


def _running(d: np.ndarray) -> np.ndarray:
    out = np.zeros((d.shape[0], d.shape[1] + 1))
    np.cumsum(d, axis=1, out=out[:, 1:])
    return out


def sample_paths(control: VolatilityControl, tg: TimeGrid, n_paths: int, seed: int,
                 workers: int = 1, normals: np.ndarray | None = None) -> PathBundle:
    """Simulate ``dB = sqrt(sigma^2 dt) Z`` and ``d<B> = sigma^2 dt`` under ``control``."""
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    times = tg.times
    dt = np.diff(times)
    Z = normals if normals is not None else counter_normals(seed, n_paths, tg.n_steps, workers=workers)
    if Z.shape != (n_paths, tg.n_steps):
        raise ValueError(f"normals have shape {Z.shape}, expected {(n_paths, tg.n_steps)}")
    rates = control.deterministic_rates(times)
    if rates is not None:
        dqv_row = rates * dt
        dQV = np.broadcast_to(dqv_row, Z.shape).copy()
        dB = np.sqrt(dQV) * Z
        return PathBundle(times, dB, dQV, control.name, seed, control.driver)

    lo, hi = control.driver.band
    ev = StackEvaluator(control.solution, times)
    B = np.zeros((n_paths, tg.n_steps + 1))
    dB = np.empty_like(Z)
    dQV = np.empty_like(Z)
    for i in range(1, ev.n_intervals + 1):
        a, b = ev.idx[i - 1], ev.idx[i]
        for g in ev.groups(i, B):
            P = g.paths
            for k in range(a, b):
                vxx = lookup(g.vxx, g.rows, k - a, B[P, k] - B[P, a], ev.nodes)
                q = np.where(vxx >= 0.0, hi * dt[k], lo * dt[k])
                d = np.sqrt(q) * Z[P, k]
                dQV[P, k] = q
                dB[P, k] = d
                B[P, k + 1] = B[P, k] + d
    bundle = PathBundle(times, dB, dQV, control.name, seed, control.driver)
    bundle.__dict__["B"] = B
    return bundle


@dataclass
class MCResult:
    estimate: float
    argmax: str
    stderr: float
    records: list[dict]

    def to_json(self) -> str:
        return "\n".join(json.dumps(r, sort_keys=True) for r in self.records)


def path_grid(horizon: float, n_steps: int) -> TimeGrid:
    return TimeGrid(0.0, horizon, n_steps)


def mc_expectation(cp: CylinderPayoff, controls: Sequence[VolatilityControl], n_paths: int,
                   seed: int, n_steps: int = 200, workers: int = 1) -> MCResult:
    """Largest sample mean of the payoff over ``controls`` (common random numbers)."""
    if not controls:
        raise ValueError("need at least one control")
    tg = path_grid(cp.horizon, n_steps)
    Z = counter_normals(seed, n_paths, n_steps, workers=workers)
    records = []
    best = None
    for c in controls:
        bundle = sample_paths(c, tg, n_paths, seed, normals=Z)
        vals = np.asarray(cp.evaluate(bundle.increments_at(cp.times)), dtype=float)
        vals = np.broadcast_to(vals, (n_paths,))
        mean = float(np.mean(vals))
        se = float(np.std(vals, ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else math.nan
        rec = {"control": c.name, "mean": mean, "stderr": se, "n_paths": n_paths, "seed": seed}
        records.append(rec)
        if best is None or mean > best["mean"]:
            best = rec
    return MCResult(best["mean"], best["control"], best["stderr"], records)


def qv_functionals(bundle: PathBundle, zeta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Left-point sums ``(int |zeta| ds, int |zeta| d<B>)`` per path."""
    z = _aligned(bundle, zeta)
    a = np.abs(z)
    return np.sum(a * bundle.dt, axis=1), np.sum(a * bundle.dQV, axis=1)


def _aligned(bundle: PathBundle, zeta) -> np.ndarray:
    z = np.asarray(zeta, dtype=float)
    if z.ndim == 0:
        z = np.full(bundle.n_steps, float(z))
    if z.shape[-1] != bundle.n_steps or (z.ndim == 2 and z.shape[0] != bundle.n_paths) or z.ndim > 2:
        raise ValueError(f"integrand shape {z.shape} does not match bundle {(bundle.n_paths, bundle.n_steps)}")
    return np.broadcast_to(z, (bundle.n_paths, bundle.n_steps))


def controls_from_spec(spec: list[tuple[str, int]], driver: GDriver, horizon: float,
                       solution: NestedSolution | None = None, seed: int = 0) -> list[VolatilityControl]:
    """Build a scenario family from parsed ``(family, count)`` pairs.

    ``feedback`` is skipped when no solution is given; a degenerate band yields
    a single constant scenario whatever the family string asks for.
    """
    if driver.is_degenerate:
        return extreme_controls(driver)
    out: list[VolatilityControl] = []
    for name, count in spec:
        if name == "extremes":
            out += extreme_controls(driver)
        elif name == "piecewise":
            out += random_piecewise_controls(driver, horizon, count, seed)
        elif name == "feedback" and solution is not None:
            out.append(feedback_control(driver, solution))
    if not out:
        raise ValueError("control specification produced no scenarios")
    return out


def payoff_path_grid(cp: CylinderPayoff, steps_per_unit: int) -> TimeGrid:
    """Uniform path grid over ``[0, tn]`` with about ``steps_per_unit`` steps per unit time."""
    return path_grid(cp.horizon, max(1, int(round(steps_per_unit * cp.horizon))))
