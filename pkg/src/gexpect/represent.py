"""Martingale-representation processes ``(z, eta, A)`` along simulated paths.

With the surface stack of a nested solution, at every left endpoint ``s``::

    z_s = V_x(s, x),   eta_s = V_xx(s, x) / 2,
    dA  = 2 G(eta_s) ds - eta_s d<B>_s          (>= 0 for every admissible scenario)

and the payoff is reconstructed as ``E_G[xi] + sum z dB + sum eta d<B> - sum 2G(eta) ds``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from gexpect.gcore import GDriver
from gexpect.gheat import SpaceGrid, _fmt
from gexpect.payoff import CylinderPayoff, NestedSolution, nested_expectation
from gexpect.simulate import (
    PathBundle,
    VolatilityControl,
    counter_normals,
    extreme_controls,
    path_grid,
    sample_paths,
)
from gexpect.stack import StackEvaluator


@dataclass(eq=False)
class RepresentationSample:
    """Per-path ``z``, ``eta`` (left endpoints), running ``A`` and ``M``, and residuals.

    Paths that leave the space domain (or whose earlier increments leave the
    parameter grid) are flagged in ``excluded`` and left out of every norm.
    """

    expectation: float
    bundle: PathBundle
    z: np.ndarray
    eta: np.ndarray
    v: np.ndarray
    dA: np.ndarray
    A: np.ndarray
    M: np.ndarray
    payoff_values: np.ndarray
    residual: np.ndarray
    excluded: np.ndarray

    @property
    def n_excluded(self) -> int:
        return int(np.count_nonzero(self.excluded))

    @property
    def kept(self) -> np.ndarray:
        return ~self.excluded

    def to_csv(self, path) -> None:
        """``path_id,t,B,z,eta,A`` rows; ``z``/``eta`` at the horizon are left empty."""
        B, ts = self.bundle.B, self.bundle.times
        n = self.bundle.n_steps
        with open(path, "w") as fh:
            fh.write("path_id,t,B,z,eta,A\n")
            for p in range(self.bundle.n_paths):
                for k in range(n + 1):
                    zk = _fmt(self.z[p, k]) if k < n else ""
                    ek = _fmt(self.eta[p, k]) if k < n else ""
                    fh.write(f"{p},{_fmt(ts[k])},{_fmt(B[p, k])},{zk},{ek},{_fmt(self.A[p, k])}\n")


def _running_from(start: np.ndarray | float, inc: np.ndarray) -> np.ndarray:
    out = np.empty((inc.shape[0], inc.shape[1] + 1))
    out[:, 0] = start
    out[:, 1:] = inc
    return np.cumsum(out, axis=1)


def extract_representation(solution: NestedSolution, bundle: PathBundle,
                           evaluator: StackEvaluator | None = None) -> RepresentationSample:
    """Read ``z, eta`` off the surfaces along ``bundle`` and reconstruct the payoff."""
    ev = evaluator if evaluator is not None else StackEvaluator(solution, bundle.times)
    if ev.times.shape != bundle.times.shape or not np.array_equal(ev.times, bundle.times):
        raise ValueError("evaluator was built for a different time grid")
    B = bundle.B
    v, vx, vxx, ok = ev.evaluate_all(B)
    z = vx
    eta = 0.5 * vxx
    G = solution.driver
    two_g = G.two_g_dt(eta, bundle.dt)
    dA = two_g - eta * bundle.dQV
    inc = (z * bundle.dB + eta * bundle.dQV) - two_g
    M = _running_from(solution.value, inc)
    A = _running_from(0.0, dA)
    xi = np.broadcast_to(
        np.asarray(solution.payoff.evaluate(bundle.increments_at(solution.payoff.times)), dtype=float),
        (bundle.n_paths,),
    )
    residual = xi - M[:, -1]
    excluded = ~np.all(ok, axis=1)
    return RepresentationSample(solution.value, bundle, z, eta, v, dA, A, M, xi, residual, excluded)


@dataclass(frozen=True)
class ResidualNorms:
    l1: float
    l2: float
    max: float


def reconstruction_report(rs: RepresentationSample) -> ResidualNorms:
    """Mean absolute, root-mean-square and largest residual over kept paths."""
    r = rs.residual[rs.kept]
    if r.size == 0:
        return ResidualNorms(math.nan, math.nan, math.nan)
    return ResidualNorms(float(np.mean(np.abs(r))), float(np.sqrt(np.mean(r * r))),
                         float(np.max(np.abs(r))))


def check_A_monotone(rs: RepresentationSample, tol: float) -> tuple[float, float, bool]:
    """Most negative step of ``A`` over kept paths, fraction of steps below ``-tol``, and pass flag."""
    d = rs.dA[rs.kept]
    if d.size == 0:
        return 0.0, 0.0, True
    worst = float(np.min(d))
    frac = float(np.count_nonzero(d < -tol) / d.size)
    return worst, frac, worst >= -tol


def time_integral_abs(rs: RepresentationSample, field: np.ndarray | None = None) -> np.ndarray:
    """Per-path ``int |eta| ds`` (or of another step-aligned field)."""
    f = rs.eta if field is None else field
    return np.sum(np.abs(f) * rs.bundle.dt, axis=1)


@dataclass(frozen=True)
class SymmetricCheck:
    is_symmetric: bool
    gap: float  # E_G[xi] + E_G[-xi]
    eta_l1: float


def symmetric_case_check(driver: GDriver, cp: CylinderPayoff, sg: SpaceGrid, tol: float,
                         n_paths: int = 1000, n_steps: int = 200, seed: int = 0,
                         cfl: float = 0.5, controls: list[VolatilityControl] | None = None,
                         workers: int = 1) -> SymmetricCheck:
    """Is ``E_G[xi] = -E_G[-xi]``? If so, also report the largest path-averaged ``int |eta| ds``."""
    sol = nested_expectation(driver, cp, sg, cfl=cfl, workers=workers)
    neg = nested_expectation(driver, cp.negated(), sg, cfl=cfl, workers=workers)
    gap = sol.value + neg.value
    sym = abs(gap) <= tol
    tg = path_grid(cp.horizon, n_steps)
    Z = counter_normals(seed, n_paths, n_steps, workers=workers)
    ev = StackEvaluator(sol, tg.times)
    worst = 0.0
    for c in controls if controls is not None else extreme_controls(driver):
        rs = extract_representation(sol, sample_paths(c, tg, n_paths, seed, normals=Z), ev)
        worst = max(worst, float(np.mean(time_integral_abs(rs)[rs.kept])))
    return SymmetricCheck(bool(sym), float(gap), worst)


def report_json(rs: RepresentationSample) -> str:
    norms = reconstruction_report(rs)
    worst, _, _ = check_A_monotone(rs, 0.0)
    return json.dumps({
        "expectation": rs.expectation,
        "residual_l1": norms.l1,
        "residual_l2": norms.l2,
        "residual_max": norms.max,
        "worst_dA": worst,
        "excluded_paths": rs.n_excluded,
    }, sort_keys=True)
