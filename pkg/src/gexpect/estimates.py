"""Numerical checks of the quantitative estimates behind the representation.

* a priori bound: ``eps * E_{G_eps}[int |eta| ds] <= E_G[xi] + E_{G_eps}[-xi]``
* quadratic-variation sandwich:
  ``sigma_low^2 E[int |zeta| ds] <= E[int |zeta| d<B>] <= sigma_bar^2 E[int |zeta| ds]``
* ``int zeta d<B> - int 2G(zeta) ds <= 0`` pathwise, with sup of the mean equal to 0
* uniqueness: ``E_{Gbar_eps}[int |eta1 - eta2| ds]`` vanishes under refinement

``E`` with a driver subscript is estimated as the largest sample mean over a
finite scenario family inside that driver's band. Every check yields an
:class:`EstimateReport`; a report passes iff
``lhs <= rhs + 3 * mc_stderr + grid_tol``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from gexpect.config import RunConfig, parse_controls
from gexpect.gcore import GDriver, PerturbedDriver
from gexpect.gheat import SpaceGrid
from gexpect.payoff import CylinderPayoff, NestedSolution, nested_expectation
from gexpect.represent import (
    RepresentationSample,
    check_A_monotone,
    extract_representation,
    symmetric_case_check,
    time_integral_abs,
)
from gexpect.simulate import (
    PathBundle,
    VolatilityControl,
    _aligned,
    controls_from_spec,
    counter_normals,
    extreme_controls,
    path_grid,
    payoff_path_grid,
    random_piecewise_controls,
    sample_paths,
    sign_control,
)
from gexpect.stack import StackEvaluator

DEFAULT_CONTROLS = "extremes,piecewise:8,feedback"

# (payoff, time points); the single-time entries share t1 = 1.
CORPUS: tuple[tuple[str, tuple[float, ...]], ...] = (
    ("b1*b1", (1.0,)),
    ("abs(b1)", (1.0,)),
    ("max(b1, 0)", (1.0,)),
    ("min(abs(b1), 1)", (1.0,)),
    ("b1", (1.0,)),
    ("3", (1.0,)),
    ("abs(b1) + b2*b2", (1.0, 2.0)),
    ("max(b1, 0)*max(b2, 0)", (1.0, 2.0)),
)

SYMMETRIC_CORPUS = (("b1", (1.0,)), ("b1 + 2*b2", (1.0, 2.0)))


class PayoffMismatchError(ValueError):
    """Two solutions compared for uniqueness do not represent the same payoff."""


@dataclass
class EstimateReport:
    name: str
    lhs: float
    rhs: float
    mc_stderr: float = 0.0
    grid_tol: float = 0.0
    inputs: dict = field(default_factory=dict)
    expected_pass: bool = True

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs

    @property
    def passed(self) -> bool:
        se = self.mc_stderr if math.isfinite(self.mc_stderr) else 0.0
        return bool(self.lhs <= self.rhs + 3.0 * se + self.grid_tol)

    @property
    def ok(self) -> bool:
        """Did the report come out as intended (negative controls are meant to fail)?"""
        return self.passed == self.expected_pass

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "margin": self.margin,
            "mc_stderr": self.mc_stderr,
            "grid_tol": self.grid_tol,
            "pass": self.passed,
            "expected_pass": self.expected_pass,
            "inputs": self.inputs,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return math.nan, math.nan
    se = float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return float(np.mean(x)), se


def _sup_mean(per_control: Sequence[np.ndarray]) -> tuple[float, float, int]:
    """Largest sample mean, its standard error, and which entry attained it."""
    best = (-math.inf, math.nan, -1)
    for j, x in enumerate(per_control):
        m, se = _mean_se(x)
        if m > best[0]:
            best = (m, se, j)
    return best


def extract_family(solution: NestedSolution, controls: Sequence[VolatilityControl], n_paths: int,
                   seed: int, steps: int, workers: int = 1) -> list[RepresentationSample]:
    """Representation samples along common-random-number paths, one per scenario."""
    cp = solution.payoff
    tg = payoff_path_grid(cp, steps)
    Z = counter_normals(seed, n_paths, tg.n_steps, workers=workers)
    ev = StackEvaluator(solution, tg.times)
    return [extract_representation(solution, sample_paths(c, tg, n_paths, seed, normals=Z), ev)
            for c in controls]


def _payoff_inputs(cp: CylinderPayoff) -> dict:
    return {"payoff": cp.expr.text, "times": list(cp.times)}


# ---------------------------------------------------------------- a priori bound

def verify_apriori(pd: PerturbedDriver, cp: CylinderPayoff, sg: SpaceGrid | None = None,
                   controls: Sequence[VolatilityControl] | None = None, n_paths: int = 1000,
                   seed: int = 0, steps: int = 200, cfl: float = 0.5, nt: int | None = None,
                   workers: int = 1, solution: NestedSolution | None = None,
                   grid_c: float = 10.0, control_spec: str = DEFAULT_CONTROLS) -> EstimateReport:
    """``eps * sup_c mean int |eta| ds`` against ``E_G[xi] + E_{G_eps}[-xi]``.

    ``eta`` comes from the ``G`` surfaces; paths are driven by scenarios in the
    ``G_eps`` band (by default the extremes, random piecewise ones and the
    feedback scenario of the ``G`` surface restricted to that band).
    """
    G = pd.base
    Ge = pd.g_epsilon_driver()
    sol = solution if solution is not None else nested_expectation(G, cp, sg, cfl=cfl, nt=nt, workers=workers)
    if sol.driver != G:
        raise ValueError("solution was computed under a different driver")
    neg = nested_expectation(Ge, cp.negated(), sol.space_grid, cfl=cfl, nt=nt, workers=workers)
    if controls is None:
        controls = controls_from_spec(parse_controls(control_spec), Ge, cp.horizon, sol, seed)
    for c in controls:
        lo, hi = c.driver.band
        if lo < Ge.sigma_low_sq or hi > Ge.sigma_bar_sq:
            raise ValueError(f"control {c.name} is not admissible for G_eps")
    samples = extract_family(sol, controls, n_paths, seed, steps, workers)
    per = [time_integral_abs(rs)[rs.kept] for rs in samples]
    m, se, j = _sup_mean(per)
    inputs = _payoff_inputs(cp) | {
        "epsilon": pd.epsilon,
        "E_G": sol.value,
        "E_Geps_neg": neg.value,
        "sup_mean_int_abs_eta": m,
        "argmax": controls[j].name,
        "controls": [c.name for c in controls],
        "n_paths": n_paths,
        "seed": seed,
        "path_steps": samples[0].bundle.n_steps,
        "dx": sol.dx,
        "excluded_paths": int(sum(rs.n_excluded for rs in samples)),
    }
    return EstimateReport(f"apriori[{cp.expr.text}]", pd.epsilon * m, sol.value + neg.value,
                          pd.epsilon * se, grid_c * sol.dx, inputs)


# ------------------------------------------------------- pathwise relations

def _pairs(bundles: Iterable[PathBundle], zeta) -> Iterator[tuple[PathBundle, np.ndarray]]:
    """``(bundle, integrand)`` pairs; bundles may be produced lazily.

    ``zeta`` is one integrand for every bundle (scalar, per-step or per-path
    array), a callable ``bundle -> integrand``, or a list with one integrand per bundle.
    """
    if isinstance(zeta, (list, tuple)):
        bundles = list(bundles)
        if len(zeta) != len(bundles):
            raise ValueError("need one integrand per bundle")
        for b, z in zip(bundles, zeta):
            yield b, _aligned(b, z)
        return
    for b in bundles:
        yield b, _aligned(b, zeta(b) if callable(zeta) else zeta)


def qv_sandwich_terms(driver: GDriver, bundle: PathBundle, zeta) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-path ``(sigma_low^2 int|zeta|ds, int|zeta|d<B>, sigma_bar^2 int|zeta|ds)``.

    The outer terms use the rounded per-step variances ``fl(sigma^2 dt)`` so the
    ordering is exact in floating point whenever the path's variance lies in the band.
    """
    a = np.abs(_aligned(bundle, zeta))
    dt = bundle.dt
    low = np.sum(a * (driver.sigma_low_sq * dt), axis=1)
    mid = np.sum(a * bundle.dQV, axis=1)
    up = np.sum(a * (driver.sigma_bar_sq * dt), axis=1)
    return low, mid, up


def verify_qv_sandwich(driver: GDriver, bundles: Iterable[PathBundle], zeta,
                       name: str = "qv_sandwich") -> EstimateReport:
    """Pathwise and sup-of-means sandwich of ``int |zeta| d<B>``; zero tolerance.

    ``lhs`` is the largest violation found (``<= 0`` means none).
    """
    worst = -math.inf
    lows, mids, ups, names = [], [], [], []
    n_paths = 0
    for b, z in _pairs(bundles, zeta):
        lo, mid, up = qv_sandwich_terms(driver, b, z)
        worst = max(worst, float(np.max(lo - mid)), float(np.max(mid - up)))
        lows.append(lo)
        mids.append(mid)
        ups.append(up)
        names.append(b.control)
        n_paths = b.n_paths
    e_lo = _sup_mean(lows)[0]
    e_mid = _sup_mean(mids)[0]
    e_up = _sup_mean(ups)[0]
    lhs = max(worst, e_lo - e_mid, e_mid - e_up)
    inputs = {"pathwise_worst": worst, "sup_lower": e_lo, "sup_qv": e_mid, "sup_upper": e_up,
              "controls": names, "n_paths": n_paths}
    return EstimateReport(name, lhs, 0.0, 0.0, 0.0, inputs)


def relation_steps(driver: GDriver, bundle: PathBundle, zeta) -> np.ndarray:
    """Per-step ``zeta d<B> - 2G(zeta) ds``; every entry is ``<= 0`` exactly."""
    z = _aligned(bundle, zeta)
    return z * bundle.dQV - driver.two_g_dt(z, bundle.dt)


def verify_relation(driver: GDriver, bundles: Iterable[PathBundle], zeta,
                         attain: tuple[PathBundle, object] | None = None,
                         name: str = "relation") -> list[EstimateReport]:
    """Pathwise ``int zeta d<B> - int 2G(zeta) ds <= 0`` and its attainment at 0.

    The first report is the pathwise check (largest step term and largest total,
    zero tolerance). If ``attain = (bundle, zeta)`` is given (paths driven by the
    bang-bang scenario for that integrand) a second report checks that the
    sample mean there is within 3 standard errors of 0.
    """
    worst_step = -math.inf
    totals, names = [], []
    n_paths = 0
    for b, z in _pairs(bundles, zeta):
        steps = relation_steps(driver, b, z)
        worst_step = max(worst_step, float(np.max(steps)))
        totals.append(np.sum(steps, axis=1))
        names.append(b.control)
        n_paths = b.n_paths
    worst_total = max(float(np.max(t)) for t in totals)
    sup_mean, sup_se, j = _sup_mean(totals)
    inputs = {"worst_step": worst_step, "worst_total": worst_total, "sup_mean": sup_mean,
              "argmax": names[j], "controls": names, "n_paths": n_paths}
    out = [EstimateReport(f"{name}.pathwise", max(worst_step, worst_total), 0.0, 0.0, 0.0, inputs)]
    if attain is not None:
        ab, az = attain
        az = az(ab) if callable(az) else az
        vals = np.sum(relation_steps(driver, ab, az), axis=1)
        m, se = _mean_se(vals)
        out.append(EstimateReport(f"{name}.attained", abs(m), 0.0, se, 0.0,
                                  {"mean": m, "control": ab.control, "n_paths": ab.n_paths}))
    return out


# ------------------------------------------------------------- A process

def max_abs_eta(samples: Sequence[RepresentationSample]) -> float:
    return max((float(np.max(np.abs(rs.eta[rs.kept]), initial=0.0)) for rs in samples), default=0.0)


def verify_A_monotone(samples: Sequence[RepresentationSample], dx: float, tol: float | None = None,
                      name: str = "A_monotone") -> EstimateReport:
    """Most negative ``dA`` over every sample against ``tol`` (default ``2 dx max|eta|``)."""
    if tol is None:
        tol = 2.0 * dx * max_abs_eta(samples)
    worst, frac = 0.0, 0.0
    for rs in samples:
        w, f, _ = check_A_monotone(rs, tol)
        worst = min(worst, w)
        frac = max(frac, f)
    inputs = {"worst_dA": worst, "violating_fraction": frac,
              "controls": [rs.bundle.control for rs in samples]}
    return EstimateReport(name, -worst, tol, 0.0, 0.0, inputs)


def verify_A_terminal(samples: Sequence[RepresentationSample], grid_tol: float,
                      name: str = "A_terminal") -> EstimateReport:
    """``sup_c mean(-A_T)`` should be 0: ``lhs = -sup_c mean(-A_T) >= 0``."""
    per = [-rs.A[rs.kept, -1] for rs in samples]
    m, se, j = _sup_mean(per)
    inputs = {"sup_mean_neg_AT": m, "argmax": samples[j].bundle.control,
              "controls": [rs.bundle.control for rs in samples]}
    return EstimateReport(name, -m, 0.0, se, grid_tol, inputs)


# ------------------------------------------------------------- uniqueness

def eta_discrepancy(rs1: RepresentationSample, rs2: RepresentationSample,
                    eta_shift: float = 0.0) -> np.ndarray:
    """Per-path ``int |eta1 - (eta2 + eta_shift)| ds`` over paths kept in both samples."""
    if rs1.bundle is not rs2.bundle:
        same = (rs1.bundle.dB.shape == rs2.bundle.dB.shape and np.array_equal(rs1.bundle.dB, rs2.bundle.dB)
                and np.array_equal(rs1.bundle.dQV, rs2.bundle.dQV))
        if not same:
            raise ValueError("samples must be extracted along the same paths")
    keep = rs1.kept & rs2.kept
    d = np.abs(rs1.eta - (rs2.eta + eta_shift))
    return np.sum(d * rs1.bundle.dt, axis=1)[keep]


def uniqueness_discrepancy(pd: PerturbedDriver, sol1: NestedSolution, sol2: NestedSolution,
                           n_paths: int = 1000, seed: int = 0, steps: int = 200,
                           controls: Sequence[VolatilityControl] | None = None,
                           eta_shift: float = 0.0, c: float = 1.0, workers: int = 1,
                           n_piecewise: int = 4) -> EstimateReport:
    """``sup_c mean int |eta1 - eta2| ds`` over ``Gbar_eps`` scenarios against ``c * dx``.

    ``eta_shift`` adds a constant to the second ``eta`` field; a nonzero shift is
    a deliberate corruption and the report is then expected to fail.
    """
    if (sol1.payoff.times != sol2.payoff.times or sol1.payoff.expr.text != sol2.payoff.expr.text
            or sol1.driver != sol2.driver):
        raise PayoffMismatchError("solutions represent different payoffs or drivers")
    Gb = pd.g_bar_epsilon_driver()
    cp = sol1.payoff
    if controls is None:
        controls = extreme_controls(Gb)
        if not Gb.is_degenerate and n_piecewise:
            controls += random_piecewise_controls(Gb, cp.horizon, n_piecewise, seed)
    tg = payoff_path_grid(cp, steps)
    Z = counter_normals(seed, n_paths, tg.n_steps, workers=workers)
    ev1 = StackEvaluator(sol1, tg.times)
    ev2 = StackEvaluator(sol2, tg.times)
    per = []
    excluded = 0
    for ctl in controls:
        b = sample_paths(ctl, tg, n_paths, seed, normals=Z)
        rs1 = extract_representation(sol1, b, ev1)
        rs2 = extract_representation(sol2, b, ev2)
        per.append(eta_discrepancy(rs1, rs2, eta_shift))
        excluded += int(np.count_nonzero(rs1.excluded | rs2.excluded))
    m, se, j = _sup_mean(per)
    dx = max(sol1.dx, sol2.dx)
    tag = "uniqueness" if eta_shift == 0.0 else "uniqueness.corrupted"
    inputs = _payoff_inputs(cp) | {"dx1": sol1.dx, "dx2": sol2.dx, "eta_shift": eta_shift,
                                   "argmax": controls[j].name, "n_paths": n_paths, "seed": seed,
                                   "excluded_paths": excluded}
    return EstimateReport(f"{tag}[{cp.expr.text}]", m, c * dx, se, 0.0, inputs,
                          expected_pass=eta_shift == 0.0)


# ------------------------------------------------------------- suite

def _payoff_reports(cfg: RunConfig, cp: CylinderPayoff) -> Iterator[EstimateReport]:
    G = cfg.driver()
    pd = cfg.perturbed()
    sg = cfg.space_grid(cp.horizon)
    sol = nested_expectation(G, cp, sg, cfl=cfg.cfl, nt=cfg.nt, workers=cfg.workers)
    spec = parse_controls(cfg.controls)
    controls = controls_from_spec(spec, G, cp.horizon, sol, cfg.seed)
    samples = extract_family(sol, controls, cfg.paths, cfg.seed, cfg.steps, cfg.workers)
    text = cp.expr.text
    yield verify_A_monotone(samples, sol.dx, name=f"A_monotone[{text}]")
    yield verify_A_terminal(samples, cfg.apriori_grid_c * sol.dx, name=f"A_terminal[{text}]")
    bundles = [rs.bundle for rs in samples]
    etas = [rs.eta for rs in samples]
    yield verify_qv_sandwich(G, bundles, etas, name=f"qv_sandwich[eta:{text}]")
    fb = [rs for rs in samples if rs.bundle.control == "feedback"]
    attain = (fb[0].bundle, fb[0].eta) if fb else None
    yield from verify_relation(G, bundles, etas, attain, name=f"relation[eta:{text}]")
    if pd is not None:
        yield verify_apriori(pd, cp, solution=sol, n_paths=cfg.paths, seed=cfg.seed, steps=cfg.steps,
                             cfl=cfg.cfl, nt=cfg.nt, workers=cfg.workers, grid_c=cfg.apriori_grid_c,
                             control_spec=cfg.controls)


def _integrand_reports(cfg: RunConfig) -> Iterator[EstimateReport]:
    G = cfg.driver()
    horizon = 1.0
    n = cfg.path_steps(horizon)
    tg = path_grid(horizon, n)
    Z = counter_normals(cfg.seed, cfg.paths, n, workers=cfg.workers)
    spec = [(k, c) for k, c in parse_controls(cfg.controls) if k != "feedback"] or [("extremes", 0)]
    bundles = [sample_paths(c, tg, cfg.paths, cfg.seed, normals=Z)
               for c in controls_from_spec(spec, G, horizon, None, cfg.seed)]
    rng = np.random.default_rng(cfg.seed)
    cuts = np.sort(rng.choice(np.arange(1, n), size=min(5, n - 1), replace=False))
    piece = np.empty(n)
    for a, b, v in zip(np.concatenate([[0], cuts]), np.concatenate([cuts, [n]]),
                       rng.uniform(-2.0, 2.0, size=len(cuts) + 1)):
        piece[a:b] = v
    for label, zeta in (("0", np.zeros(n)), ("1", np.ones(n)), ("-1", -np.ones(n)), ("piecewise", piece)):
        yield verify_qv_sandwich(G, bundles, zeta, name=f"qv_sandwich[{label}]")
        bang = sample_paths(sign_control(G, zeta, tg.times), tg, cfg.paths, cfg.seed, normals=Z)
        yield from verify_relation(G, bundles, zeta, (bang, zeta), name=f"relation[{label}]")


def _symmetric_reports(cfg: RunConfig) -> Iterator[EstimateReport]:
    G = cfg.driver()
    for text, times in SYMMETRIC_CORPUS:
        cp = CylinderPayoff.from_text(text, times, warn=False)
        sg = cfg.space_grid(cp.horizon)
        chk = symmetric_case_check(G, cp, sg, cfg.symmetric_tol, n_paths=cfg.paths,
                                   n_steps=cfg.path_steps(cp.horizon), seed=cfg.seed, cfl=cfg.cfl,
                                   workers=cfg.workers)
        name = cp.expr.text
        yield EstimateReport(f"symmetric_gap[{name}]", abs(chk.gap), cfg.symmetric_tol,
                             inputs={"gap": chk.gap, "is_symmetric": chk.is_symmetric})
        yield EstimateReport(f"symmetric_eta[{name}]", chk.eta_l1, cfg.eta_tol,
                             inputs={"eta_l1": chk.eta_l1})


def _uniqueness_reports(cfg: RunConfig) -> Iterator[EstimateReport]:
    pd = cfg.perturbed()
    if pd is None or pd.lower_floor_sq is None:
        return
    G = cfg.driver()
    cp = CylinderPayoff.from_text("b1*b1", (1.0,), warn=False)
    sg = cfg.space_grid(cp.horizon)
    s1 = nested_expectation(G, cp, sg, cfl=cfg.cfl, nt=cfg.nt, workers=cfg.workers)
    s2 = nested_expectation(G, cp, sg.refine(), cfl=cfg.cfl,
                            nt=None if cfg.nt is None else 4 * cfg.nt, workers=cfg.workers)
    kw = dict(n_paths=cfg.paths, seed=cfg.seed, steps=cfg.steps, c=cfg.uniqueness_c, workers=cfg.workers)
    yield uniqueness_discrepancy(pd, s1, s2, **kw)
    yield uniqueness_discrepancy(pd, s1, s2, eta_shift=0.1, **kw)


def default_suite(cfg: RunConfig) -> Iterator[EstimateReport]:
    """Every report of the verification suite, in a fixed order.

    With ``cfg.suite == "payoff"`` only the configured payoff is checked;
    otherwise the bundled corpus plus the integrand, symmetric and uniqueness
    checks are run.
    """
    if cfg.suite == "payoff":
        yield from _payoff_reports(cfg, cfg.cylinder())
        return
    for text, times in CORPUS:
        yield from _payoff_reports(cfg, CylinderPayoff.from_text(text, times, warn=False))
    yield from _integrand_reports(cfg)
    yield from _symmetric_reports(cfg)
    yield from _uniqueness_reports(cfg)
