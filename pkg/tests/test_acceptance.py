"""Acceptance suite: one group of tests per criterion, summarized at the end of the run.

Reference values were computed independently (Gaussian quadrature with
scipy.integrate.quad, or closed forms) and frozen here.
"""

import math

import numpy as np
import pytest

from gexpect.cli import cmd_expect, cmd_verify
from gexpect.config import RunConfig
from gexpect.estimates import (
    CORPUS,
    uniqueness_discrepancy,
    verify_apriori,
    verify_qv_sandwich,
    verify_relation,
)
from gexpect.gcore import GDriver, PerturbedDriver, gnormal_abs_moment
from gexpect.gheat import SpaceGrid
from gexpect.payoff import CylinderPayoff, nested_expectation
from gexpect.represent import (
    check_A_monotone,
    extract_representation,
    reconstruction_report,
    symmetric_case_check,
)
from gexpect.simulate import (
    counter_normals,
    extreme_controls,
    feedback_control,
    mc_expectation,
    path_grid,
    payoff_path_grid,
    random_piecewise_controls,
    sample_paths,
    sign_control,
)
from gexpect.stack import StackEvaluator

G = GDriver(4.0, 1.0)
SG1 = SpaceGrid(-20.0, 20.0, 801)


def cyl(text, times=(1.0,)):
    return CylinderPayoff.from_text(text, times, warn=False)


# ------------------------------------------------------------------ 1

@pytest.mark.criterion(1, "quadratic payoffs: E[b1^2] = 4, E[-b1^2] = -1 within 1%")
def test_c01_quadratic(capsys, detail):
    cfg = RunConfig(payoff="b1*b1")
    up = cmd_expect(cfg)
    down = cmd_expect(RunConfig(payoff="-(b1*b1)"))
    out = capsys.readouterr().out
    assert "E_G[b1 * b1] = 4.000000" in out
    assert "nx=801" in out and "dx=0.05" in out
    detail(f"{up:.9f}, {down:.9f}")
    assert abs(up - 4.0) <= 0.01 * 4.0
    assert abs(down + 1.0) <= 0.01 * 1.0


# ------------------------------------------------------------------ 2

# E[phi(sigma Z)] by adaptive quadrature, split at the kinks.
QUAD = {
    1.0: {"b1*b1": 1.0, "abs(b1)": 0.7978845608028655, "max(b1, 0)": 0.39894228040143276,
          "min(abs(b1), 1)": 0.6312536196274929, "b1": 0.0, "3": 3.0},
    4.0: {"b1*b1": 4.0, "abs(b1)": 1.5957691216057313, "max(b1, 0)": 0.7978845608028656,
          "min(abs(b1), 1)": 0.8045828920005067, "b1": 0.0, "3": 3.0},
}


@pytest.mark.criterion(2, "degenerate driver matches quadrature within 10 dx^2 + 1e-8")
@pytest.mark.parametrize("s2", [1.0, 4.0])
def test_c02_degenerate_oracle(s2, detail):
    d = GDriver(s2, s2)
    worst = 0.0
    for text, ref in QUAD[s2].items():
        sol = nested_expectation(d, cyl(text))
        tol = 10.0 * sol.dx ** 2 + 1e-8
        err = abs(sol.value - ref)
        worst = max(worst, err / tol)
        assert err <= tol, (text, sol.value, ref, tol)
    detail(f"s2={s2:g}: worst err/tol={worst:.3f}")


# ------------------------------------------------------------------ 3

def _random_payoff(rng) -> str:
    a, c, k = (float(np.round(v, 3)) for v in rng.uniform(-2.0, 2.0, size=3))
    kind = rng.integers(0, 6)
    lin = f"{a}*b1 + {c}"
    return [lin, f"abs({lin})", f"max({lin}, {k})", f"min({lin}, {k})",
            f"clamp({lin}, -1, 1)", f"abs(b1 - {c}) - abs(b1 + {k})"][kind]


@pytest.mark.criterion(3, "sublinearity over 200 random payoff pairs")
def test_c03_sublinearity(detail):
    rng = np.random.default_rng(20240)
    sg = SpaceGrid(-20.0, 20.0, 201)

    def E(text):
        return nested_expectation(G, cyl(text), sg).value

    worst_sub = -math.inf
    for _ in range(200):
        f, g = _random_payoff(rng), _random_payoff(rng)
        ef, eg = E(f), E(g)
        # subadditivity
        viol = E(f"({f}) + ({g})") - (ef + eg)
        worst_sub = max(worst_sub, viol)
        assert viol <= 1e-9, (f, g, viol)
        # monotonicity: g dominated by g + (nonnegative term), exact comparison
        assert eg <= E(f"({g}) + abs({f})")
        # positive homogeneity for dyadic factors, bit for bit
        for lam in (0.25, 0.5, 2.0, 8.0):
            assert E(f"{lam}*({f})") == lam * ef
    detail(f"worst subadditivity excess {worst_sub:.2e}")


# ------------------------------------------------------------------ 4

APRIORI_CORPUS = [(t, ts) for t, ts in CORPUS]


@pytest.mark.criterion(4, "a priori estimate holds on the corpus; b1^2 margin 1.5 within 5%")
@pytest.mark.parametrize("text,times", APRIORI_CORPUS, ids=[t for t, _ in APRIORI_CORPUS])
def test_c04_apriori(text, times, detail):
    pd = PerturbedDriver.default(G)
    assert pd.epsilon == 0.75
    sg = SG1 if len(times) == 1 else SpaceGrid.default(G, times[-1], 401)
    rep = verify_apriori(pd, cyl(text, times), sg, n_paths=1000, seed=7, steps=200)
    assert rep.passed, rep.as_dict()
    assert rep.grid_tol == pytest.approx(10.0 * sg.dx)
    if text == "b1*b1":
        detail(f"b1^2 margin {rep.margin:.6f}")
        assert abs(rep.margin - 1.5) <= 0.05 * 1.5
        assert rep.lhs == pytest.approx(0.75, rel=1e-6)
        assert rep.rhs == pytest.approx(2.25, rel=1e-6)
    if text in ("b1", "3"):
        assert rep.lhs == 0.0


# ------------------------------------------------------------------ 5

N5, K5 = 10_000, 1_000


@pytest.fixture(scope="module")
def normals5():
    return counter_normals(11, N5, K5)


def _bundles(controls, tg, Z):
    for c in controls:
        yield sample_paths(c, tg, N5, 11, normals=Z)


@pytest.mark.criterion(5, "pathwise sandwich and zeta d<B> <= 2G(zeta) dt relation exact on 10k x 1000 paths")
def test_c05_deterministic_integrands(normals5, detail):
    tg = path_grid(1.0, K5)
    controls = extreme_controls(G) + random_piecewise_controls(G, 1.0, 2, seed=3)
    rng = np.random.default_rng(5)
    piece = np.repeat(rng.uniform(-2.0, 2.0, size=8), K5 // 8)
    for label, zeta in (("1", np.ones(K5)), ("-1", -np.ones(K5)), ("piecewise", piece)):
        rep = verify_qv_sandwich(G, _bundles(controls, tg, normals5), zeta, name=f"qv[{label}]")
        assert rep.passed and rep.lhs <= 0.0, rep.as_dict()
        bang = sample_paths(sign_control(G, zeta, tg.times), tg, N5, 11, normals=normals5)
        path, att = verify_relation(G, _bundles(controls, tg, normals5), zeta, (bang, zeta))
        assert path.lhs <= 0.0 and path.passed, path.as_dict()
        assert att.passed, att.as_dict()
    # constant integrands: equality at the extreme constant scenarios
    rep = verify_qv_sandwich(G, _bundles(extreme_controls(G), tg, normals5), 1.0)
    assert rep.inputs["sup_qv"] == pytest.approx(4.0, rel=1e-12)
    detail("deterministic integrands ok")


@pytest.mark.criterion(5, "pathwise sandwich and zeta d<B> <= 2G(zeta) dt relation exact on 10k x 1000 paths")
def test_c05_eta_integrand_feedback(normals5, detail):
    cp = cyl("abs(b1)")
    sol = nested_expectation(G, cp, SG1)
    tg = path_grid(1.0, K5)
    ev = StackEvaluator(sol, tg.times)

    def eta(bundle):
        return 0.5 * ev.evaluate_all(bundle.B)[2]

    controls = extreme_controls(G) + random_piecewise_controls(G, 1.0, 2, seed=3) + [feedback_control(G, sol)]
    rep = verify_qv_sandwich(G, _bundles(controls, tg, normals5), eta, name="qv[eta]")
    assert rep.lhs <= 0.0 and rep.passed, rep.as_dict()
    fb = sample_paths(controls[-1], tg, N5, 11, normals=normals5)
    path, att = verify_relation(G, _bundles(controls, tg, normals5), eta, (fb, eta))
    assert path.lhs <= 0.0 and path.passed
    assert att.passed, att.as_dict()
    detail(f"bang-bang mean {att.inputs['mean']:.3g} (se {att.mc_stderr:.2g})")


# ------------------------------------------------------------------ 6

def _A_violation(sol, n_paths=1000, steps=200, seed=2):
    tg = payoff_path_grid(sol.payoff, steps)
    Z = counter_normals(seed, n_paths, tg.n_steps)
    ev = StackEvaluator(sol, tg.times)
    controls = extreme_controls(G) + random_piecewise_controls(G, sol.payoff.horizon, 2, seed) + [
        feedback_control(G, sol)]
    samples = [extract_representation(sol, sample_paths(c, tg, n_paths, seed, normals=Z), ev) for c in controls]
    max_eta = max(float(np.max(np.abs(rs.eta))) for rs in samples)
    tol = 2.0 * sol.dx * max_eta
    worst = min(check_A_monotone(rs, tol)[0] for rs in samples)
    passed = all(check_A_monotone(rs, tol)[2] for rs in samples)
    return max(0.0, -worst), tol, passed


@pytest.mark.criterion(6, "A nondecreasing within 2 dx max|eta|; violation halves with dx")
@pytest.mark.parametrize("text,times", CORPUS, ids=[t for t, _ in CORPUS])
def test_c06_A_monotone(text, times):
    sg = SG1 if len(times) == 1 else SpaceGrid.default(G, times[-1], 401)
    violation, tol, passed = _A_violation(nested_expectation(G, cyl(text, times), sg))
    assert passed and violation <= tol


@pytest.mark.criterion(6, "A nondecreasing within 2 dx max|eta|; violation halves with dx")
def test_c06_refinement_abs(detail):
    cp = cyl("abs(b1)")
    coarse = _A_violation(nested_expectation(G, cp, SpaceGrid(-20.0, 20.0, 401)))[0]
    fine = _A_violation(nested_expectation(G, cp, SpaceGrid(-20.0, 20.0, 801)))[0]
    detail(f"worst violation {coarse:.3g} -> {fine:.3g}")
    assert fine <= 0.5 * coarse


# ------------------------------------------------------------------ 7

@pytest.mark.criterion(7, "symmetric payoffs: gap <= 1e-8 and path-averaged int|eta| <= 1e-6")
@pytest.mark.parametrize("text,times", [("b1", (1.0,)), ("b1 + 2*b2", (1.0, 2.0))])
def test_c07_symmetric(text, times, detail):
    cp = cyl(text, times)
    sg = SpaceGrid.default(G, cp.horizon, 801)
    chk = symmetric_case_check(G, cp, sg, 1e-8, n_paths=1000, n_steps=int(200 * cp.horizon), seed=4)
    detail(f"{text}: gap {chk.gap:.1e}, eta {chk.eta_l1:.1e}")
    assert chk.is_symmetric and abs(chk.gap) <= 1e-8
    assert chk.eta_l1 <= 1e-6


# ------------------------------------------------------------------ 8

LEVELS = [(201, 100), (401, 200), (801, 400)]  # (space points on [-20, 20], path steps)


@pytest.mark.criterion(8, "reconstruction residual decreases over 3 refinements; exact for linear payoffs")
@pytest.mark.parametrize("text", ["b1*b1", "abs(b1)"])
def test_c08_residual_refinement(text, detail):
    cp = cyl(text)
    l2 = []
    for nx, steps in LEVELS:
        sol = nested_expectation(G, cp, SpaceGrid(-20.0, 20.0, nx))
        tg = path_grid(1.0, steps)
        bundle = sample_paths(feedback_control(G, sol), tg, 1000, 8)
        l2.append(reconstruction_report(extract_representation(sol, bundle)).l2)
    detail(f"{text}: l2 " + " > ".join(f"{v:.4g}" for v in l2))
    assert l2[0] > l2[1] > l2[2]


@pytest.mark.criterion(8, "reconstruction residual decreases over 3 refinements; exact for linear payoffs")
def test_c08_linear_exact():
    sol = nested_expectation(G, cyl("b1"), SG1)
    tg = path_grid(1.0, 200)
    for c in extreme_controls(G) + random_piecewise_controls(G, 1.0, 3, 1) + [feedback_control(G, sol)]:
        norms = reconstruction_report(extract_representation(sol, sample_paths(c, tg, 1000, 8)))
        assert (norms.l1, norms.l2, norms.max) == (0.0, 0.0, 0.0)


# ------------------------------------------------------------------ 9

@pytest.mark.criterion(9, "MC with feedback within max(2%, 3 se) of PDE; adding controls never lowers it")
@pytest.mark.parametrize("text,times", CORPUS, ids=[t for t, _ in CORPUS])
def test_c09_mc_pde(text, times, detail):
    cp = cyl(text, times)
    sg = SG1 if len(times) == 1 else SpaceGrid.default(G, times[-1], 401)
    sol = nested_expectation(G, cp, sg)
    n_steps = int(200 * cp.horizon)
    fb = feedback_control(G, sol)
    res = mc_expectation(cp, [fb], 10_000, 9, n_steps=n_steps)
    tol = max(0.02 * abs(sol.value), 3.0 * res.stderr)
    assert abs(res.estimate - sol.value) <= tol, (res.estimate, sol.value, tol)
    small = extreme_controls(G)
    base = mc_expectation(cp, small, 2000, 9, n_steps=n_steps).estimate
    more = mc_expectation(cp, small + random_piecewise_controls(G, cp.horizon, 3, 9), 2000, 9,
                          n_steps=n_steps).estimate
    most = mc_expectation(cp, small + random_piecewise_controls(G, cp.horizon, 3, 9) + [fb], 2000, 9,
                          n_steps=n_steps).estimate
    assert base <= more <= most
    if text == "abs(b1) + b2*b2":
        detail(f"{text}: MC {res.estimate:.4f} vs PDE {sol.value:.4f}")


# ------------------------------------------------------------------ 10

@pytest.mark.criterion(10, "uniqueness discrepancy <= C dx and decreasing; corrupted eta fails")
def test_c10_uniqueness(detail):
    pd = PerturbedDriver.default(G)
    cp = cyl("b1*b1")
    sols = {nx: nested_expectation(G, cp, SpaceGrid(-20.0, 20.0, nx)) for nx in (401, 801, 1601)}
    d1 = uniqueness_discrepancy(pd, sols[401], sols[801], n_paths=1000, seed=10, steps=200)
    d2 = uniqueness_discrepancy(pd, sols[801], sols[1601], n_paths=1000, seed=10, steps=200)
    assert d1.passed and d2.passed
    assert d1.lhs <= 1.0 * sols[401].dx and d2.lhs <= 1.0 * sols[801].dx
    # both fields equal 1 up to round-off; "decreasing" is read above a round-off floor
    assert d2.lhs <= max(d1.lhs, 1e-9)
    bad = uniqueness_discrepancy(pd, sols[801], sols[1601], n_paths=1000, seed=10, steps=200, eta_shift=0.1)
    detail(f"d={d1.lhs:.1e},{d2.lhs:.1e}; corrupted {bad.lhs:.4f}")
    assert abs(bad.lhs - 0.1 * cp.horizon) <= 0.05 * 0.1 * cp.horizon
    assert not bad.passed and bad.ok


# ------------------------------------------------------------------ 11

# Quadrature values of E[|a sigma_bar Z|^p].
MOMENTS = {
    4.0: {(1, -2.0): 3.1915382432114616, (1, 1.0): 1.5957691216057308, (2, -2.0): 16.0, (2, 1.0): 4.0,
          (3, -2.0): 102.12922378276679, (3, 1.0): 12.766152972845848, (4, -2.0): 768.0000000000001,
          (4, 1.0): 48.00000000000001},
    1.0: {(1, -2.0): 1.5957691216057308, (1, 1.0): 0.7978845608028654, (2, -2.0): 4.0, (2, 1.0): 1.0,
          (3, -2.0): 12.766152972845848, (3, 1.0): 1.595769121605731, (4, -2.0): 48.00000000000001,
          (4, 1.0): 3.0000000000000004},
}


@pytest.mark.criterion(11, "G-normal absolute moments match quadrature to 1e-10")
@pytest.mark.parametrize("driver", [GDriver(4.0, 1.0), GDriver(1.0, 1.0)], ids=["G(4,1)", "G(1,1)"])
def test_c11_moments(driver):
    for (p, a), ref in MOMENTS[driver.sigma_bar_sq].items():
        assert gnormal_abs_moment(driver, a, p) == pytest.approx(ref, rel=1e-10, abs=0)


# ------------------------------------------------------------------ 12

@pytest.mark.criterion(12, "verify output byte-identical across runs and worker counts")
def test_c12_determinism(tmp_path, detail):
    base = dict(x_min=-10.0, x_max=10.0, nx=241, paths=200, steps=50, seed=12)
    bodies, codes = [], []
    for run, workers in enumerate((1, 1, 3)):
        cfg = RunConfig(workers=workers, out=str(tmp_path / f"run{run}"), **base)
        codes.append(cmd_verify(cfg))
        lines = (tmp_path / f"run{run}" / "verify.jsonl").read_bytes().splitlines(keepends=True)
        bodies.append(b"".join(lines[1:]))
    assert bodies[0] == bodies[1] == bodies[2]
    assert codes == [0, 0, 0]
    n_lines = bodies[0].count(b"\n")
    detail(f"{n_lines} report lines")
