import json
import math

import numpy as np
import pytest

from gexpect.gcore import GDriver, PerturbedDriver
from gexpect.gheat import SpaceGrid
from gexpect.payoff import CylinderPayoff, nested_expectation
from gexpect.estimates import (
    EstimateReport,
    PayoffMismatchError,
    eta_discrepancy,
    extract_family,
    qv_sandwich_terms,
    uniqueness_discrepancy,
    verify_A_monotone,
    verify_A_terminal,
    verify_apriori,
    verify_qv_sandwich,
    verify_relation,
)
from gexpect.simulate import constant_control, extreme_controls, path_grid, sample_paths, sign_control

G = GDriver(4.0, 1.0)
PD = PerturbedDriver.default(G)
SG = SpaceGrid(-20.0, 20.0, 201)


def test_report_logic():
    r = EstimateReport("x", 1.0, 0.9, mc_stderr=0.02, grid_tol=0.05)
    assert r.passed and r.ok and r.margin == pytest.approx(-0.1)
    assert not EstimateReport("x", 1.0, 0.9, grid_tol=0.05).passed
    assert EstimateReport("x", 0.1, 0.0, mc_stderr=math.nan, grid_tol=0.1).passed
    neg = EstimateReport("x", 1.0, 0.0, expected_pass=False)
    assert not neg.passed and neg.ok
    d = json.loads(r.to_json())
    assert set(d) == {"name", "lhs", "rhs", "margin", "mc_stderr", "grid_tol", "pass", "expected_pass", "inputs"}


def test_apriori_linear_and_quadratic():
    lin = verify_apriori(PD, CylinderPayoff.from_text("b1", (1.0,)), SG, n_paths=100, steps=20)
    assert lin.lhs == 0.0 and lin.rhs == pytest.approx(0.0, abs=1e-12) and lin.passed
    q = verify_apriori(PD, CylinderPayoff.from_text("b1*b1", (1.0,), warn=False), SG, n_paths=100, steps=20)
    # eta = 1, so lhs = eps; rhs = 4 - 1.75 (the concave side uses the low end of the G_eps band)
    assert q.lhs == pytest.approx(0.75, abs=1e-6)
    assert q.rhs == pytest.approx(2.25, abs=1e-6)
    assert q.passed and q.inputs["controls"][-1] == "feedback"


def test_apriori_rejects_wide_controls():
    cp = CylinderPayoff.from_text("abs(b1)", (1.0,))
    with pytest.raises(ValueError):
        verify_apriori(PD, cp, SG, controls=extreme_controls(G), n_paths=10, steps=10)


def test_apriori_margin_tightens_with_eps():
    cp = CylinderPayoff.from_text("abs(b1)", (1.0,))
    sol = nested_expectation(G, cp, SG)
    margins = [verify_apriori(PerturbedDriver(G, e, None, 4.0 + e), cp, solution=sol,
                              n_paths=200, steps=40).margin for e in (0.25, 0.5, 0.75)]
    assert all(m >= 0 for m in margins)
    assert margins[0] >= margins[1] >= margins[2]


def _bundles():
    tg = path_grid(1.0, 30)
    return [sample_paths(c, tg, 50, seed=2) for c in extreme_controls(G)]


def test_sandwich_and_relation_trivial():
    bs = _bundles()
    lo, mid, up = qv_sandwich_terms(G, bs[0], 1.0)
    assert np.all(lo == mid) and np.all(mid <= up)
    s = verify_qv_sandwich(G, bs, 0.0)
    assert s.lhs == 0.0 and s.passed
    rel = verify_relation(G, bs, -1.0)
    assert len(rel) == 1 and rel[0].passed
    tg = bs[0].times
    zeta = np.where(tg[:-1] < 0.5, 1.0, -2.0)
    bb = sample_paths(sign_control(G, zeta, tg), path_grid(1.0, 30), 50, seed=2)
    rel = verify_relation(G, bs, zeta, attain=(bb, zeta))
    assert rel[1].lhs == 0.0 and all(r.passed for r in rel)
    with pytest.raises(ValueError):
        verify_qv_sandwich(G, bs, [0.0])


def test_A_reports():
    cp = CylinderPayoff.from_text("abs(b1)", (1.0,))
    sol = nested_expectation(G, cp, SG)
    fam = extract_family(sol, extreme_controls(G), 100, 0, 40)
    mono = verify_A_monotone(fam, sol.dx)
    assert mono.lhs <= 0.0 and mono.passed
    term = verify_A_terminal(fam, 0.0)
    assert term.passed and term.inputs["argmax"] == "const(4)"


def test_uniqueness_self_and_corrupted():
    cp = CylinderPayoff.from_text("b1*b1", (1.0,), warn=False)
    # the corruption is only resolvable once dx < 0.1
    fine = SpaceGrid(-10.0, 10.0, 401)
    s1 = nested_expectation(G, cp, fine)
    s2 = nested_expectation(G, cp, fine.refine())
    r = uniqueness_discrepancy(PD, s1, s2, n_paths=100, steps=40)
    assert r.ok and r.passed and r.lhs < 1e-9
    bad = uniqueness_discrepancy(PD, s1, s2, n_paths=100, steps=40, eta_shift=0.1)
    assert bad.name.startswith("uniqueness.corrupted") and not bad.passed and bad.ok
    assert bad.lhs == pytest.approx(0.1, abs=1e-6)
    other = nested_expectation(G, CylinderPayoff.from_text("abs(b1)", (1.0,)), SG)
    with pytest.raises(PayoffMismatchError):
        uniqueness_discrepancy(PD, s1, other, n_paths=10, steps=10)


def test_eta_discrepancy_requires_same_paths():
    cp = CylinderPayoff.from_text("abs(b1)", (1.0,))
    sol = nested_expectation(G, cp, SG)
    a, b = extract_family(sol, extreme_controls(G), 20, 0, 10)
    assert np.all(eta_discrepancy(a, a) == 0.0)
    with pytest.raises(ValueError):
        eta_discrepancy(a, b)
