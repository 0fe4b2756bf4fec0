"""Reconstruction residual under grid refinement (space, time and path steps together).

    python3 scripts/refinement_demo.py --payoff "abs(b1)" --paths 2000
"""

import argparse

from gexpect.estimates import extract_family
from gexpect.gcore import GDriver
from gexpect.gheat import SpaceGrid
from gexpect.payoff import CylinderPayoff, nested_expectation
from gexpect.represent import reconstruction_report
from gexpect.simulate import feedback_control


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--payoff", default="abs(b1)")
    ap.add_argument("--paths", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--levels", type=int, default=3)
    args = ap.parse_args()

    G = GDriver(4.0, 1.0)
    cp = CylinderPayoff.from_text(args.payoff, (1.0,), warn=False)
    nx, steps = 201, 100
    print(f"{'nx':>6} {'steps':>6} {'value':>12} {'l2':>10} {'max':>10}")
    for _ in range(args.levels):
        sol = nested_expectation(G, cp, SpaceGrid(-20.0, 20.0, nx))
        (rs,) = extract_family(sol, [feedback_control(G, sol)], args.paths, args.seed, steps)
        n = reconstruction_report(rs)
        print(f"{nx:6d} {steps:6d} {sol.value:12.6f} {n.l2:10.4g} {n.max:10.4g}")
        nx, steps = 2 * nx - 1, 2 * steps


if __name__ == "__main__":
    main()
