"""A priori bound over the bundled corpus for a few perturbation sizes.

    python3 scripts/apriori_margins.py --paths 500
"""

import argparse

from gexpect.estimates import CORPUS, verify_apriori
from gexpect.gcore import GDriver, PerturbedDriver
from gexpect.gheat import SpaceGrid
from gexpect.payoff import CylinderPayoff, nested_expectation


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--paths", type=int, default=500)
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--nx", type=int, default=401)
    ap.add_argument("--eps", type=float, nargs="+", default=[0.25, 0.5, 0.75])
    args = ap.parse_args()

    G = GDriver(4.0, 1.0)
    print(f"{'payoff':>28} {'eps':>5} {'lhs':>10} {'rhs':>10} {'margin':>10} pass")
    for text, times in CORPUS:
        cp = CylinderPayoff.from_text(text, times, warn=False)
        sol = nested_expectation(G, cp, SpaceGrid.default(G, cp.horizon, args.nx))
        for e in args.eps:
            pd = PerturbedDriver(G, e, None, G.sigma_bar_sq + e)
            r = verify_apriori(pd, cp, solution=sol, n_paths=args.paths, steps=args.steps)
            print(f"{cp.expr.text:>28} {e:5.2f} {r.lhs:10.4f} {r.rhs:10.4f} {r.margin:10.4f} {r.passed}")


if __name__ == "__main__":
    main()
