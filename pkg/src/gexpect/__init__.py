"""Numerical G-expectations and martingale representation for G-Brownian motion."""

from gexpect.gcore import GDriver, PerturbedDriver, g_eval, gnormal_abs_moment
from gexpect.gheat import SpaceGrid, TimeGrid, ValueSurface, solve_gheat, surface_eval
from gexpect.payoff import CylinderPayoff, eval_payoff, nested_expectation, parse_payoff

__all__ = [
    "GDriver",
    "PerturbedDriver",
    "g_eval",
    "gnormal_abs_moment",
    "SpaceGrid",
    "TimeGrid",
    "ValueSurface",
    "solve_gheat",
    "surface_eval",
    "CylinderPayoff",
    "eval_payoff",
    "nested_expectation",
    "parse_payoff",
]

__version__ = "0.1.0"
