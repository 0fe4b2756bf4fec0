"""Sublinear drivers G and closed-form G-normal moments (one space dimension).

A driver is determined by its variance band ``[sigma_low_sq, sigma_bar_sq]``::

    G(a) = 1/2 (sigma_bar_sq * a^+ - sigma_low_sq * a^-)
         = 1/2 max(sigma_bar_sq * a, sigma_low_sq * a)

Every evaluation here works elementwise on numpy arrays as well as on floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DriverError(ValueError):
    """Raised for driver parameters outside their admissible range."""


def _check_finite(**values: float) -> None:
    for name, v in values.items():
        if not math.isfinite(v):
            raise DriverError(f"{name} must be finite, got {v!r}")


@dataclass(frozen=True)
class GDriver:
    """The sublinear function G given by its upper and lower variance."""

    sigma_bar_sq: float
    sigma_low_sq: float

    def __post_init__(self) -> None:
        _check_finite(sigma_bar_sq=self.sigma_bar_sq, sigma_low_sq=self.sigma_low_sq)
        if not 0.0 < self.sigma_low_sq <= self.sigma_bar_sq:
            raise DriverError(
                "need 0 < sigma_low_sq <= sigma_bar_sq, got "
                f"sigma_low_sq={self.sigma_low_sq}, sigma_bar_sq={self.sigma_bar_sq}"
            )

    @property
    def is_degenerate(self) -> bool:
        return self.sigma_low_sq == self.sigma_bar_sq

    @property
    def band(self) -> tuple[float, float]:
        return (self.sigma_low_sq, self.sigma_bar_sq)

    def __call__(self, a):
        return g_eval(self, a)

    def two_g_dt(self, a, dt):
        """Integrated generator ``2 G(a) dt`` over a time step.

        Computed as ``max(a * fl(sigma_bar_sq*dt), a * fl(sigma_low_sq*dt))`` so that
        ``a * dqv <= two_g_dt(a, dt)`` holds bit-exactly for every quadratic-variation
        increment ``dqv = fl(sigma_sq*dt)`` with ``sigma_sq`` inside the band.
        """
        dt = np.asarray(dt, dtype=float)
        return np.maximum(a * (self.sigma_bar_sq * dt), a * (self.sigma_low_sq * dt))


def g_eval(driver: GDriver, a):
    """``G(a) = 1/2 (sigma_bar^2 a^+ - sigma_low^2 a^-)``."""
    a = np.asarray(a, dtype=float)
    out = 0.5 * (driver.sigma_bar_sq * np.maximum(a, 0.0) - driver.sigma_low_sq * np.maximum(-a, 0.0))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PerturbedDriver:
    """A driver together with the perturbations ``G_eps``, ``Gbar_eps`` and ``G^eps``.

    ``lower_floor_sq`` may be ``None`` when ``sigma_low_sq - epsilon <= 0``; in that
    case ``Gbar_eps`` is undefined and :func:`g_bar_epsilon_eval` raises.
    """

    base: GDriver
    epsilon: float
    lower_floor_sq: float | None
    upper_cap_sq: float

    def __post_init__(self) -> None:
        b = self.base
        _check_finite(epsilon=self.epsilon, upper_cap_sq=self.upper_cap_sq)
        half_width = (b.sigma_bar_sq - b.sigma_low_sq) / 2.0
        if not 0.0 < self.epsilon <= half_width:
            raise DriverError(
                f"epsilon must lie in (0, {half_width}] for G_eps to stay sublinear, got {self.epsilon}"
            )
        if self.lower_floor_sq is not None:
            _check_finite(lower_floor_sq=self.lower_floor_sq)
            if not 0.0 < self.lower_floor_sq <= b.sigma_low_sq - self.epsilon:
                raise DriverError(
                    "lower_floor_sq must lie in (0, sigma_low_sq - epsilon], got "
                    f"{self.lower_floor_sq}"
                )
        if self.upper_cap_sq < b.sigma_bar_sq + self.epsilon:
            raise DriverError(
                f"upper_cap_sq must be >= sigma_bar_sq + epsilon, got {self.upper_cap_sq}"
            )

    @classmethod
    def default(cls, base: GDriver) -> "PerturbedDriver":
        """Interior choice: eps = width/4, floor = sigma_low^2 - eps, cap = sigma_bar^2 + eps."""
        eps = (base.sigma_bar_sq - base.sigma_low_sq) / 4.0
        floor = base.sigma_low_sq - eps
        return cls(base, eps, floor if floor > 0.0 else None, base.sigma_bar_sq + eps)

    def g_epsilon_driver(self) -> GDriver:
        """``G_eps`` written in driver form: band ``[sigma_low^2 + eps, sigma_bar^2 - eps]``."""
        b = self.base
        return GDriver(b.sigma_bar_sq - self.epsilon, b.sigma_low_sq + self.epsilon)

    def g_bar_epsilon_driver(self) -> GDriver:
        """``Gbar_eps`` in driver form: band ``[lower_floor_sq, sigma_low^2 - eps]``."""
        if self.lower_floor_sq is None:
            raise DriverError("Gbar_eps is undefined: sigma_low_sq - epsilon <= 0")
        return GDriver(self.base.sigma_low_sq - self.epsilon, self.lower_floor_sq)

    def g_upper_epsilon_driver(self) -> GDriver:
        """``G^eps`` in driver form: band ``[sigma_bar^2 + eps, upper_cap_sq]``."""
        return GDriver(self.upper_cap_sq, self.base.sigma_bar_sq + self.epsilon)


def g_epsilon_eval(pd: PerturbedDriver, a):
    a = np.asarray(a, dtype=float)
    out = g_eval(pd.base, a) - 0.5 * pd.epsilon * np.abs(a)
    return float(out) if np.ndim(out) == 0 else out


def g_bar_epsilon_eval(pd: PerturbedDriver, a):
    return g_eval(pd.g_bar_epsilon_driver(), a)


def g_upper_epsilon_eval(pd: PerturbedDriver, a):
    return g_eval(pd.g_upper_epsilon_driver(), a)


def gnormal_abs_moment(driver: GDriver, a: float, p: float) -> float:
    """``E[|a X|^p]`` for G-normal ``X``: a centred Gaussian moment with variance ``2 G(a^2)``."""
    if not p >= 1.0:
        raise ValueError(f"p must be >= 1, got {p}")
    var = 2.0 * g_eval(driver, a * a)
    if var == 0.0:
        return 0.0
    return var ** (p / 2.0) * 2.0 ** (p / 2.0) * math.gamma((p + 1.0) / 2.0) / math.sqrt(math.pi)
