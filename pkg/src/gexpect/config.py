"""Run configuration shared by the command line and the verification suite.

Config files are INI text with three sections::

    [driver]   sigma_bar_sq, sigma_low_sq, epsilon, sigma_eps_floor_sq, sigma_eps_cap_sq
    [grid]     x_min, x_max, nx, nt, cfl, steps
    [run]      payoff, times, paths, seed, controls, out, workers, suite,
               apriori_grid_c, uniqueness_c, symmetric_tol, eta_tol

Blank values (or ``none``) mean "use the default rule". Unknown sections or
keys are rejected.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, field, fields, replace

from gexpect.gcore import GDriver, PerturbedDriver
from gexpect.gheat import SpaceGrid
from gexpect.payoff import CylinderPayoff


class ConfigError(ValueError):
    pass


_SECTIONS = {
    "driver": ("sigma_bar_sq", "sigma_low_sq", "epsilon", "sigma_eps_floor_sq", "sigma_eps_cap_sq"),
    "grid": ("x_min", "x_max", "nx", "nt", "cfl", "steps"),
    "run": ("payoff", "times", "paths", "seed", "controls", "out", "workers", "suite",
            "apriori_grid_c", "uniqueness_c", "symmetric_tol", "eta_tol"),
}


@dataclass(frozen=True)
class RunConfig:
    sigma_bar_sq: float = 4.0
    sigma_low_sq: float = 1.0
    epsilon: float | None = None  # default: (sigma_bar_sq - sigma_low_sq) / 4
    sigma_eps_floor_sq: float | None = None  # default: sigma_low_sq - epsilon
    sigma_eps_cap_sq: float | None = None  # default: sigma_bar_sq + epsilon
    x_min: float | None = None  # default: -10 sd of B at the horizon under sigma_bar
    x_max: float | None = None
    nx: int = 801
    nt: int | None = None  # PDE steps over [0, tn]; default from the CFL ratio
    cfl: float = 0.5
    steps: int = 200  # path steps per unit time
    payoff: str = "b1*b1"
    times: tuple[float, ...] = (1.0,)
    paths: int = 1000
    seed: int = 0
    controls: str = "extremes,piecewise:8,feedback"
    out: str | None = None
    workers: int = 1
    suite: str = "corpus"  # "corpus" or "payoff"
    apriori_grid_c: float = 10.0
    uniqueness_c: float = 1.0
    symmetric_tol: float = 1e-8
    eta_tol: float = 1e-6

    def __post_init__(self) -> None:
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))
        self.driver()
        self.perturbed()
        if self.nx < 3:
            raise ConfigError("nx must be at least 3")
        if self.nt is not None and self.nt < 1:
            raise ConfigError("nt must be positive")
        if not 0.0 < self.cfl <= 1.0:
            raise ConfigError("cfl must lie in (0, 1]")
        if self.steps < 1 or self.paths < 1 or self.workers < 1:
            raise ConfigError("steps, paths and workers must be positive")
        if self.suite not in ("corpus", "payoff"):
            raise ConfigError(f"suite must be 'corpus' or 'payoff', got {self.suite!r}")
        if (self.x_min is None) != (self.x_max is None):
            raise ConfigError("give both x_min and x_max, or neither")
        self.cylinder()
        parse_controls(self.controls)

    def driver(self) -> GDriver:
        return GDriver(self.sigma_bar_sq, self.sigma_low_sq)

    def perturbed(self) -> PerturbedDriver:
        d = self.driver()
        if self.epsilon is None and d.is_degenerate:
            return None  # no admissible perturbation of a degenerate driver
        eps = self.epsilon if self.epsilon is not None else (d.sigma_bar_sq - d.sigma_low_sq) / 4.0
        floor = self.sigma_eps_floor_sq
        if floor is None:
            floor = d.sigma_low_sq - eps if d.sigma_low_sq - eps > 0.0 else None
        cap = self.sigma_eps_cap_sq if self.sigma_eps_cap_sq is not None else d.sigma_bar_sq + eps
        return PerturbedDriver(d, eps, floor, cap)

    def cylinder(self, warn: bool = False) -> CylinderPayoff:
        return CylinderPayoff.from_text(self.payoff, self.times, warn=warn)

    def space_grid(self, horizon: float | None = None) -> SpaceGrid:
        h = horizon if horizon is not None else self.times[-1]
        if self.x_min is None:
            return SpaceGrid.default(self.driver(), h, self.nx)
        return SpaceGrid(self.x_min, self.x_max, self.nx)

    def path_steps(self, horizon: float) -> int:
        return max(1, int(round(self.steps * horizon)))

    def resolved(self) -> dict:
        """Every field with defaults expanded (the dictionary fed back reproduces the run)."""
        out = asdict(self)
        pd = self.perturbed()
        if pd is not None:
            out["epsilon"] = pd.epsilon
            out["sigma_eps_floor_sq"] = pd.lower_floor_sq
            out["sigma_eps_cap_sq"] = pd.upper_cap_sq
        if self.x_min is None:
            sg = self.space_grid()
            out["x_min"], out["x_max"] = sg.x_min, sg.x_max
        out["times"] = list(self.times)
        return out

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)


def parse_controls(spec: str) -> list[tuple[str, int]]:
    """``"extremes,piecewise:8,feedback"`` -> ``[("extremes", 0), ("piecewise", 8), ("feedback", 0)]``."""
    out = []
    for part in (p.strip() for p in spec.split(",")):
        if not part:
            continue
        name, _, arg = part.partition(":")
        if name not in ("extremes", "piecewise", "feedback"):
            raise ConfigError(f"unknown control family {name!r}")
        if name == "piecewise":
            try:
                count = int(arg) if arg else 8
            except ValueError:
                raise ConfigError(f"bad piecewise count {arg!r}") from None
            if count < 0:
                raise ConfigError("piecewise count must be >= 0")
            out.append((name, count))
        elif arg:
            raise ConfigError(f"control family {name!r} takes no argument")
        else:
            out.append((name, 0))
    if not out:
        raise ConfigError("empty control specification")
    return out


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    t = _TYPES[key]
    s = raw.strip()
    optional = "None" in t
    if optional and s.lower() in ("", "none"):
        return None
    try:
        if t.startswith("float"):
            v = float(s)
            if not math.isfinite(v):
                raise ValueError
            return v
        if t.startswith("int"):
            return int(s)
        if t.startswith("tuple"):
            return tuple(float(x) for x in s.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return s


def parse_times(text: str) -> tuple[float, ...]:
    return _convert("times", text)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    with open(path) as fh:
        cp.read_file(fh)
    kw = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in cp.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            kw[key] = _convert(key, raw)
    return replace(base or RunConfig(), **kw)


def dump_config(cfg: RunConfig) -> str:
    """INI text for ``cfg`` (defaults expanded)."""
    r = cfg.resolved()
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for k in keys:
            v = r[k]
            if v is None:
                s = "none"
            elif isinstance(v, list):
                s = ", ".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                s = repr(v)
            else:
                s = str(v)
            lines.append(f"{k} = {s}")
        lines.append("")
    return "\n".join(lines)
