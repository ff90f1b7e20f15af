"""Experiment configuration: TOML files parsed into dataclasses.

Coefficients may be numbers or expression strings in ``x1, x2`` (and
``r, theta``), parsed with sympy. Example::

    output = "out/desk"
    seed = 0

    [grid]
    r0 = 1.0
    r1 = 2.0
    nr = 16
    ntheta = 32
    T = 1.0
    nt = 64

    [system]
    preset = "desk"          # desk | manufactured-dirichlet | manufactured-robin | custom

    [source]
    kind = "bumps"           # zero | manufactured | bumps | basis | file

See ``configs/`` for complete files.
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np
import sympy as sp_

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from carleman_lab.errors import ParameterError

PRESETS = ("desk", "manufactured-dirichlet", "manufactured-robin", "custom")
SOURCE_KINDS = ("zero", "manufactured", "bumps", "basis", "file")


class ConfigError(ValueError):
    """Invalid or unreadable configuration (CLI exit status 2)."""


_X1, _X2 = sp_.symbols("x1 x2", real=True)
_LOCALS = {"x1": _X1, "x2": _X2, "r": sp_.sqrt(_X1**2 + _X2**2), "theta": sp_.atan2(_X2, _X1)}


def parse_expression(v):
    """Number or expression string -> callable ``f(x1, x2)`` or float."""
    if isinstance(v, bool):
        raise ConfigError(f"boolean where a coefficient was expected: {v!r}")
    if isinstance(v, (int, float)):
        return float(v)
    if not isinstance(v, str):
        raise ConfigError(f"coefficient must be a number or a string, got {v!r}")
    try:
        expr = sp_.sympify(v, locals=_LOCALS)
    except (sp_.SympifyError, SyntaxError, TypeError) as e:
        raise ConfigError(f"cannot parse coefficient {v!r}: {e}") from None
    extra = expr.free_symbols - {_X1, _X2}
    if extra:
        raise ConfigError(f"unknown names {sorted(map(str, extra))} in {v!r}")
    if not expr.free_symbols:
        return float(expr)
    f = sp_.lambdify((_X1, _X2), expr, modules="numpy")
    return lambda x1, x2: np.broadcast_to(np.asarray(f(x1, x2), dtype=float), np.shape(x1))


def coefficient_array(nested, lead):
    """Nested list of numbers/strings of shape ``lead`` -> array or callable."""
    arr = np.empty(lead, dtype=object)
    try:
        flat = np.array(nested, dtype=object)
    except ValueError:
        raise ConfigError(f"ragged coefficient block {nested!r}") from None
    if flat.shape != lead:
        raise ConfigError(f"coefficient block has shape {flat.shape}, expected {lead}")
    for idx in np.ndindex(lead):
        arr[idx] = parse_expression(flat[idx])
    if all(isinstance(v, float) for v in arr.flat):
        return arr.astype(float)

    def call(x1, x2):
        x1 = np.asarray(x1, dtype=float)
        out = np.empty(lead + x1.shape)
        for idx in np.ndindex(lead):
            v = arr[idx]
            out[idx] = v(x1, x2) if callable(v) else v
        return out

    return call


@dataclass
class GridConfig:
    r0: float = 1.0
    r1: float = 2.0
    nr: int = 16
    ntheta: int = 32
    T: float = 1.0
    nt: int = 64


@dataclass
class SystemConfig:
    preset: str = "desk"
    n: int = 2
    diffusion: list = None
    drift: list = None
    coupling: list = None
    mu: float = None
    inner: list = None  # per component: "D", "N" or "R"
    outer: list = None
    robin: tuple = (1.0, 1.0)
    beta: list = None  # explicit (n, 2) arrays override inner/outer
    eta: list = None
    gamma: list = None
    delta: list = None
    theta: float = 1.0


@dataclass
class SourceConfig:
    kind: str = "zero"
    seed: int = 0
    samples: int = 1
    path: str = None
    scale: float = 1.0


@dataclass
class CarlemanConfig:
    lam: list = field(default_factory=lambda: [2.0])
    s: list = field(default_factory=lambda: [20.0, 40.0, 80.0])
    gamma_bar: float = 2.0
    q: list = field(default_factory=lambda: [2.0])
    K: int = 7
    final_time: object = None  # None (use grid.T) or "auto"
    width: float = 0.08
    refine: bool = True
    rtol: float = 0.10


@dataclass
class ClassConfig:
    q: float = 2.0
    delta_tilde: object = "auto"
    G_tilde: list = field(default_factory=lambda: ["ones"])
    calibration_seeds: int = 20


@dataclass
class InverseConfig:
    rho: list = field(default_factory=lambda: [1e-8])
    noise: list = field(default_factory=lambda: [0.0])
    seeds: list = field(default_factory=lambda: [0])
    maxiter: int = 500
    tol: float = 1e-8
    nonneg: bool = False
    basis: str = "bumps"  # bumps | none
    discrepancy: bool = False
    tau: float = 1.1


@dataclass
class ExperimentConfig:
    grid: GridConfig
    system: SystemConfig
    source: SourceConfig
    carleman: CarlemanConfig
    klass: ClassConfig
    inverse: InverseConfig
    output: str = "out"
    seed: int = 0
    threads: int = 1
    base_dir: str = "."

    def resolve(self, path):
        return os.path.normpath(path if os.path.isabs(path) else os.path.join(self.base_dir, path))


def _block(cls, data, name):
    data = dict(data or {})
    known = set(cls.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"[{name}]: {e}") from None


def _positive_list(v, name, integer=False):
    if not isinstance(v, list) or not v:
        raise ConfigError(f"{name} must be a nonempty list")
    for x in v:
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
            raise ConfigError(f"{name}: bad entry {x!r}")
        if integer and int(x) != x:
            raise ConfigError(f"{name}: expected integers, got {x!r}")
    return v


def load_config(path):
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return config_from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))


def config_from_dict(data, base_dir="."):
    data = dict(data)
    top = {k: data.pop(k) for k in ("output", "seed", "threads") if k in data}
    blocks = {"grid": GridConfig, "system": SystemConfig, "source": SourceConfig,
              "carleman": CarlemanConfig, "class": ClassConfig, "inverse": InverseConfig}
    unknown = set(data) - set(blocks)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    parsed = {k: _block(cls, data.get(k), k) for k, cls in blocks.items()}
    cfg = ExperimentConfig(parsed["grid"], parsed["system"], parsed["source"], parsed["carleman"],
                           parsed["class"], parsed["inverse"], base_dir=base_dir, **top)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    """Static checks; hypothesis checks need the assembled coefficients (see ``cli``)."""
    g = cfg.grid
    if not (isinstance(g.nr, int) and isinstance(g.ntheta, int) and isinstance(g.nt, int)):
        raise ConfigError("grid sizes must be integers")
    if cfg.system.preset not in PRESETS:
        raise ConfigError(f"unknown system preset {cfg.system.preset!r}; choose from {PRESETS}")
    if cfg.source.kind not in SOURCE_KINDS:
        raise ConfigError(f"unknown source kind {cfg.source.kind!r}; choose from {SOURCE_KINDS}")
    if cfg.source.kind == "file":
        if not cfg.source.path or not os.path.isfile(cfg.resolve(cfg.source.path)):
            raise ConfigError(f"source file not found: {cfg.source.path!r}")
    if cfg.source.samples < 1:
        raise ConfigError("source.samples must be >= 1")
    if cfg.source.kind == "manufactured" and not cfg.system.preset.startswith("manufactured"):
        raise ConfigError("source.kind = \"manufactured\" needs a manufactured system preset")
    c = cfg.carleman
    _positive_list(c.lam, "carleman.lam")
    _positive_list(c.s, "carleman.s")
    _positive_list(c.q, "carleman.q")
    if any(v <= 0 for v in c.lam + c.s):
        raise ConfigError("carleman.lam and carleman.s must be positive")
    if any(v < 2 for v in c.q):
        raise ConfigError("carleman.q entries must be >= 2")
    if c.final_time not in (None, "auto"):
        raise ConfigError("carleman.final_time must be omitted or \"auto\"")
    if not c.width > 0:
        raise ConfigError("carleman.width must be positive")
    k = cfg.klass
    if k.delta_tilde != "auto" and not (isinstance(k.delta_tilde, (int, float)) and k.delta_tilde > 0):
        raise ConfigError("class.delta_tilde must be positive or \"auto\"")
    if not k.G_tilde:
        raise ConfigError("class.G_tilde must be nonempty")
    for ref in k.G_tilde:
        if ref != "ones" and not os.path.isfile(cfg.resolve(ref)):
            raise ConfigError(f"G_tilde file not found: {ref!r}")
    inv = cfg.inverse
    _positive_list(inv.rho, "inverse.rho")
    _positive_list(inv.noise, "inverse.noise")
    _positive_list(inv.seeds, "inverse.seeds", integer=True)
    if any(v < 0 for v in inv.rho + inv.noise):
        raise ConfigError("inverse.rho and inverse.noise must be nonnegative")
    if inv.maxiter < 1 or not inv.tol > 0:
        raise ConfigError("inverse.maxiter and inverse.tol must be positive")
    if inv.basis not in ("bumps", "none"):
        raise ConfigError(f"unknown inverse.basis {inv.basis!r}")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    try:
        from carleman_lab.geometry import AnnulusGrid

        AnnulusGrid(g.r0, g.r1, g.nr, g.ntheta, g.T, g.nt)
    except ParameterError as e:
        raise ConfigError(f"[grid]: {e}") from None
    return cfg
