"""Run configuration read from a TOML file.

Sections: [periodic], [defect], [edge], [solver], [homogenized], [expansion],
[validation].  Unknown keys are rejected so that typos cannot silently fall
back to defaults.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .errors import ConfigError
from .lattice import LOCALIZED_FAMILIES, LocalizedPotential, PeriodicPotential

SECTIONS = {
    "periodic": {"dimension", "family", "amplitude", "offset", "coefficients"},
    "defect": {"family", "depth", "width", "center", "components", "smoothness"},
    "edge": {"band", "k"},
    "solver": {"pw_cutoff", "n_k", "n_bands", "hessian_step", "tol_grad"},
    "homogenized": {"scheme", "L_box", "h_y", "n_eigs"},
    "expansion": {"order"},
    "validation": {"eps", "c_dom", "pw_cutoff", "n_fast", "scheme", "memory_budget_mb"},
}


@dataclass(frozen=True)
class RunConfig:
    periodic: PeriodicPotential
    defect: LocalizedPotential | None = None
    band: int = 0
    k: tuple = (0.0,)
    pw_cutoff: int | None = None
    n_k: int = 64
    n_bands: int = 6
    hessian_step: float = 1e-3
    tol_grad: float = 1e-6
    homog_scheme: str = "fd"
    L_box: float | None = None
    h_y: float | None = None
    n_eigs: int = 4
    order: int = 4
    eps: tuple = (0.2, 0.1, 0.05)
    c_dom: float = 20.0
    direct_pw_cutoff: int = 10
    n_fast: int = 32
    direct_scheme: str = "spectral"
    memory_budget_mb: float = 2048.0
    source: str = field(default="", compare=False)

    @property
    def dimension(self) -> int:
        return self.periodic.dimension

    def require_defect(self) -> LocalizedPotential:
        if self.defect is None:
            raise ConfigError("a [defect] section is required for this command")
        return self.defect

    def check_eps(self):
        eps = self.eps
        if len(eps) < 3:
            raise ConfigError(f"validation.eps needs at least 3 values, got {len(eps)}")
        if any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
            raise ConfigError("validation.eps must be strictly positive and strictly decreasing")


def _get(section: dict, key: str, kind, default, name: str):
    if key not in section:
        return default
    value = section[key]
    try:
        if kind is int:
            if isinstance(value, bool) or not float(value).is_integer():
                raise ValueError
            return int(value)
        if kind is float:
            out = float(value)
            if not math.isfinite(out):
                raise ValueError
            return out
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}.{key}: cannot interpret {value!r} as {kind.__name__}") from None


def _positive(value, name):
    if value is not None and value <= 0:
        raise ConfigError(f"{name} must be positive, got {value}")
    return value


def _periodic(sec: dict) -> PeriodicPotential:
    d = _get(sec, "dimension", int, None, "periodic")
    family = sec.get("family", "cosine")
    try:
        if family == "cosine":
            amp = sec.get("amplitude", 0.0)
            offset = _get(sec, "offset", float, 0.0, "periodic")
            return PeriodicPotential.cosine(amp, d, offset)
        if family == "fourier":
            if d is None:
                raise ConfigError("periodic.dimension is required with family = 'fourier'")
            return PeriodicPotential.from_triples(d, sec.get("coefficients", []))
        if family == "zero":
            return PeriodicPotential.zero(d or 1)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"periodic: {exc}") from None
    raise ConfigError(f"periodic.family must be 'cosine', 'fourier' or 'zero', got {family!r}")


def _defect(sec: dict, d: int) -> LocalizedPotential:
    family = sec.get("family", "gaussian")
    if family not in LOCALIZED_FAMILIES:
        raise ConfigError(f"defect.family must be one of {LOCALIZED_FAMILIES}, got {family!r}")
    try:
        return LocalizedPotential(
            d,
            family,
            depth=_get(sec, "depth", float, 0.0, "defect"),
            width=_get(sec, "width", float, 1.0, "defect"),
            center=tuple(sec.get("center", (0.0,) * d)),
            components=tuple(tuple(c) for c in sec.get("components", ())),
            smoothness=_get(sec, "smoothness", int, 2, "defect"),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"defect: {exc}") from None


def parse_config(data: dict, source: str = "") -> RunConfig:
    for name, sec in data.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        if not isinstance(sec, dict):
            raise ConfigError(f"[{name}] must be a table")
        extra = set(sec) - SECTIONS[name]
        if extra:
            raise ConfigError(f"unknown key(s) in [{name}]: {sorted(extra)}")
    if "periodic" not in data:
        raise ConfigError("missing [periodic] section")
    V = _periodic(data["periodic"])
    d = V.dimension
    defect = _defect(data["defect"], d) if "defect" in data else None

    edge = data.get("edge", {})
    band = _get(edge, "band", int, 0, "edge")
    if band < 0:
        raise ConfigError("edge.band must be non-negative")
    k = edge.get("k", [0.0] * d)
    k = tuple(float(v) for v in (k if isinstance(k, (list, tuple)) else [k]))
    if len(k) != d or any(min(abs(v), abs(abs(v) - 0.5)) > 1e-14 for v in k):
        raise ConfigError(f"edge.k must have {d} components, each 0 or 1/2; got {list(k)}")

    sol = data.get("solver", {})
    pw = _positive(_get(sol, "pw_cutoff", int, None, "solver"), "solver.pw_cutoff")
    n_k = _positive(_get(sol, "n_k", int, 64, "solver"), "solver.n_k")
    n_bands = _positive(_get(sol, "n_bands", int, 6, "solver"), "solver.n_bands")
    step = _positive(_get(sol, "hessian_step", float, 1e-3, "solver"), "solver.hessian_step")
    tol_grad = _positive(_get(sol, "tol_grad", float, 1e-6, "solver"), "solver.tol_grad")

    hom = data.get("homogenized", {})
    scheme = hom.get("scheme", "fd")
    if scheme not in ("fd", "spectral"):
        raise ConfigError(f"homogenized.scheme must be 'fd' or 'spectral', got {scheme!r}")
    L_box = _positive(_get(hom, "L_box", float, None, "homogenized"), "homogenized.L_box")
    h_y = _positive(_get(hom, "h_y", float, None, "homogenized"), "homogenized.h_y")
    n_eigs = _positive(_get(hom, "n_eigs", int, 4, "homogenized"), "homogenized.n_eigs")

    order = _get(data.get("expansion", {}), "order", int, 4, "expansion")
    if not 2 <= order <= 8:
        raise ConfigError(f"expansion.order must lie in 2..8, got {order}")

    val = data.get("validation", {})
    eps = val.get("eps", [0.2, 0.1, 0.05])
    try:
        eps = tuple(float(e) for e in eps)
    except (TypeError, ValueError):
        raise ConfigError(f"validation.eps must be a list of numbers, got {eps!r}") from None
    c_dom = _positive(_get(val, "c_dom", float, 20.0, "validation"), "validation.c_dom")
    dpw = _positive(_get(val, "pw_cutoff", int, 10, "validation"), "validation.pw_cutoff")
    n_fast = _get(val, "n_fast", int, 32, "validation")
    if n_fast < 16:
        raise ConfigError("validation.n_fast must be at least 16")
    dscheme = val.get("scheme", "spectral" if d == 1 else "fd2")
    if dscheme not in ("spectral", "fd2", "fd4"):
        raise ConfigError(f"validation.scheme must be 'spectral', 'fd2' or 'fd4', got {dscheme!r}")
    budget = _positive(_get(val, "memory_budget_mb", float, 2048.0, "validation"), "validation.memory_budget_mb")
    cfg = RunConfig(V, defect, band, k, pw, n_k, n_bands, step, tol_grad, scheme, L_box, h_y, n_eigs, order, eps, c_dom, dpw, n_fast, dscheme, budget, source)
    if any(e <= 0 for e in cfg.eps) or any(b >= a for a, b in zip(cfg.eps, cfg.eps[1:])):
        raise ConfigError("validation.eps must be strictly positive and strictly decreasing")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(data, str(path))
