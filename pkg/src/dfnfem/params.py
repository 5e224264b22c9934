"""Model parameters, material functions and design-variable scaling.

Every routine here accepts complex input wherever a real number is
expected so that parameter tangents can be taken by complex-step
differentiation; validity checks look at the real part only.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import DomainError, InvalidParameterError, SaturationError, StructuralError

log = logging.getLogger(__name__)

# complex-step increment used for derivatives of scalar material functions
_CS_STEP = 1e-30


# ---------------------------------------------------------------------------
# material functions
# ---------------------------------------------------------------------------

class ClosedForm:
    """Analytic material function with an optional validated domain.

    ``lower``/``upper`` bound the real part of the argument; the bounds are
    exclusive. The derivative is taken by complex step, which is exact to
    roundoff for the real-analytic closed forms used here.
    """

    def __init__(self, func: Callable, lower=-np.inf, upper=np.inf, name="closed-form"):
        self.func = func
        self.lower = lower
        self.upper = upper
        self.name = name

    def check(self, x):
        xr = np.real(x)
        bad = (xr <= self.lower) | (xr >= self.upper)
        if np.any(bad):
            value = float(np.ravel(xr)[np.argmax(np.ravel(bad))])
            raise DomainError(
                f"{self.name}: argument {value!r} outside ({self.lower}, {self.upper})", value
            )

    def __call__(self, x):
        self.check(x)
        return self.func(x)

    def deriv(self, x):
        x = np.asarray(np.real(x), dtype=float)
        self.check(x)
        return np.imag(self.func(x + 1j * _CS_STEP)) / _CS_STEP

    def __repr__(self):
        return f"ClosedForm({self.name})"


class TabulatedCurve:
    """Monotone cubic (PCHIP) interpolant of a two-column table.

    Evaluating outside the table is an error: silent extrapolation would
    corrupt gradients.
    """

    def __init__(self, x: Sequence[float], y: Sequence[float], name="table"):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.ndim != 1 or x.shape != y.shape or x.size < 2:
            raise InvalidParameterError(f"{name}: need two equal-length columns with >= 2 rows")
        order = np.argsort(x)
        x, y = x[order], y[order]
        if np.any(np.diff(x) <= 0):
            raise InvalidParameterError(f"{name}: abscissae must be distinct")
        self.x, self.y = x, y
        self.name = name
        self._interp = PchipInterpolator(x, y, extrapolate=False)
        self._dinterp = self._interp.derivative()

    @classmethod
    def from_csv(cls, path, name=None):
        rows = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].lstrip().startswith("#"):
                    continue
                try:
                    rows.append((float(row[0]), float(row[1])))
                except ValueError:
                    continue  # header line
        if not rows:
            raise InvalidParameterError(f"{path}: no numeric rows")
        x, y = zip(*rows)
        return cls(x, y, name=name or Path(path).stem)

    def check(self, x):
        xr = np.real(x)
        bad = (xr < self.x[0]) | (xr > self.x[-1])
        if np.any(bad):
            value = float(np.ravel(xr)[np.argmax(np.ravel(bad))])
            raise DomainError(
                f"{self.name}: {value!r} outside table range [{self.x[0]}, {self.x[-1]}]", value
            )

    def __call__(self, x):
        self.check(x)
        if np.iscomplexobj(x):
            xr = np.real(x)
            return self._interp(xr) + 1j * np.imag(x) * self._dinterp(xr)
        return self._interp(x)

    def deriv(self, x):
        x = np.real(x)
        self.check(x)
        return self._dinterp(x)

    def __repr__(self):
        return f"TabulatedCurve({self.name}, n={self.x.size})"


def _graphite_ocp_b(t):
    return (
        0.194
        + 1.5 * np.exp(-120.0 * t)
        + 0.0351 * np.tanh((t - 0.286) / 0.083)
        - 0.0045 * np.tanh((t - 0.849) / 0.119)
        - 0.035 * np.tanh((t - 0.9233) / 0.05)
        - 0.0147 * np.tanh((t - 0.5) / 0.034)
        - 0.102 * np.tanh((t - 0.194) / 0.142)
        - 0.022 * np.tanh((t - 0.9) / 0.0164)
        - 0.011 * np.tanh((t - 0.124) / 0.0226)
        + 0.0155 * np.tanh((t - 0.105) / 0.029)
    )


def lco_ocp_series(t):
    """Cathode OCP series of the benchmark set, in the already pre-scaled stoichiometry."""
    return (
        0.07645 * np.tanh(30.834 - 54.4806 * t)
        + 2.1581 * np.tanh(52.294 - 50.294 * t)
        - 0.14169 * np.tanh(11.0923 - 19.8543 * t)
        + 0.2051 * np.tanh(1.4684 - 5.4888 * t)
        + 0.2531 * np.tanh((0.56478 - t) / 0.1316)
        - 0.02167 * np.tanh((t - 0.525) / 0.006)
        + 2.16216
    )


def _electrolyte_diffusivity_b(c):
    return 5.34e-10 * np.exp(-0.65 * c / 1000.0)


def _electrolyte_conductivity_b(c):
    x = c / 1000.0
    return 0.0911 + 1.9101 * x - 1.0520 * x**2 + 0.1554 * x**3


def _gauss_sum(coeffs):
    def f(t):
        out = 0.0
        for a, b, s in coeffs:
            out = out + a * np.exp(-(((t - b) / s) ** 2))
        return out
    return f


_GRAPHITE_C = [
    (2.673022, -0.034828, 0.032734),
    (0.062721, 0.036085, 0.024854),
    (0.159337, 0.078792, 0.112443),
    (0.064161, 0.302060, 0.187485),
    (0.019294, 0.487684, 0.068516),
    (0.081550, 0.747598, 0.671913),
]
_LCO_C = [
    (4.558259, 0.154080, 0.748906),
    (1.561895, 0.861132, 0.328293),
    (0.058271, 0.888260, 0.024912),
    (0.620818, 0.940724, 0.147502),
]


def _electrolyte_conductivity_c(c):
    x = c / 1000.0
    return 2.915 * x - 2.238 * x**1.5 + 0.1147 * x**3


def _constant(value):
    return lambda c: value + 0.0 * c


@dataclass(frozen=True)
class MaterialFunctionSet:
    """OCP curves, electrolyte transport functions and the cathode pre-scale."""

    anode_ocp: object
    cathode_ocp: object
    electrolyte_diffusivity: object
    electrolyte_conductivity: object
    cathode_prescale: float = 1.0


def benchmark_materials() -> MaterialFunctionSet:
    """Graphite / LiCoO2 functions of the benchmark cell."""
    return MaterialFunctionSet(
        anode_ocp=ClosedForm(_graphite_ocp_b, 0.0, 1.0, "anode OCP"),
        # the series takes the pre-scaled stoichiometry, which reaches 1.062 at c_max
        cathode_ocp=ClosedForm(lco_ocp_series, 0.0, 1.062, "cathode OCP"),
        electrolyte_diffusivity=ClosedForm(_electrolyte_diffusivity_b, 0.0, np.inf, "D_e"),
        electrolyte_conductivity=ClosedForm(_electrolyte_conductivity_b, 0.0, np.inf, "kappa"),
        cathode_prescale=1.062,
    )


def commercial_materials() -> MaterialFunctionSet:
    """Functions of the commercial LiCoO2-graphite cell (Gaussian-sum OCPs)."""
    return MaterialFunctionSet(
        anode_ocp=ClosedForm(_gauss_sum(_GRAPHITE_C), 0.0, 1.0, "anode OCP"),
        cathode_ocp=ClosedForm(_gauss_sum(_LCO_C), 0.0, 1.0, "cathode OCP"),
        electrolyte_diffusivity=ClosedForm(_constant(1.93e-10), 0.0, np.inf, "D_e"),
        electrolyte_conductivity=ClosedForm(_electrolyte_conductivity_c, 0.0, np.inf, "kappa"),
        cathode_prescale=1.0,
    )


# ---------------------------------------------------------------------------
# parameter set
# ---------------------------------------------------------------------------

PARTICLE_FIELDS = ("eps_s", "r_s", "c_s0", "c_s_max", "D_s", "k_s", "sigma")
REGIONS = ("anode", "separator", "cathode")


@dataclass(frozen=True)
class Layer:
    """One macroscopic layer. Particle fields are ``None`` in the separator."""

    thickness: float
    beta: float
    eps_e: float
    eps_s: float | None = None
    r_s: float | None = None
    c_s0: float | None = None
    c_s_max: float | None = None
    D_s: float | None = None
    k_s: float | None = None
    sigma: float | None = None

    @property
    def has_particles(self) -> bool:
        return self.r_s is not None

    @property
    def a_s(self):
        """Specific surface area 3 eps_s / r_s (derived, never stored)."""
        if not self.has_particles:
            return 0.0
        return 3.0 * self.eps_s / self.r_s


def _re(x):
    return float(np.real(x))


@dataclass(frozen=True)
class ParameterSet:
    anode: Layer
    separator: Layer
    cathode: Layer
    c_e0: float
    t_plus: float
    R: float = 8.314
    T: float = 298.15
    F: float = 96485.0
    sigma_cc_a: float = 5.965e7
    sigma_cc_c: float = 3.55e7
    materials: MaterialFunctionSet = field(default_factory=benchmark_materials)

    def __post_init__(self):
        for region in REGIONS:
            layer = getattr(self, region)
            if _re(layer.thickness) <= 0:
                raise InvalidParameterError(f"{region}.thickness must be positive")
            if not 0 < _re(layer.eps_e) <= 1:
                raise InvalidParameterError(f"{region}.eps_e must lie in (0, 1]")
            if region == "separator":
                continue
            missing = [f for f in PARTICLE_FIELDS if getattr(layer, f) is None]
            if missing:
                raise InvalidParameterError(f"{region}: missing {', '.join(missing)}")
            if not 0 <= _re(layer.eps_s) < 1 or _re(layer.eps_e + layer.eps_s) > 1 + 1e-12:
                raise InvalidParameterError(f"{region}: need 0 <= eps_s < 1 and eps_e + eps_s <= 1")
            if _re(layer.r_s) <= 0:
                raise InvalidParameterError(f"{region}.r_s must be positive")
            if not 0 < _re(layer.c_s0) < _re(layer.c_s_max):
                raise InvalidParameterError(f"{region}: need 0 < c_s0 < c_s_max")
            for name in ("D_s", "k_s", "sigma"):
                if _re(getattr(layer, name)) <= 0:
                    raise InvalidParameterError(f"{region}.{name} must be positive")
        if _re(self.c_e0) <= 0:
            raise InvalidParameterError("c_e0 must be positive")
        if not 0 < _re(self.t_plus) < 1:
            raise InvalidParameterError("t_plus must lie in (0, 1)")

    def layer(self, region: str) -> Layer:
        if region not in REGIONS:
            raise StructuralError(f"unknown region {region!r}")
        return getattr(self, region)

    # names are "t_plus", "c_e0", ... for cell-wide values and "anode.k_s" for layer values
    def get(self, name: str):
        if "." in name:
            region, attr = name.split(".", 1)
            layer = self.layer(region)
            if attr not in {f.name for f in dataclasses.fields(Layer)}:
                raise StructuralError(f"unknown parameter {name!r}")
            value = getattr(layer, attr)
            if value is None:
                raise StructuralError(f"parameter {name!r} is not defined for the {region}")
            return value
        if name not in SCALAR_FIELDS:
            raise StructuralError(f"unknown parameter {name!r}")
        return getattr(self, name)

    def with_values(self, values: Mapping[str, object]) -> "ParameterSet":
        top, layers = {}, {}
        for name, value in values.items():
            self.get(name)  # validates the name
            if "." in name:
                region, attr = name.split(".", 1)
                layers.setdefault(region, {})[attr] = value
            else:
                top[name] = value
        for region, changes in layers.items():
            top[region] = dataclasses.replace(self.layer(region), **changes)
        return dataclasses.replace(self, **top)

    def vector(self, names: Sequence[str]) -> np.ndarray:
        return np.array([self.get(n) for n in names])

    # -- derived quantities -------------------------------------------------

    def ocp(self, electrode: str, stoichiometry):
        return ocp(self.materials, electrode, stoichiometry)

    def thermal_voltage(self):
        return self.R * self.T / self.F


SCALAR_FIELDS = ("c_e0", "t_plus", "R", "T", "F", "sigma_cc_a", "sigma_cc_c")


def benchmark_parameters() -> ParameterSet:
    """Graphite / LiCoO2 benchmark cell (1C = 24 A/m^2, cutoff 3.105 V)."""
    return ParameterSet(
        anode=Layer(
            thickness=100e-6, beta=1.5, eps_e=0.3, eps_s=0.6, r_s=10e-6,
            c_s0=19987.0, c_s_max=24983.0, D_s=3.9e-14, k_s=2.0729e-10, sigma=100.0,
        ),
        separator=Layer(thickness=25e-6, beta=1.5, eps_e=1.0),
        cathode=Layer(
            thickness=100e-6, beta=1.5, eps_e=0.3, eps_s=0.5, r_s=10e-6,
            c_s0=30731.0, c_s_max=51218.0, D_s=1e-13, k_s=6.2186e-12, sigma=10.0,
        ),
        c_e0=1000.0,
        t_plus=0.4,
        materials=benchmark_materials(),
    )


BENCHMARK_ONE_C = 24.0  # A/m^2
BENCHMARK_CUTOFF = 3.105  # V
BENCHMARK_CC_THICKNESS = 25e-6  # m, each collector


def commercial_parameters(beta_a, beta_s, beta_c, t_plus, k_s_a, k_s_c, c_s0_a, c_s0_c) -> ParameterSet:
    """Commercial LiCoO2-graphite cell; the eight arguments are the identified values."""
    return ParameterSet(
        anode=Layer(
            thickness=36.71e-6, beta=beta_a, eps_e=0.32533, eps_s=0.65202, r_s=11.4e-6,
            c_s0=c_s0_a, c_s_max=28408.0, D_s=1.3579e-10, k_s=k_s_a, sigma=100.0,
        ),
        separator=Layer(thickness=5.40e-6, beta=beta_s, eps_e=0.4),
        cathode=Layer(
            thickness=26.13e-6, beta=beta_c, eps_e=0.21542, eps_s=0.76142, r_s=7.5e-6,
            c_s0=c_s0_c, c_s_max=51568.0, D_s=2.47e-12, k_s=k_s_c, sigma=10.0,
        ),
        c_e0=1150.0,
        t_plus=t_plus,
        materials=commercial_materials(),
    )


# ---------------------------------------------------------------------------
# elementary operations
# ---------------------------------------------------------------------------

def effective_transport(volume_fraction, beta, bulk_value):
    """Bruggeman correction ``volume_fraction**beta * bulk_value``."""
    if np.any(np.real(volume_fraction) <= 0) or np.any(np.real(volume_fraction) > 1):
        raise InvalidParameterError(f"volume fraction must lie in (0, 1], got {volume_fraction!r}")
    if np.any(np.real(bulk_value) <= 0):
        raise InvalidParameterError("bulk transport coefficient must be positive")
    return volume_fraction**beta * bulk_value


def ocp(materials: MaterialFunctionSet, electrode: str, stoichiometry):
    """Open-circuit potential at surface stoichiometry c_surf / c_max.

    The stoichiometry must lie in (0, 1); the cathode pre-scale is applied
    afterwards and the curve's own range is checked on the scaled value.
    """
    xr = np.real(stoichiometry)
    bad = (xr <= 0) | (xr >= 1)
    if np.any(bad):
        value = float(np.ravel(xr)[np.argmax(np.ravel(bad))])
        raise DomainError(f"{electrode} stoichiometry {value!r} outside (0, 1)", value)
    if electrode == "anode":
        return materials.anode_ocp(stoichiometry)
    if electrode == "cathode":
        return materials.cathode_ocp(materials.cathode_prescale * stoichiometry)
    raise StructuralError(f"unknown electrode {electrode!r}")


def ocp_derivative(materials: MaterialFunctionSet, electrode: str, stoichiometry):
    """dU/d(c_surf/c_max), including the cathode pre-scale factor."""
    if electrode == "anode":
        return materials.anode_ocp.deriv(stoichiometry)
    if electrode == "cathode":
        s = materials.cathode_prescale
        return s * materials.cathode_ocp.deriv(s * stoichiometry)
    raise StructuralError(f"unknown electrode {electrode!r}")


def exchange_current(k_s, c_s_surf, c_s_max, c_e, F=96485.0):
    """Exchange current density k_s F sqrt(c_surf (c_max - c_surf) c_e) in A/m^2."""
    cs = np.real(c_s_surf)
    bad = (cs < 0) | (cs > np.real(c_s_max))
    if np.any(bad):
        idx = int(np.argmax(np.ravel(bad)))
        raise SaturationError(
            f"surface concentration {float(np.ravel(cs)[idx])!r} outside [0, c_max] at node {idx}",
            node=idx,
        )
    if np.any(np.real(c_e) < 0):
        raise DomainError("negative electrolyte concentration in exchange current")
    return k_s * F * np.sqrt(c_s_surf) * np.sqrt(c_s_max - c_s_surf) * np.sqrt(c_e)


# ---------------------------------------------------------------------------
# design-variable scaling
# ---------------------------------------------------------------------------

class ScalingClampWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ScaledParameter:
    name: str
    lower: float
    upper: float
    kind: str = "linear"

    def __post_init__(self):
        if self.kind not in ("log", "linear"):
            raise InvalidParameterError(f"{self.name}: scaling kind must be 'log' or 'linear'")
        if not self.lower < self.upper:
            raise InvalidParameterError(f"{self.name}: need lower < upper")
        if self.kind == "log" and self.lower <= 0:
            raise InvalidParameterError(f"{self.name}: log scaling needs positive bounds")


@dataclass(frozen=True)
class ScalingSpec:
    entries: tuple[ScaledParameter, ...]

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise InvalidParameterError("duplicate parameter in scaling spec")

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def subset(self, names: Sequence[str]) -> "ScalingSpec":
        lookup = {e.name: e for e in self.entries}
        return ScalingSpec(tuple(lookup[n] for n in names))


def _clamp(w, spec):
    w = np.asarray(w, dtype=float)
    if w.shape != (len(spec),):
        raise StructuralError(f"design vector has shape {w.shape}, expected ({len(spec)},)")
    clipped = np.clip(w, 0.0, 1.0)
    if np.any(clipped != w):
        idx = np.nonzero(clipped != w)[0]
        msg = "design variables clamped to [0, 1]: " + ", ".join(
            f"{spec.entries[i].name}={w[i]:.6g}" for i in idx
        )
        log.warning(msg)
        warnings.warn(msg, ScalingClampWarning, stacklevel=3)
    return clipped


def scale(w, spec: ScalingSpec) -> np.ndarray:
    """Map design variables in [0, 1] to parameter values; w = 1 gives the lower bound."""
    w = _clamp(w, spec)
    theta = np.empty_like(w)
    for i, e in enumerate(spec.entries):
        if e.kind == "log":
            theta[i] = np.exp(w[i] * np.log(e.lower) + (1.0 - w[i]) * np.log(e.upper))
        else:
            theta[i] = w[i] * e.lower + (1.0 - w[i]) * e.upper
    return theta


def unscale(theta, spec: ScalingSpec) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    w = np.empty_like(theta)
    for i, e in enumerate(spec.entries):
        if e.kind == "log":
            w[i] = (np.log(theta[i]) - np.log(e.upper)) / (np.log(e.lower) - np.log(e.upper))
        else:
            w[i] = (theta[i] - e.upper) / (e.lower - e.upper)
    return w


def scale_jacobian(w, spec: ScalingSpec) -> np.ndarray:
    """Diagonal of d theta / d w."""
    theta = scale(w, spec)
    out = np.empty_like(theta)
    for i, e in enumerate(spec.entries):
        if e.kind == "log":
            out[i] = theta[i] * (np.log(e.lower) - np.log(e.upper))
        else:
            out[i] = e.lower - e.upper
    return out


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_MATERIAL_PRESETS = {"benchmark": benchmark_materials, "commercial": commercial_materials}


def _material_function(spec, key, base_dir):
    if isinstance(spec, Mapping) and "csv" in spec:
        path = Path(spec["csv"])
        if not path.is_absolute():
            path = Path(base_dir) / path
        return TabulatedCurve.from_csv(path, name=key)
    if isinstance(spec, (int, float)):
        return ClosedForm(_constant(float(spec)), 0.0, np.inf, key)
    raise InvalidParameterError(f"materials.{key}: expected a number or {{csv: path}}")


def _number(value, key):
    from .errors import ConfigError

    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"parameters.{key}: expected a number, got {value!r}") from None


def parameters_from_dict(cfg: Mapping, base: ParameterSet | None = None, base_dir=".") -> ParameterSet:
    """Build a ParameterSet from a nested mapping.

    Schema: ``{preset, anode: {...}, separator: {...}, cathode: {...},
    cell: {c_e0, t_plus, R, T, F, sigma_cc_a, sigma_cc_c}, materials: {...}}``.
    Layer keys are the :class:`Layer` field names. Without a preset or
    ``base`` every required key must be present.
    """
    from .errors import ConfigError

    cfg = dict(cfg or {})
    preset = cfg.get("preset")
    if base is None and preset is not None:
        if preset == "benchmark":
            base = benchmark_parameters()
        else:
            raise ConfigError(f"parameters.preset: unknown preset {preset!r}")

    layer_names = [f.name for f in dataclasses.fields(Layer)]
    layers = {}
    for region in REGIONS:
        section = dict(cfg.get(region) or {})
        unknown = set(section) - set(layer_names)
        if unknown:
            raise ConfigError(f"parameters.{region}: unknown keys {sorted(unknown)}")
        if base is not None:
            values = {k: _number(v, f"{region}.{k}") for k, v in section.items()}
            layer = dataclasses.replace(base.layer(region), **values)
        else:
            required = ["thickness", "beta", "eps_e"]
            if region != "separator":
                required += list(PARTICLE_FIELDS)
            for key in required:
                if key not in section:
                    raise ConfigError(f"missing required key parameters.{region}.{key}")
            layer = Layer(**{k: _number(v, f"{region}.{k}") for k, v in section.items()})
        layers[region] = layer

    cell = dict(cfg.get("cell") or {})
    unknown = set(cell) - set(SCALAR_FIELDS)
    if unknown:
        raise ConfigError(f"parameters.cell: unknown keys {sorted(unknown)}")
    if base is None:
        for key in ("c_e0", "t_plus"):
            if key not in cell:
                raise ConfigError(f"missing required key parameters.cell.{key}")

    mat_cfg = dict(cfg.get("materials") or {})
    mat_preset = mat_cfg.pop("preset", None)
    if mat_preset is not None:
        if mat_preset not in _MATERIAL_PRESETS:
            raise ConfigError(f"parameters.materials.preset: unknown preset {mat_preset!r}")
        materials = _MATERIAL_PRESETS[mat_preset]()
    elif base is not None:
        materials = base.materials
    else:
        raise ConfigError("missing required key parameters.materials.preset")
    changes = {}
    for key in ("anode_ocp", "cathode_ocp", "electrolyte_diffusivity", "electrolyte_conductivity"):
        if key in mat_cfg:
            changes[key] = _material_function(mat_cfg.pop(key), key, base_dir)
    if "cathode_prescale" in mat_cfg:
        changes["cathode_prescale"] = _number(mat_cfg.pop("cathode_prescale"), "materials.cathode_prescale")
    if mat_cfg:
        raise ConfigError(f"parameters.materials: unknown keys {sorted(mat_cfg)}")
    materials = dataclasses.replace(materials, **changes)

    kwargs = {k: _number(v, f"cell.{k}") for k, v in cell.items()}
    if base is not None:
        return dataclasses.replace(base, materials=materials, **layers, **kwargs)
    return ParameterSet(materials=materials, **layers, **kwargs)
