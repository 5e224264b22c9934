"""Run configuration: YAML file to validated model objects.

Sections::

    parameters:      ParameterSet schema (see params.parameters_from_dict)
    geometry:        dim, counts, cc_thickness, plane_size, plane_counts,
                     tab_extent, micro_elements
    solver:          tol, max_iter, max_halvings, max_dt_halvings
    protocol:        one drive {c_rate | i_app, one_c, dt, cutoff, end_time, max_steps, name}
    protocols:       list of drives (alternative to ``protocol``)
    identification:  parameters, references, optimizer, start, fd_step, threshold, steps
    reference:       noise_sigma
    output:          dir, snapshots
    seed:            integer seed for synthetic noise
    verbosity:       0, 1 or 2

Every referenced file is checked before any solve starts.
"""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError, DFNError
from .ident import OptimizerSettings, default_scaling
from .mesh import MacroMesh, build_macro_mesh
from .params import (
    BENCHMARK_CC_THICKNESS,
    BENCHMARK_CUTOFF,
    BENCHMARK_ONE_C,
    ParameterSet,
    ScaledParameter,
    ScalingSpec,
    parameters_from_dict,
)
from .solver import DriveProtocol, NewtonOptions

_TOP_KEYS = {"parameters", "geometry", "solver", "protocol", "protocols", "identification",
             "reference", "output", "seed", "verbosity"}


@dataclass
class ProtocolConfig:
    name: str
    i_app: float
    dt: float
    cutoff: float | None = BENCHMARK_CUTOFF
    end_time: float | None = None
    max_steps: int = 100000

    def drive(self, cutoff=True, max_steps=None) -> DriveProtocol:
        return DriveProtocol(
            i_app=self.i_app, dt=self.dt,
            max_steps=self.max_steps if max_steps is None else max_steps,
            cutoff=self.cutoff if cutoff else None, end_time=self.end_time,
        )


@dataclass
class ReferenceConfig:
    protocol: ProtocolConfig
    path: Path


@dataclass
class IdentificationConfig:
    spec: ScalingSpec
    references: list
    settings: OptimizerSettings
    start: Any = "two_stage"  # "two_stage", "midpoint" or a list of w values
    fd_step: float = 1e-6
    threshold: float = 1e-4
    steps: int | None = None


@dataclass
class RunConfig:
    params: ParameterSet
    geometry: dict
    n_micro: int
    newton: NewtonOptions
    protocols: list
    identification: IdentificationConfig | None
    output_dir: Path
    snapshots: bool = False
    seed: int = 0
    noise_sigma: float = 0.0
    verbosity: int = 0
    sha256: str = ""
    raw: dict = field(default_factory=dict)

    def build_mesh(self) -> MacroMesh:
        g = self.geometry
        thickness = {r: self.params.layer(r).thickness for r in ("anode", "separator", "cathode")}
        if g["dim"] == 3:
            thickness["anode_cc"] = thickness["cathode_cc"] = g["cc_thickness"]
        try:
            return build_macro_mesh(g["dim"], thickness, g["counts"], tuple(g["plane_size"]),
                                    tuple(g["plane_counts"]), g["tab_extent"])
        except DFNError as exc:
            raise ConfigError(f"geometry: {exc}") from exc


def _get(section: Mapping, key: str, where: str, default=..., cast=None):
    if key not in section:
        if default is ...:
            raise ConfigError(f"missing required key {where}.{key}")
        return default
    value = section[key]
    if cast is not None and value is not None:
        try:
            value = cast(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}.{key}: cannot convert {value!r}") from exc
    return value


def _section(cfg: Mapping, key: str) -> dict:
    value = cfg.get(key) or {}
    if not isinstance(value, Mapping):
        raise ConfigError(f"section {key!r} must be a mapping")
    return dict(value)


def _parse_geometry(g: dict) -> tuple[dict, int]:
    dim = _get(g, "dim", "geometry", 1, int)
    if dim not in (1, 2, 3):
        raise ConfigError(f"geometry.dim must be 1, 2 or 3, got {dim}")
    counts = dict(_get(g, "counts", "geometry", {"anode": 20, "separator": 5, "cathode": 20}))
    defaults_cc = {"anode_cc": 1, "cathode_cc": 1} if dim == 3 else {}
    counts = {**defaults_cc, **{k: int(v) for k, v in counts.items()}}
    plane_size = list(_get(g, "plane_size", "geometry", [] if dim == 1 else [1e-3] * (dim - 1)))
    plane_counts = [int(v) for v in _get(g, "plane_counts", "geometry", [] if dim == 1 else [4] * (dim - 1))]
    if len(plane_size) != dim - 1 or len(plane_counts) != dim - 1:
        raise ConfigError(f"geometry.plane_size and plane_counts need {dim - 1} entries for dim {dim}")
    tab_extent = g.get("tab_extent")
    if tab_extent is not None:
        tab_extent = {k: tuple(float(x) for x in v) for k, v in tab_extent.items()}
    geometry = {
        "dim": dim, "counts": counts, "plane_size": [float(v) for v in plane_size],
        "plane_counts": plane_counts, "tab_extent": tab_extent,
        "cc_thickness": _get(g, "cc_thickness", "geometry", BENCHMARK_CC_THICKNESS, float),
    }
    n_micro = _get(g, "micro_elements", "geometry", 10, int)
    if n_micro < 1:
        raise ConfigError("geometry.micro_elements must be at least 1")
    return geometry, n_micro


def _parse_protocol(p: Mapping, where: str, index: int) -> ProtocolConfig:
    if not isinstance(p, Mapping):
        raise ConfigError(f"{where} must be a mapping")
    one_c = _get(p, "one_c", where, BENCHMARK_ONE_C, float)
    if "i_app" in p:
        i_app = _get(p, "i_app", where, cast=float)
        default_name = f"I{i_app:g}"
    elif "c_rate" in p:
        rate = _get(p, "c_rate", where, cast=float)
        i_app = rate * one_c
        default_name = f"{rate:g}C"
    else:
        raise ConfigError(f"missing required key {where}.c_rate (or {where}.i_app)")
    dt = _get(p, "dt", where, cast=float)
    if not dt > 0:
        raise ConfigError(f"{where}.dt must be positive")
    return ProtocolConfig(
        name=str(p.get("name", default_name if index == 0 or "name" in p else default_name)),
        i_app=i_app, dt=dt,
        cutoff=_get(p, "cutoff", where, BENCHMARK_CUTOFF, float),
        end_time=_get(p, "end_time", where, None, float),
        max_steps=_get(p, "max_steps", where, 100000, int),
    )


def _parse_scaling(entries, where) -> ScalingSpec:
    if entries is None:
        return default_scaling()
    defaults = {e.name: e for e in default_scaling().entries}
    out = []
    for k, item in enumerate(entries):
        if isinstance(item, str):
            if item not in defaults:
                raise ConfigError(f"{where}[{k}]: no default bounds for {item!r}; give lower/upper")
            out.append(defaults[item])
            continue
        name = _get(item, "name", f"{where}[{k}]", cast=str)
        base = defaults.get(name)
        lower = _get(item, "lower", f"{where}[{k}]", base.lower if base else ..., float)
        upper = _get(item, "upper", f"{where}[{k}]", base.upper if base else ..., float)
        kind = _get(item, "kind", f"{where}[{k}]", base.kind if base else "linear", str)
        try:
            out.append(ScaledParameter(name, lower, upper, kind))
        except DFNError as exc:
            raise ConfigError(f"{where}[{k}]: {exc}") from exc
    return ScalingSpec(tuple(out))


def _parse_identification(ident: dict, protocols: list, base_dir: Path, require_files: bool):
    where = "identification"
    spec = _parse_scaling(ident.get("parameters"), f"{where}.parameters")
    refs = []
    by_name = {p.name: p for p in protocols}
    for k, item in enumerate(ident.get("references") or []):
        if isinstance(item, str):
            if k >= len(protocols):
                raise ConfigError(f"{where}.references[{k}]: no matching protocol")
            proto, path = protocols[k], item
        else:
            path = _get(item, "path", f"{where}.references[{k}]", cast=str)
            pname = item.get("protocol")
            if pname is None:
                if k >= len(protocols):
                    raise ConfigError(f"{where}.references[{k}]: no matching protocol")
                proto = protocols[k]
            elif pname in by_name:
                proto = by_name[pname]
            else:
                raise ConfigError(f"{where}.references[{k}].protocol: unknown protocol {pname!r}")
        path = Path(path)
        if not path.is_absolute():
            path = base_dir / path
        if require_files and not path.is_file():
            raise ConfigError(f"reference file not found: {path}")
        refs.append(ReferenceConfig(proto, path))
    opt = dict(ident.get("optimizer") or {})
    known = set(OptimizerSettings.__dataclass_fields__)
    unknown = set(opt) - known
    if unknown:
        raise ConfigError(f"{where}.optimizer: unknown keys {sorted(unknown)}")
    settings = OptimizerSettings(**opt)
    start = ident.get("start", "two_stage")
    if isinstance(start, str):
        if start not in ("two_stage", "midpoint"):
            raise ConfigError(f"{where}.start must be 'two_stage', 'midpoint' or a list of w values")
    else:
        start = [float(v) for v in start]
        if len(start) != len(spec):
            raise ConfigError(f"{where}.start needs {len(spec)} values")
    return IdentificationConfig(
        spec=spec, references=refs, settings=settings, start=start,
        fd_step=_get(ident, "fd_step", where, 1e-6, float),
        threshold=_get(ident, "threshold", where, 1e-4, float),
        steps=_get(ident, "steps", where, None, int),
    )


def set_override(cfg: dict, assignment: str) -> None:
    """Apply ``a.b.c=value`` to a nested mapping; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like key.path=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for part in parts[:-1]:
        nxt = node.get(part)
        if nxt is None:
            nxt = node[part] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {key!r}: {part!r} is not a section")
        node = nxt
    node[parts[-1]] = yaml.safe_load(value)


def config_from_dict(cfg: Mapping, base_dir=".", require_files=True, text: str | None = None) -> RunConfig:
    if not isinstance(cfg, Mapping):
        raise ConfigError("configuration must be a mapping")
    cfg = copy.deepcopy(dict(cfg))
    unknown = set(cfg) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level sections {sorted(unknown)}")
    base_dir = Path(base_dir)
    if "parameters" not in cfg:
        raise ConfigError("missing required section parameters")
    try:
        params = parameters_from_dict(_section(cfg, "parameters"), base_dir=base_dir)
    except ConfigError:
        raise
    except (DFNError, OSError, TypeError, ValueError) as exc:
        raise ConfigError(f"parameters: {exc}") from exc
    geometry, n_micro = _parse_geometry(_section(cfg, "geometry"))
    solver = _section(cfg, "solver")
    unknown = set(solver) - set(NewtonOptions.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"solver: unknown keys {sorted(unknown)}")
    newton = NewtonOptions(**solver)

    if "protocol" in cfg and "protocols" in cfg:
        raise ConfigError("give either protocol or protocols, not both")
    raw_protocols = cfg.get("protocols") if "protocols" in cfg else ([cfg["protocol"]] if "protocol" in cfg else [])
    protocols = [_parse_protocol(p, f"protocols[{k}]" if "protocols" in cfg else "protocol", k)
                 for k, p in enumerate(raw_protocols or [])]
    names = [p.name for p in protocols]
    if len(set(names)) != len(names):
        raise ConfigError(f"protocol names must be unique, got {names}")

    identification = None
    if "identification" in cfg:
        identification = _parse_identification(_section(cfg, "identification"), protocols, base_dir, require_files)
        for name in identification.spec.names:
            try:
                params.get(name)
            except DFNError as exc:
                raise ConfigError(f"identification.parameters: {exc}") from exc

    output = _section(cfg, "output")
    out_dir = Path(output.get("dir", "output"))
    if not out_dir.is_absolute():
        out_dir = base_dir / out_dir
    reference = _section(cfg, "reference")
    noise = _get(reference, "noise_sigma", "reference", 0.0, float)
    if noise < 0:
        raise ConfigError("reference.noise_sigma must be non-negative")
    if text is None:
        text = yaml.safe_dump(cfg, sort_keys=True)
    return RunConfig(
        params=params, geometry=geometry, n_micro=n_micro, newton=newton, protocols=protocols,
        identification=identification, output_dir=out_dir,
        snapshots=bool(output.get("snapshots", False)),
        seed=_get(cfg, "seed", "config", 0, int), noise_sigma=noise,
        verbosity=_get(cfg, "verbosity", "config", 0, int),
        sha256=hashlib.sha256(text.encode()).hexdigest(), raw=cfg,
    )


def load_config(path, overrides=(), require_files=True) -> RunConfig:
    """Read, override and validate a YAML run configuration."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"configuration file not found: {path}")
    text = path.read_text()
    try:
        cfg = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    for item in overrides:
        set_override(cfg, item)
    # output location does not change any result, so it stays out of the config hash
    hashed = [o for o in overrides if not o.strip().startswith("output.")]
    if hashed:
        text = text + "\n# overrides\n" + "\n".join(hashed)
    return config_from_dict(cfg, base_dir=path.parent, require_files=require_files, text=text)
