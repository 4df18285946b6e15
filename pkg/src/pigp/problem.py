"""Declarative problem definitions and their per-grid boundary plans."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .grid import BoundaryData, Domain, GridError, select_nodes
from .materials import STANDARD_PHASES, MaterialPhase, MaterialSet
from .physics import OBJECTIVES, PointLoad, Spring

log = logging.getLogger(__name__)


class SpecError(ValueError):
    """Invalid problem configuration; ``path`` names the offending key."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


# Real metals for the thermo-elastic devices: alpha [1/K], kappa [W/(um K)],
# density [g/cm^3], E [N/um^2], s [W/um^3].
METALS = {
    "Ni": dict(alpha=1.5e-5, kappa=9.07e-5, density=8.9, E=0.200, s=-4.5e-8),
    "Fe": dict(alpha=1.2e-5, kappa=6.00e-5, density=7.8, E=0.200, s=-4.5e-8),
    "Al": dict(alpha=2.3e-5, kappa=2.37e-4, density=2.7, E=0.070, s=-4.5e-8),
    "Cu": dict(alpha=1.7e-5, kappa=4.00e-4, density=8.96, E=0.128, s=-4.5e-8),
    "Ti": dict(alpha=8.6e-6, kappa=2.59e-5, density=4.5, E=0.120, s=-4.5e-8),
}


def metal_set(names, nu: float = 0.31, void_fraction: float = 1e-5) -> MaterialSet:
    """Void plus the named metals; densities normalized by the heaviest one."""
    rows = [METALS[n] for n in names]
    dmax = max(r["density"] for r in rows)
    emax = max(r["E"] for r in rows)
    kmax = max(r["kappa"] for r in rows)
    phases = [MaterialPhase("void", E=void_fraction * emax, kappa=void_fraction * kmax)]
    for n, r in zip(names, rows):
        phases.append(MaterialPhase(n, E=r["E"], kappa=r["kappa"], alpha=r["alpha"], s=r["s"],
                                    rho_bar=r["density"] / dmax, p_bar=0.0))
    return MaterialSet(tuple(phases), nu=nu)


# ---------------------------------------------------------------- schema

TRAIN_DEFAULTS = dict(
    n_tol=10000,
    gamma=0.5,
    omega_m=1.0,
    omega_t=1.0,
    omega_v=100.0,
    omega_p=100.0,
    lr=1e-3,
    lr_factor=0.75,
    lr_stages=[0.2, 0.4, 0.6, 0.8],
    seed=0,
    alpha_u=None,
    alpha_T=1.0,
    penal_start=1.0,
    penal_end=3.0,
    penal_ramp=0.5,
    normalize_constraints=True,
    energy_design_gradient=False,
    adjoint_spring_uses_primary=False,
    isothermal=False,
    checkpoint_every=500,
    early_stop=False,
    psi_start=None,
    objective_scale="initial",
    threads=1,
    quadrature=1,
)

NETWORK_DEFAULTS = dict(
    n_rep=3,
    n_f=128,
    res=36,
    min_vertices=4,
    width=None,
    n_layers=3,
    u_scale=1.0,
    T_scale=1.0,
    v_scale=None,
    vT_scale=None,
    design_res=None,
)

GP_DEFAULTS = dict(phi=0.5, s2=1.0, jitter=1e-5, cap=600)

SIMP_DEFAULTS = dict(iterations=200, filter_radius=1.5, move=0.2, penal=3.0, rho_min=1e-3, resolution=None)

PHYSICS_DEFAULTS = dict(h_v=0.0, T_inf=0.0, source=0.0, source_interpolated=False, plane="stress")

TOP_KEYS = {"name", "objective", "domain", "materials", "boundaries", "constraints", "physics",
            "output", "grid", "train", "network", "gp", "simp", "description"}
REQUIRED = ("name", "objective", "domain", "materials", "boundaries", "grid")


def _strict(d: dict, allowed, path: str):
    if not isinstance(d, dict):
        raise SpecError("expected a mapping", path)
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise SpecError(f"unknown keys {extra}", path)


def _merge(defaults: dict, given: dict | None, path: str) -> dict:
    given = given or {}
    _strict(given, defaults, path)
    out = copy.deepcopy(defaults)
    out.update(given)
    return out


@dataclass
class ProblemSpec:
    name: str
    objective: str
    domain: Domain
    materials: MaterialSet
    boundaries: list[BoundaryData]
    constraints: dict
    physics: dict
    output: dict | None
    grid: dict
    train: dict
    network: dict
    gp: dict
    simp: dict
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def dims(self) -> int:
        return self.domain.dims

    @property
    def thermal(self) -> bool:
        return self.objective in ("thermal-compliance", "thermo-mechanical-device")

    @property
    def mechanical(self) -> bool:
        return self.objective != "thermal-compliance"

    @property
    def alpha_u(self) -> float:
        a = self.train["alpha_u"]
        if a is not None:
            return float(a)
        return 10.0 if self.objective in ("compliant-mechanism", "thermo-mechanical-device") else 1.0

    @property
    def alpha_T(self) -> float:
        return float(self.train["alpha_T"])

    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, **train) -> "ProblemSpec":
        raw = copy.deepcopy(self.raw)
        raw.setdefault("train", {}).update({k: v for k, v in train.items() if v is not None})
        return parse_spec(raw)


def _materials(d: dict, path: str) -> MaterialSet:
    _strict(d, {"table", "use", "phases", "nu", "void", "plane"}, path)
    nu = float(d.get("nu", 0.31))
    table = d.get("table", "standard")
    if table == "standard":
        ms = MaterialSet(STANDARD_PHASES, nu=nu)
        if "use" in d:
            ms = ms.subset(d["use"])
    elif table == "metals":
        if "use" not in d:
            raise SpecError("metal tables need a 'use' list", path)
        ms = metal_set(d["use"], nu=nu)
    elif table == "custom":
        rows = d.get("phases")
        if not rows:
            raise SpecError("custom tables need 'phases'", path)
        ms = MaterialSet(tuple(MaterialPhase(**r) for r in rows), nu=nu)
    else:
        raise SpecError(f"unknown material table {table!r}", path)
    return ms


def _boundary(d: dict, path: str) -> BoundaryData:
    _strict(d, {"region", "kind", "selector", "values", "components", "direction", "stiffness"}, path)
    for k in ("region", "kind", "selector"):
        if k not in d:
            raise SpecError(f"missing {k!r}", path)
    try:
        return BoundaryData(
            region=d["region"], kind=d["kind"], selector=dict(d["selector"]),
            values=tuple(np.atleast_1d(d.get("values", [0.0])).tolist()),
            components=tuple(d.get("components", ())),
            direction=tuple(d["direction"]) if d.get("direction") is not None else None,
            stiffness=float(d.get("stiffness", 0.0)),
        )
    except GridError as exc:
        raise SpecError(str(exc), path) from exc


def parse_spec(config: dict | str) -> ProblemSpec:
    """Validate a configuration tree (or YAML text) and resolve defaults."""
    if isinstance(config, str):
        config = yaml.safe_load(config) or {}
    if not isinstance(config, dict):
        raise SpecError("configuration must be a mapping")
    missing = [k for k in REQUIRED if k not in config]
    if missing:
        raise SpecError(f"missing required fields {missing}")
    _strict(config, TOP_KEYS, "")
    raw = copy.deepcopy(config)

    if config["objective"] not in OBJECTIVES:
        raise SpecError(f"unknown objective {config['objective']!r}", "objective")
    dom = config["domain"]
    _strict(dom, {"lengths", "mask"}, "domain")
    try:
        domain = Domain(tuple(dom["lengths"]), dom.get("mask", "none"))
    except (GridError, KeyError) as exc:
        raise SpecError(str(exc), "domain") from exc

    physics = _merge(PHYSICS_DEFAULTS, config.get("physics"), "physics")
    materials = _materials(config["materials"], "materials")
    materials = dataclasses.replace(materials, plane=physics["plane"],
                                    interpolate_source=bool(physics["source_interpolated"]))
    boundaries = [_boundary(b, f"boundaries[{i}]") for i, b in enumerate(config["boundaries"] or [])]
    names = [b.region for b in boundaries]
    if len(set(names)) != len(names):
        raise SpecError("region names must be unique", "boundaries")

    grid = config["grid"]
    _strict(grid, {"coarse", "fine", "n_g"}, "grid")
    for k in ("coarse", "fine"):
        if k not in grid:
            raise SpecError(f"missing {k!r}", "grid")
    grid = {"coarse": list(grid["coarse"]), "fine": list(grid["fine"]), "n_g": int(grid.get("n_g", 1))}

    cons = config.get("constraints") or {}
    _strict(cons, {"psi_m", "M0", "psi_p", "P0"}, "constraints")
    cons = {k: (None if cons.get(k) is None else float(cons[k])) for k in ("psi_m", "M0", "psi_p", "P0")}
    _check_reference(cons, domain, materials)

    output = config.get("output")
    if config["objective"] in ("compliant-mechanism", "thermo-mechanical-device"):
        if not output or "region" not in output or "direction" not in output:
            raise SpecError("mechanism objectives need output.region and output.direction", "output")
        if output["region"] not in names:
            raise SpecError(f"output region {output['region']!r} is not defined", "output")
        d = np.asarray(output["direction"], dtype=float)
        output = {"region": output["region"], "direction": (d / np.linalg.norm(d)).tolist()}
    elif output is not None:
        _strict(output, {"region", "direction"}, "output")

    spec = ProblemSpec(
        name=str(config["name"]),
        objective=config["objective"],
        domain=domain,
        materials=materials,
        boundaries=boundaries,
        constraints=cons,
        physics=physics,
        output=output,
        grid=grid,
        train=_merge(TRAIN_DEFAULTS, config.get("train"), "train"),
        network=_merge(NETWORK_DEFAULTS, config.get("network"), "network"),
        gp=_merge(GP_DEFAULTS, config.get("gp"), "gp"),
        simp=_merge(SIMP_DEFAULTS, config.get("simp"), "simp"),
        raw=raw,
    )
    if not 0 < spec.train["gamma"] <= 1:
        raise SpecError("gamma must lie in (0, 1]", "train.gamma")
    for w in ("omega_m", "omega_t", "omega_v", "omega_p"):
        if spec.train[w] < 0:
            raise SpecError("loss weights must be non-negative", f"train.{w}")
    return spec


def _check_reference(cons: dict, domain: Domain, mats: MaterialSet, tol: float = 0.1) -> None:
    """Compare M0/P0 with volume x heaviest/priciest phase; recompute when far off."""
    for key, psi, col in (("M0", "psi_m", "rho_bar"), ("P0", "psi_p", "p_bar")):
        if cons[psi] is None:
            continue
        expect = domain.volume * float(mats.column(col).max())
        given = cons[key]
        if given is None:
            cons[key] = expect
            continue
        rel = abs(given - expect) / max(expect, 1e-300)
        if rel > tol:
            log.warning("%s=%g inconsistent with domain (expected %g); recomputed", key, given, expect)
            cons[key] = expect
        elif rel > 1e-9:
            log.warning("%s=%g differs from volume-based %g by %.1f%%; kept", key, given, expect, 100 * rel)


def serialize_spec(spec: ProblemSpec) -> str:
    return yaml.safe_dump(spec.raw, sort_keys=True)


def bundled_problems() -> list[str]:
    root = resources.files("pigp") / "problems"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_spec(name_or_path: str | Path) -> ProblemSpec:
    """Parse a YAML file, or a bundled problem by name."""
    p = Path(name_or_path)
    if p.exists():
        return parse_spec(p.read_text())
    res = resources.files("pigp") / "problems" / f"{name_or_path}.yaml"
    if res.is_file():
        return parse_spec(res.read_text())
    raise SpecError(f"no such problem file or bundled problem: {name_or_path}")


# ---------------------------------------------------------------- boundary plans


@dataclass
class BoundaryPlan:
    """Boundary data resolved to node indices on one grid."""

    u_fixed: list  # per component: (nodes, values)
    T_fixed: tuple | None
    rho_fixed: tuple | None  # (nodes, (n, n_phases) values)
    loads: list[PointLoad]
    springs: list[Spring]
    flux: list[tuple[int, float]]
    out_node: int | None = None
    out_dir: tuple | None = None
    snaps: dict = field(default_factory=dict)

    def fixed_dofs(self, dims: int) -> tuple[np.ndarray, np.ndarray]:
        dofs, vals = [], []
        for c, (nodes, v) in enumerate(self.u_fixed):
            dofs.append(nodes * dims + c)
            vals.append(v)
        if not dofs:
            return np.zeros(0, dtype=int), np.zeros(0)
        return np.concatenate(dofs), np.concatenate(vals)

    def homogeneous(self) -> "BoundaryPlan":
        """Same Dirichlet sets with zero values, no loads (adjoint template)."""
        u = [(n, np.zeros_like(v)) for n, v in self.u_fixed]
        T = None if self.T_fixed is None else (self.T_fixed[0], np.zeros_like(self.T_fixed[1]))
        return BoundaryPlan(u, T, self.rho_fixed, [], list(self.springs), [], self.out_node, self.out_dir, self.snaps)


def _unique_last(nodes: list, vals: list):
    if not nodes:
        return np.zeros(0, dtype=int), np.zeros((0,) + (vals[0].shape[1:] if vals else ()))
    n = np.concatenate(nodes)
    v = np.concatenate(vals)
    # later regions override earlier ones at shared nodes
    _, first_rev = np.unique(n[::-1], return_index=True)
    keep = np.sort(len(n) - 1 - first_rev)
    return n[keep], v[keep]


def _edge_weights(grid, nodes: np.ndarray) -> np.ndarray:
    """Lumped boundary lengths for a 2D edge node set (trapezoid rule)."""
    x = grid.nodes[nodes]
    axis = int(np.argmax(np.ptp(x, axis=0))) if len(x) > 1 else 0
    order = np.argsort(x[:, axis])
    s = x[order, axis]
    w = np.zeros(len(s))
    if len(s) > 1:
        seg = np.diff(s)
        w[:-1] += seg / 2
        w[1:] += seg / 2
    out = np.empty_like(w)
    out[order] = w
    return out


def resolve_boundaries(spec: ProblemSpec, grid) -> BoundaryPlan:
    dims = spec.dims
    n_ph = spec.materials.n_phases
    u_nodes = [[] for _ in range(dims)]
    u_vals = [[] for _ in range(dims)]
    T_nodes, T_vals, r_nodes, r_vals = [], [], [], []
    loads, springs, flux, snaps = [], [], [], {}
    region_nodes = {}
    for bc in spec.boundaries:
        idx, snap = select_nodes(grid, bc.selector, bc.region)
        if len(idx) == 0:
            raise SpecError(f"region {bc.region!r} matches no nodes on grid {grid.shape}", "boundaries")
        region_nodes[bc.region] = idx
        if "point" in bc.selector:
            snaps[bc.region] = snap
        if bc.kind == "dirichlet-displacement":
            comps = bc.components or tuple(range(dims))
            vals = np.broadcast_to(np.asarray(bc.values, dtype=float), (len(comps),)) if len(bc.values) in (1, len(comps)) else None
            if vals is None:
                raise SpecError(f"{bc.region}: values do not match components", "boundaries")
            for c, v in zip(comps, vals):
                u_nodes[c].append(idx)
                u_vals[c].append(np.full(len(idx), v))
        elif bc.kind == "dirichlet-temperature":
            T_nodes.append(idx)
            T_vals.append(np.full(len(idx), bc.values[0]))
        elif bc.kind == "dirichlet-density":
            v = np.asarray(bc.values, dtype=float)
            if v.size == 1:
                one = np.zeros(n_ph)
                one[int(v[0])] = 1.0
                v = one
            if v.size != n_ph:
                raise SpecError(f"{bc.region}: density prescription needs {n_ph} values", "boundaries")
            r_nodes.append(idx)
            r_vals.append(np.tile(v, (len(idx), 1)))
        elif bc.kind == "point-load":
            d = np.asarray(bc.direction if bc.direction is not None else np.eye(dims)[0])
            loads.append(PointLoad(int(idx[0]), tuple(bc.values[0] * d)))
        elif bc.kind == "point-spring":
            if bc.direction is None:
                raise SpecError(f"{bc.region}: springs need a direction", "boundaries")
            springs.append(Spring(int(idx[0]), bc.direction, bc.stiffness))
        elif bc.kind == "flux":
            w = _edge_weights(grid, idx)
            flux.extend((int(n), float(bc.values[0] * wi)) for n, wi in zip(idx, w))
    u_fixed = [_unique_last(u_nodes[c], u_vals[c]) for c in range(dims)]
    T_fixed = _unique_last(T_nodes, T_vals) if T_nodes else None
    rho_fixed = _unique_last(r_nodes, r_vals) if r_nodes else None
    out_node = out_dir = None
    if spec.output and spec.output.get("region"):
        out_node = int(region_nodes[spec.output["region"]][0])
        out_dir = tuple(spec.output["direction"])
    return BoundaryPlan(u_fixed, T_fixed, rho_fixed, loads, springs, flux, out_node, out_dir, snaps)


def to_jsonable(obj: Any):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return to_jsonable(obj.item())
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj
