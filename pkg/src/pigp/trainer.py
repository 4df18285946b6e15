"""Loss assembly and the curriculum-scheduled training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adjoint import AdjointSpec, adjoint_energy, adjoint_plan, build_adjoint_problem, sensitivity_objective
from .gp_field import GpField, Kernel, build_conditioner, thin
from .grid import GridFamily, build_grid_family, tag_family
from .materials import interpolate, mass_and_cost
from .neural import (
    DTYPE,
    NonFiniteGradient,
    Pgcan,
    adam_step,
    init_temperature_bias,
    learning_rate,
    make_adam,
    save_checkpoint,
    vertex_counts,
)
from .physics import (
    EnergyBreakdown,
    TorchGeometry,
    at_quadrature,
    gradient,
    coupled_mechanical_energy,
    mechanical_energy,
    mechanical_strain,
    strain_energy_density_integral,
    thermal_energy,
    unit_stiffness,
)
from .problem import BoundaryPlan, ProblemSpec, resolve_boundaries

log = logging.getLogger(__name__)

HISTORY_SCHEMA = "pigp-history-v1"
GRAY_LOW, GRAY_HIGH = 0.1, 0.9


def scheduled_fraction(n: int, psi_0: float, psi_l: float, gamma: float, n_tol: int) -> float:
    """Linear ramp from psi_0 at n=0 to psi_l at n=gamma*n_tol, flat afterwards."""
    ramp = gamma * n_tol
    if n >= ramp:
        return psi_l
    return (psi_l - psi_0) / ramp * n + psi_0


def penalization(n: int, n_tol: int, start: float = 1.0, end: float = 3.0, ramp: float = 0.5) -> float:
    span = ramp * n_tol
    if span <= 0 or n >= span:
        return end
    return start + (end - start) * (n / span)


def gray_fractions(rho: np.ndarray) -> np.ndarray:
    """Per-phase share of centers with GRAY_LOW < rho < GRAY_HIGH."""
    rho = np.asarray(rho)
    return ((rho > GRAY_LOW) & (rho < GRAY_HIGH)).mean(axis=0)


def seed_everything(seed: int, threads: int | None = None) -> torch.Generator:
    if threads:
        torch.set_num_threads(int(threads))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    return torch.Generator().manual_seed(seed)


# ---------------------------------------------------------------- records


@dataclass
class LossBreakdown:
    total: float = 0.0
    objective_term: float = 0.0
    L_M: float = 0.0
    L_M_adj: float = 0.0
    L_T: float = 0.0
    L_T_adj: float = 0.0
    mass_penalty: float = 0.0
    cost_penalty: float = 0.0


@dataclass
class Design:
    rho: np.ndarray  # (n_centers, n_phases)
    phases: np.ndarray  # argmax phase per center
    gray: np.ndarray  # per-phase gray fraction
    grid: object

    @property
    def gray_total(self) -> float:
        mid = (self.rho > GRAY_LOW) & (self.rho < GRAY_HIGH)
        return float(mid.any(axis=1).mean())

    @property
    def binary(self) -> np.ndarray:
        return np.eye(self.rho.shape[1])[self.phases]


@dataclass
class RunResult:
    history: list[dict]
    design: Design | None
    out_dir: Path | None
    elapsed: float = 0.0
    fields: dict = field(default_factory=dict)


class HistoryWriter:
    """CSV writer with a fixed header, flushed after every row."""

    def __init__(self, path: Path | None, columns: list[str]):
        self.columns = columns
        self.rows: list[dict] = []
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._fh.write(f"# schema: {HISTORY_SCHEMA}\n")
            self._w = csv.writer(self._fh, lineterminator="\n")
            self._w.writerow(columns)
            self._fh.flush()

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self._fh is not None:
            self._w.writerow([_fmt(row.get(c, "")) for c in self.columns])
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


# ---------------------------------------------------------------- setup


def build_family(spec: ProblemSpec) -> GridFamily:
    g = spec.grid
    fam = build_grid_family(spec.domain, g["coarse"], g["fine"], g["n_g"])
    return tag_family(fam, spec.boundaries)


def _fixed_elements(grid, plan: BoundaryPlan):
    """Elements whose nodes all carry a density prescription, with the prescribed vector."""
    if plan.rho_fixed is None:
        return None
    nodes, vals = plan.rho_fixed
    lookup = np.full(grid.n_nodes, -1)
    lookup[nodes] = np.arange(len(nodes))
    pos = lookup[grid.elements]
    full = (pos >= 0).all(axis=1)
    if not full.any():
        return None
    idx = np.nonzero(full)[0]
    return torch.as_tensor(idx), torch.as_tensor(vals[pos[idx, 0]], dtype=DTYPE)


class Trainer:
    """Owns the networks, per-grid caches and the optimizer for one problem.

    ``frozen_rho`` (per-center phase fractions on every grid, or a callable
    ``grid -> array``) replaces the density network; only state fields train.
    """

    def __init__(self, spec: ProblemSpec, family: GridFamily | None = None, frozen_rho=None,
                 seed: int | None = None, threads: int | None = None):
        self.spec = spec
        self.tr = spec.train
        self.seed = int(self.tr["seed"] if seed is None else seed)
        self.gen = seed_everything(self.seed, threads or self.tr["threads"])
        self.rng = np.random.default_rng(self.seed)
        self.family = family or build_family(spec)
        self.adj: AdjointSpec = build_adjoint_problem(spec)
        self.mats = spec.materials
        self.dims = spec.dims
        self.C0 = unit_stiffness(self.mats.nu, self.dims, self.mats.plane)
        self.plans = [resolve_boundaries(spec, g) for g in self.family]
        self.aplans = [adjoint_plan(self.adj, p) for p in self.plans]
        self.geos = [TorchGeometry.build(g, int(self.tr["quadrature"])) for g in self.family]
        self.fixed = [_fixed_elements(g, p) for g, p in zip(self.family, self.plans)]
        self.frozen_rho = frozen_rho
        self.kernel = Kernel(spec.gp["phi"], spec.gp["s2"], spec.gp["jitter"])
        self.fields: dict[str, GpField] = {}
        self._build_fields()
        self.params = [p for f in self.fields.values() for p in f.net.parameters()]
        if self.rho_net is not None:
            self.params += list(self.rho_net.parameters())
        self.opt = make_adam(self.params, lr=self.tr["lr"])
        self.M0 = spec.constraints["M0"]
        self.P0 = spec.constraints["P0"]
        self.psi_l = (spec.constraints["psi_m"], spec.constraints["psi_p"])
        self.psi_0 = self._initial_fractions()
        self.S_scale = None

    # ------------------------------------------------------------ fields

    def _net(self, n_out, res, transform="scaled", scale=1.0, offset=0.0) -> Pgcan:
        nw = self.spec.network
        verts = vertex_counts(self.spec.domain.lengths, res, nw["min_vertices"])
        return Pgcan(self.dims, n_out, verts, n_rep=nw["n_rep"],
                     n_f=nw["n_f"], width=nw["width"], n_layers=nw["n_layers"], out_transform=transform,
                     scale=scale, offset=offset, generator=self.gen)

    def _conditioners(self, fixed_of, homogeneous: bool):
        """One conditioner per component from ``fixed_of(plan) -> (nodes, values)``."""
        cap = self.spec.gp["cap"]
        n_comp = len(fixed_of(self.plans[0]))
        conds = []
        for c in range(n_comp):
            X, y = {}, {}
            for g, (grid, plan) in enumerate(zip(self.family, self.plans)):
                nodes, vals = fixed_of(plan)[c]
                keep = thin(np.arange(len(nodes)), cap)
                X[g] = grid.nodes[nodes[keep]]
                y[g] = np.zeros(len(keep)) if homogeneous else vals[keep]
            if any(len(x) == 0 for x in X.values()):
                if any(len(x) for x in X.values()):
                    raise ValueError(f"component {c}: prescription vanishes on some grids")
                conds.append(None)
                continue
            conds.append(build_conditioner(self.kernel, X, y, self.family, "nodes"))
        return conds

    def _build_fields(self) -> None:
        spec, nw, L = self.spec, self.spec.network, self.spec.domain.lengths
        res = nw["res"]
        u_fixed = lambda p: p.u_fixed  # noqa: E731
        T_fixed = lambda p: [p.T_fixed]  # noqa: E731
        if spec.mechanical:
            self.fields["u"] = GpField("u", self._net(self.dims, res, scale=nw["u_scale"]),
                                       self._conditioners(u_fixed, False), L)
            if self.adj.needs_adjoint_displacement:
                vs = nw["v_scale"] or nw["u_scale"] / self.adj.alpha_u
                self.fields["v"] = GpField("v", self._net(self.dims, res, scale=vs),
                                           self._conditioners(u_fixed, True), L)
        if spec.thermal and not self.tr["isothermal"]:
            if self.plans[0].T_fixed is None:
                conds = [None]
            else:
                conds = self._conditioners(T_fixed, False)
            net = self._net(1, res, scale=nw["T_scale"])
            if self.plans[0].T_fixed is not None:
                init_temperature_bias(net, self.plans[0].T_fixed[1], self.family.coarse.nodes / np.asarray(L))
            self.fields["T"] = GpField("T", net, conds, L)
            if self.adj.needs_adjoint_temperature:
                vts = nw["vT_scale"] or nw["T_scale"] / self.adj.alpha_u
                self.fields["vT"] = GpField("vT", self._net(1, res, scale=vts), self._conditioners(T_fixed, True), L)
        self.rho_net = None
        if self.frozen_rho is None:
            self.rho_net = self._net(self.mats.n_phases, nw["design_res"] or res, transform="softmax")

    # ------------------------------------------------------------ evaluation

    def density(self, g: int) -> torch.Tensor:
        grid = self.family[g]
        if self.rho_net is None:
            fr = self.frozen_rho(grid) if callable(self.frozen_rho) else self.frozen_rho[g]
            return torch.as_tensor(fr, dtype=DTYPE)
        plan = self.rho_net.cached_plan(g, grid.centers / np.asarray(self.spec.domain.lengths))
        rho = self.rho_net(plan=plan)
        fx = self.fixed[g]
        if fx is not None:
            idx, vals = fx
            rho = rho.index_put((idx,), vals)
        return rho

    def _initial_fractions(self):
        fixed = self.tr["psi_start"]
        with torch.no_grad():
            rho = self.density(0)
        dV = self.geos[0].volume_per_element
        M, P, _, _ = mass_and_cost(rho, dV, self.mats)
        out = []
        for val, ref, psi in ((M, self.spec.constraints["M0"], self.psi_l[0]),
                              (P, self.spec.constraints["P0"], self.psi_l[1])):
            if psi is None:
                out.append(None)
            elif fixed is not None:
                out.append(float(fixed))
            else:
                out.append(float(val) / ref)
        return tuple(out)

    def targets(self, epoch: int):
        g, n = self.tr["gamma"], self.tr["n_tol"]
        return tuple(None if p0 is None else scheduled_fraction(epoch, p0, pl, g, n)
                     for p0, pl in zip(self.psi_0, self.psi_l))

    def penal(self, epoch: int) -> float:
        return penalization(epoch, self.tr["n_tol"], self.tr["penal_start"], self.tr["penal_end"],
                            self.tr["penal_ramp"])

    def losses(self, g: int, epoch: int):
        """Total loss and its parts on grid ``g`` (no optimizer step)."""
        spec, tr, adj = self.spec, self.tr, self.adj
        geo, plan, aplan = self.geos[g], self.plans[g], self.aplans[g]
        grid = self.family[g]
        ph = spec.physics
        p = self.penal(epoch)
        rho = self.density(g)
        props = interpolate(self.mats, rho, p)
        if not self.mats.interpolate_source:
            props["s"] = torch.full((grid.n_elements,), float(ph["source"]), dtype=DTYPE)
        fixed_props = {k: v.detach() for k, v in props.items()}
        energy_props = props if tr["energy_design_gradient"] else fixed_props

        f = {k: fld.evaluate(grid, "nodes") for k, fld in self.fields.items()}
        u = f.get("u")
        T = f["T"][:, 0] if "T" in f else None
        v = f.get("v")
        vT = f["vT"][:, 0] if "vT" in f else None
        if spec.thermal and tr["isothermal"]:
            T_val = float(np.max(plan.T_fixed[1])) if plan.T_fixed is not None else ph["T_inf"]
            T = torch.full((grid.n_nodes,), T_val, dtype=DTYPE)

        mech, therm = EnergyBreakdown(), EnergyBreakdown()
        mech_a, therm_a = EnergyBreakdown(), EnergyBreakdown()
        if T is not None and "T" in f:
            therm = thermal_energy(T, energy_props["kappa"], geo, energy_props["s"], ph["h_v"], ph["T_inf"], plan.flux)
        if u is not None:
            if spec.thermal:
                dT = at_quadrature(T.detach(), geo) - ph["T_inf"]
                mech = coupled_mechanical_energy(u, energy_props["E"], energy_props["alpha"], dT, geo, self.C0,
                                                 plan.loads, plan.springs)
            else:
                mech = mechanical_energy(u, energy_props["E"], geo, self.C0, plan.loads, plan.springs)
        if v is not None or vT is not None:
            mech_a, therm_a = adjoint_energy(adj, aplan, geo, self.C0, energy_props, v=v, vT=vT, u=u, h_v=ph["h_v"])

        S = sensitivity_objective(spec.objective, geo, self.C0, props, u=u, T=T, v=v, vT=vT,
                                  alpha_u=adj.alpha_u, alpha_T=adj.alpha_T, T_inf=ph["T_inf"],
                                  isothermal=adj.isothermal)
        if tr["objective_scale"] == "initial":
            if self.S_scale is None:
                self.S_scale = max(abs(float(S.detach())), 1e-300)
            S = S / self.S_scale

        dV = geo.volume_per_element
        M, P, _, _ = mass_and_cost(rho, dV, self.mats)
        psi_m, psi_p = self.targets(epoch)
        zero = rho.new_zeros(())
        C_M = M - psi_m * self.M0 if psi_m is not None else zero
        C_P = P - psi_p * self.P0 if psi_p is not None else zero
        r_M, r_P = C_M, C_P
        if tr["normalize_constraints"]:
            if psi_m is not None:
                r_M = C_M / (self.psi_l[0] * self.M0)
            if psi_p is not None:
                r_P = C_P / (self.psi_l[1] * self.P0)
        if self.rho_net is None:
            r_M, r_P = zero, zero

        terms = LossBreakdown()
        parts = {
            "objective_term": S,
            "L_M": tr["omega_m"] * mech.L_M,
            "L_M_adj": tr["omega_m"] * mech_a.L_M,
            "L_T": tr["omega_t"] * therm.L_T,
            "L_T_adj": tr["omega_t"] * therm_a.L_T,
            "mass_penalty": tr["omega_v"] * r_M ** 2,
            "cost_penalty": tr["omega_p"] * r_P ** 2,
        }
        if self.rho_net is None:
            parts["objective_term"] = zero
        total = sum(torch.as_tensor(t, dtype=DTYPE) for t in parts.values())
        for k, t in parts.items():
            setattr(terms, k, float(t.detach()) if isinstance(t, torch.Tensor) else float(t))
        terms.total = float(total.detach())

        with torch.no_grad():
            rec = {"psi_m": psi_m, "psi_p": psi_p, "penal": p, "M": float(M), "P": float(P),
                   "C_M": float(C_M), "C_P": float(C_P)}
            rec.update(self._objective_estimate(u, T, props, plan, geo))
            for name, br in (("mech", mech), ("therm", therm), ("mech_adj", mech_a), ("therm_adj", therm_a)):
                for k, val in br.as_floats().items():
                    if val:
                        rec[f"{name}.{k}"] = val
            gray = gray_fractions(rho.detach().numpy())
            for i, gv in enumerate(gray):
                rec[f"gray_{i}"] = float(gv)
        return total, terms, rec

    def _objective_estimate(self, u, T, props, plan, geo) -> dict:
        """Objective value implied by the current fields (for monitoring only)."""
        kind = self.spec.objective
        if kind == "compliance":
            eps = mechanical_strain(u.detach(), geo)
            return {"objective": float(strain_energy_density_integral(eps, eps, props["E"].detach(), geo, self.C0))}
        if kind == "thermal-compliance":
            gT = gradient(T.detach(), geo)
            k = props["kappa"].detach()[:, None]
            return {"objective": float(0.5 * (k * (gT * gT).sum(-1) * geo.dV).sum())}
        d = torch.as_tensor(plan.out_dir, dtype=DTYPE)
        return {"objective": float(-(u.detach()[plan.out_node] * d).sum())}

    # ------------------------------------------------------------ loop

    def step(self, epoch: int, g: int | None = None):
        if g is None:
            g = int(self.rng.integers(self.family.n_g))
        self.opt.zero_grad(set_to_none=True)
        total, terms, rec = self.losses(g, epoch)
        if not math.isfinite(terms.total):
            raise NonFiniteGradient(f"non-finite loss at epoch {epoch}", vars(terms))
        total.backward()
        lr = learning_rate(epoch, self.tr["n_tol"], self.tr["lr"], self.tr["lr_factor"], self.tr["lr_stages"])
        adam_step(self.opt, lr, vars(terms))
        rec.update(epoch=epoch, grid=g, lr=lr)
        return terms, rec

    def nets(self) -> dict:
        out = {k: fld.net for k, fld in self.fields.items()}
        if self.rho_net is not None:
            out["rho"] = self.rho_net
        return out

    def run(self, epochs: int | None = None, out_dir: Path | None = None, progress: int = 0) -> RunResult:
        n_tol = int(epochs or self.tr["n_tol"])
        if n_tol != self.tr["n_tol"]:
            self.tr = dict(self.tr, n_tol=n_tol)
        out_dir = Path(out_dir) if out_dir else None
        if out_dir:
            out_dir.mkdir(parents=True, exist_ok=True)
        writer = HistoryWriter(out_dir / "history.csv" if out_dir else None, self.history_columns())
        every = int(self.tr["checkpoint_every"] or 0)
        t0 = time.perf_counter()
        try:
            for epoch in range(n_tol):
                try:
                    terms, rec = self.step(epoch)
                except NonFiniteGradient:
                    log.error("aborting at epoch %d; last checkpoint kept", epoch)
                    raise
                rec.update(vars(terms))
                writer.append(rec)
                if progress and epoch % progress == 0:
                    log.info("epoch %d loss %.6g M %.6g", epoch, terms.total, rec["M"])
                if out_dir and every and (epoch + 1) % every == 0:
                    self.checkpoint(out_dir / "checkpoint.npz", epoch + 1)
                if self.tr["early_stop"] and self._converged(writer.rows):
                    log.info("early stop at epoch %d", epoch)
                    break
        finally:
            writer.close()
        if out_dir:
            self.checkpoint(out_dir / "checkpoint.npz", len(writer.rows))
        design = self.extract_design() if self.rho_net is not None else None
        return RunResult(writer.rows, design, out_dir, time.perf_counter() - t0)

    def _converged(self, rows, window: int = 200, tol: float = 1e-4) -> bool:
        if len(rows) < 2 * window or len(rows) < self.tr["gamma"] * self.tr["n_tol"]:
            return False
        a = np.mean([r["total"] for r in rows[-2 * window:-window]])
        b = np.mean([r["total"] for r in rows[-window:]])
        return abs(a - b) <= tol * max(abs(a), 1e-12)

    def checkpoint(self, path: Path, epoch: int) -> None:
        save_checkpoint(path, self.nets(), {"epoch": epoch, "config_hash": self.spec.config_hash(),
                                           "seed": self.seed})

    def history_columns(self) -> list[str]:
        cols = ["epoch", "grid", "lr", "penal", "psi_m", "psi_p", "total", "objective_term", "L_M", "L_M_adj",
                "L_T", "L_T_adj", "mass_penalty", "cost_penalty", "M", "P", "C_M", "C_P", "objective"]
        for name in ("mech", "therm", "mech_adj", "therm_adj"):
            cols += [f"{name}.{k}" for k in EnergyBreakdown().as_floats()]
        cols += [f"gray_{i}" for i in range(self.mats.n_phases)]
        return cols

    # ------------------------------------------------------------ results

    @torch.no_grad()
    def extract_design(self, g: int | None = None) -> Design:
        g = self.family.n_g - 1 if g is None else g
        rho = self.density(g).numpy().copy()
        return Design(rho, rho.argmax(axis=1), gray_fractions(rho), self.family[g])

    @torch.no_grad()
    def state(self, g: int | None = None) -> dict:
        """Nodal fields on grid ``g`` (finest by default) as numpy arrays."""
        g = self.family.n_g - 1 if g is None else g
        out = {}
        for k, fld in self.fields.items():
            val = fld.evaluate(self.family[g], "nodes").numpy()
            out[k] = val[:, 0] if val.shape[1] == 1 else val
        return out


def solve_state(spec: ProblemSpec, grid_family: GridFamily, rho_per_grid, epochs: int, seed: int = 0,
                threads: int | None = None) -> Trainer:
    """Train only the state fields with densities frozen."""
    tr = Trainer(spec, grid_family, frozen_rho=rho_per_grid, seed=seed, threads=threads)
    tr.run(epochs)
    return tr
