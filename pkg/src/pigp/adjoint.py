"""Adjoint problems, adjoint energies and sensitivity-consistent objectives.

The design gradient of every problem class comes from a scalar ``S(rho)`` in
which the state and adjoint fields are frozen (detached).  Differentiating
``S`` with respect to the densities gives the continuous-adjoint sensitivity:

* compliance:        dS = -a_u int dC grad u : grad u
* mechanism:         dS = -a_u int dC grad u : grad v
* thermal compliance dS = -1/2 int dk |grad T|^2
* thermo-elastic:    dS = -a_u int dC (grad u - alpha dT I) : grad v
                          + a_u int sigma(v) : d(alpha) dT I
                          - a_T int dk grad T . grad v_T + a_T int ds v_T
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from .neural import DTYPE
from .physics import (
    EnergyBreakdown,
    PointLoad,
    TorchGeometry,
    at_quadrature,
    gradient,
    identity_voigt,
    mechanical_strain,
    point_terms,
    strain_energy_density_integral,
    _per_q,
)
from .problem import BoundaryPlan, ProblemSpec, SpecError

SELF_ADJOINT = ("compliance", "thermal-compliance")


@dataclass(frozen=True)
class AdjointSpec:
    kind: str
    needs_adjoint_displacement: bool
    needs_adjoint_temperature: bool
    alpha_u: float
    alpha_T: float
    spring_uses_primary: bool = False
    isothermal: bool = False

    @property
    def self_adjoint(self) -> bool:
        return not (self.needs_adjoint_displacement or self.needs_adjoint_temperature)


def build_adjoint_problem(spec: ProblemSpec) -> AdjointSpec:
    kind = spec.objective
    a_u, a_T = spec.alpha_u, spec.alpha_T
    tr = spec.train
    if kind in SELF_ADJOINT:
        return AdjointSpec(kind, False, False, a_u, a_T)
    if not spec.output or "region" not in spec.output:
        raise SpecError(f"{kind} needs an output node", "output")
    if kind == "compliant-mechanism":
        return AdjointSpec(kind, True, False, a_u, a_T, bool(tr["adjoint_spring_uses_primary"]))
    iso = bool(tr["isothermal"])
    return AdjointSpec(kind, True, not iso, a_u, a_T, bool(tr["adjoint_spring_uses_primary"]), iso)


def adjoint_plan(adj: AdjointSpec, plan: BoundaryPlan) -> BoundaryPlan:
    """Adjoint boundary data on one grid.

    Same homogeneous supports and springs as the primary, primary loads
    removed, and a point load -(1/alpha_u) e_n at the output node.
    """
    base = plan.homogeneous()
    if adj.needs_adjoint_displacement:
        f = -np.asarray(plan.out_dir, dtype=float) / adj.alpha_u
        base.loads = [PointLoad(plan.out_node, tuple(f))]
    return base


def adjoint_energy(adj: AdjointSpec, aplan: BoundaryPlan, geo: TorchGeometry, C0: torch.Tensor, props: dict,
                   v=None, vT=None, u=None, h_v: float = 0.0):
    """(L_M^a breakdown, L_T^a breakdown) for the adjoint fields.

    ``props`` hold per-element E, kappa, alpha; ``u`` is the primary
    displacement, used (detached) only by the as-written spring variant.
    """
    mech, therm = EnergyBreakdown(), EnergyBreakdown()
    if adj.needs_adjoint_displacement and v is not None:
        eps = mechanical_strain(v, geo)
        mech.strain_energy = 0.5 * strain_energy_density_integral(eps, eps, props["E"], geo, C0)
        if adj.spring_uses_primary:
            _, work = point_terms(v, aplan.loads, ())
            coupling = v.new_zeros(())
            for s in aplan.springs:
                d = torch.as_tensor(s.direction, dtype=DTYPE)
                coupling = coupling + s.stiffness * (u.detach()[s.node] * d).sum() * (v[s.node] * d).sum()
            mech.spring_energy = v.new_zeros(())
            mech.external_work = work - coupling
        else:
            mech.spring_energy, mech.external_work = point_terms(v, aplan.loads, aplan.springs)
    if adj.needs_adjoint_temperature and vT is not None:
        gv = gradient(vT, geo)
        therm.thermal_energy = 0.5 * (_per_q(props["kappa"], geo) * (gv * gv).sum(-1) * geo.dV).sum()
        vq = at_quadrature(vT, geo)
        if h_v:
            therm.convection_energy = 0.5 * h_v * ((vq ** 2) * geo.dV).sum()
        src = adjoint_thermal_source(adj, geo, C0, props, v.detach())
        therm.source_energy = (src * vq * geo.dV).sum()
    return mech, therm


def adjoint_thermal_source(adj: AdjointSpec, geo, C0, props, v) -> torch.Tensor:
    """(alpha_u / alpha_T) sigma(v) : alpha I at every quadrature point."""
    sig = _per_q(props["E"], geo)[..., None] * (mechanical_strain(v, geo) @ C0)
    trace = (sig * identity_voigt(geo.dims)).sum(-1)
    return (adj.alpha_u / adj.alpha_T) * _per_q(props["alpha"], geo) * trace


def sensitivity_objective(kind: str, geo: TorchGeometry, C0: torch.Tensor, props: dict, *, u=None, T=None,
                          v=None, vT=None, alpha_u: float = 1.0, alpha_T: float = 1.0, T_inf: float = 0.0,
                          isothermal: bool = False) -> torch.Tensor:
    """Scalar whose density gradient is the continuous-adjoint sensitivity.

    Fields are detached here; only ``props`` (functions of the densities)
    carry gradients.
    """
    d = lambda t: None if t is None else t.detach()  # noqa: E731
    u, T, v, vT = d(u), d(T), d(v), d(vT)
    if kind == "compliance":
        eps = mechanical_strain(u, geo)
        return -alpha_u * strain_energy_density_integral(eps, eps, props["E"], geo, C0)
    if kind == "thermal-compliance":
        gT = gradient(T, geo)
        return -0.5 * (_per_q(props["kappa"], geo) * (gT * gT).sum(-1) * geo.dV).sum()
    if kind == "compliant-mechanism":
        return -alpha_u * strain_energy_density_integral(mechanical_strain(u, geo), mechanical_strain(v, geo),
                                                         props["E"], geo, C0)
    if kind == "thermo-mechanical-device":
        dT = at_quadrature(T, geo) - T_inf
        eps_m = mechanical_strain(u, geo, props["alpha"], dT)
        S = -alpha_u * strain_energy_density_integral(eps_m, mechanical_strain(v, geo), props["E"], geo, C0)
        if not isothermal and vT is not None:
            gT, gv = gradient(T, geo), gradient(vT, geo)
            S = S - alpha_T * (_per_q(props["kappa"], geo) * (gT * gv).sum(-1) * geo.dV).sum()
            S = S + alpha_T * (_per_q(props["s"], geo) * at_quadrature(vT, geo) * geo.dV).sum()
        return S
    raise ValueError(f"unknown objective class {kind!r}")


def element_sensitivities(kind: str, geo: TorchGeometry, C0, mats, rho: np.ndarray, penal: float, phase: int,
                          source=None, **fields) -> np.ndarray:
    """Per-element dS/d rho[e, phase] via autograd on ``sensitivity_objective``."""
    from .materials import interpolate

    r = torch.as_tensor(rho, dtype=DTYPE).clone().requires_grad_(True)
    props = interpolate(mats, r, penal)
    if source is not None:
        props["s"] = torch.as_tensor(source, dtype=DTYPE).expand(len(rho))
    t = {k: (None if val is None else torch.as_tensor(val, dtype=DTYPE)) for k, val in fields.items()
         if k in ("u", "T", "v", "vT")}
    extra = {k: val for k, val in fields.items() if k not in t}
    S = sensitivity_objective(kind, geo, C0, props, **t, **extra)
    (g,) = torch.autograd.grad(S, r)
    return g[:, phase].numpy()


def with_alpha_u(adj: AdjointSpec, alpha_u: float) -> AdjointSpec:
    return dataclasses.replace(adj, alpha_u=alpha_u)


@dataclass
class AdjointCheck:
    kind: str
    max_rel_err: float
    n_checked: int
    n_excluded: int
    rows: list


def boundary_adjacent(grid, plan: BoundaryPlan) -> np.ndarray:
    """Elements touching a support, load, spring or prescribed-temperature node."""
    dims = grid.dims
    nodes = [plan.fixed_dofs(dims)[0] // dims, [ld.node for ld in plan.loads], [s.node for s in plan.springs]]
    if plan.T_fixed is not None:
        nodes.append(plan.T_fixed[0])
    mark = np.zeros(grid.n_nodes, dtype=bool)
    mark[np.concatenate([np.asarray(n, dtype=int) for n in nodes])] = True
    return mark[grid.elements].any(axis=1)


def verify_adjoint(spec: ProblemSpec, counts=(9, 5), seed: int = 0, h: float = 1e-4,
                   dT_fixed: float | None = None, exclude_boundary: bool = True) -> AdjointCheck:
    """Continuous sensitivities on oracle states vs central differences of the oracle objective.

    Fields come from the FEM oracle; the continuous expressions are integrated
    with the oracle's 2x2 rule so both sides see the same discretization.
    ``dT_fixed`` switches a thermo-elastic device to the isothermal form.
    """
    from .fem import FemModel, element_properties, fd_sensitivity, solve_problem
    from .grid import build_grid, tag_boundaries
    from .physics import unit_stiffness
    from .problem import resolve_boundaries

    if dT_fixed is not None:
        spec = spec.with_overrides(isothermal=True)
    grid = tag_boundaries(build_grid(spec.domain, counts), spec.boundaries)
    plan = resolve_boundaries(spec, grid)
    mats = spec.materials
    model = FemModel(grid, mats.nu, mats.plane, order=2)
    rng = np.random.default_rng(seed)
    rho = rng.dirichlet(np.full(mats.n_phases, 2.0), size=grid.n_elements)
    dT = None if dT_fixed is None else np.full(grid.n_nodes, float(dT_fixed))
    st = solve_problem(spec, model, plan, element_properties(spec, rho), dT_fixed=dT)
    geo = TorchGeometry.build(grid, 2)
    C0 = torch.as_tensor(unit_stiffness(mats.nu, spec.dims, mats.plane))
    src = None if mats.interpolate_source else spec.physics["source"]
    skip = boundary_adjacent(grid, plan) if exclude_boundary else np.zeros(grid.n_elements, dtype=bool)
    rows, worst = [], 0.0
    for phase in range(1, mats.n_phases):
        g = element_sensitivities(spec.objective, geo, C0, mats, rho, mats.penal, phase, source=src,
                                  u=st.u, T=st.T, v=st.v, vT=st.vT, alpha_u=spec.alpha_u,
                                  alpha_T=spec.alpha_T, T_inf=spec.physics["T_inf"],
                                  isothermal=dT_fixed is not None)
        for e in np.nonzero(~skip)[0]:
            fd = fd_sensitivity(spec, model, plan, rho, int(e), phase, h=h, dT_fixed=dT)
            err = abs(g[e] - fd) / max(abs(fd), 1e-300)
            worst = max(worst, err)
            rows.append((phase, int(e), float(g[e]), float(fd), float(err)))
    return AdjointCheck(spec.objective, worst, len(rows), int(skip.sum()), rows)
