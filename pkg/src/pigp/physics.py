"""Energy functionals for elasticity, conduction and thermo-elastic coupling.

All functions take nodal fields and per-element properties as torch tensors
and integrate with whatever quadrature the :class:`TorchGeometry` carries
(one point per element on the training path, 2x2 Gauss in the oracle).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
import torch

from .materials import constitutive_matrix
from .neural import DTYPE
from .shapefn import VOIGT_2D, VOIGT_3D, ElementGeometry, gradient_matrices

OBJECTIVES = ("compliance", "thermal-compliance", "compliant-mechanism", "thermo-mechanical-device")


@dataclass(frozen=True)
class TorchGeometry:
    elements: torch.Tensor  # (n_e, n_s)
    dNdx: torch.Tensor  # (n_e, n_q, n_s, dims)
    N: torch.Tensor  # (n_q, n_s)
    dV: torch.Tensor  # (n_e, n_q)
    n_nodes: int

    @property
    def dims(self) -> int:
        return self.dNdx.shape[-1]

    @property
    def n_elements(self) -> int:
        return self.dNdx.shape[0]

    @property
    def volume_per_element(self) -> torch.Tensor:
        return self.dV.sum(dim=1)

    @classmethod
    def build(cls, grid, order: int = 1) -> "TorchGeometry":
        geo = gradient_matrices(grid.nodes[grid.elements], order)
        return cls.from_numpy(geo, grid.elements, grid.n_nodes)

    @classmethod
    def from_numpy(cls, geo: ElementGeometry, elements: np.ndarray, n_nodes: int) -> "TorchGeometry":
        t = lambda a: torch.as_tensor(a, dtype=DTYPE)  # noqa: E731
        return cls(torch.as_tensor(elements, dtype=torch.long), t(geo.dNdx), t(geo.N), t(geo.dV), n_nodes)


@dataclass(frozen=True)
class PointLoad:
    node: int
    force: tuple[float, ...]


@dataclass(frozen=True)
class Spring:
    node: int
    direction: tuple[float, ...]
    stiffness: float


@dataclass
class EnergyBreakdown:
    strain_energy: object = 0.0
    spring_energy: object = 0.0
    external_work: object = 0.0
    thermal_energy: object = 0.0
    convection_energy: object = 0.0
    source_energy: object = 0.0
    flux_work: object = 0.0

    @property
    def L_M(self):
        return self.strain_energy + self.spring_energy - self.external_work

    @property
    def L_T(self):
        return self.thermal_energy + self.convection_energy - self.source_energy + self.flux_work

    @property
    def stored(self):
        """Quadratic part: strain + spring (mechanical) or thermal + convection."""
        return self.strain_energy + self.spring_energy + self.thermal_energy + self.convection_energy

    def as_floats(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


# ---------------------------------------------------------------- kinematics


def gradient(field: torch.Tensor, geo: TorchGeometry) -> torch.Tensor:
    """Nodal field gradient at every quadrature point.

    Scalar ``(n_nodes,)`` -> ``(n_e, n_q, dims)``;
    vector ``(n_nodes, c)`` -> ``(n_e, n_q, c, dims)``.
    """
    fe = field[geo.elements]
    if field.dim() == 1:
        return torch.einsum("eqsd,es->eqd", geo.dNdx, fe)
    return torch.einsum("eqsd,esc->eqcd", geo.dNdx, fe)


def at_quadrature(field: torch.Tensor, geo: TorchGeometry) -> torch.Tensor:
    """Interpolate a scalar nodal field to quadrature points, (n_e, n_q)."""
    return torch.einsum("qs,es->eq", geo.N, field[geo.elements])


def voigt(grad_u: torch.Tensor) -> torch.Tensor:
    """Engineering-shear Voigt strain from a displacement gradient (..., c, d)."""
    table = VOIGT_2D if grad_u.shape[-1] == 2 else VOIGT_3D
    rows = []
    for pairs in table:
        rows.append(sum(grad_u[..., c, a] for c, a in pairs))
    return torch.stack(rows, dim=-1)


def identity_voigt(dims: int) -> torch.Tensor:
    n = 3 if dims == 2 else 6
    v = torch.zeros(n, dtype=DTYPE)
    v[: dims] = 1.0
    return v


def unit_stiffness(nu: float, dims: int, plane: str = "stress") -> torch.Tensor:
    return torch.as_tensor(constitutive_matrix(1.0, nu, dims, plane), dtype=DTYPE)


def _per_q(prop, geo: TorchGeometry) -> torch.Tensor:
    """Broadcast a per-element (n_e,) or per-point (n_e, n_q) property to (n_e, n_q)."""
    prop = torch.as_tensor(prop, dtype=DTYPE)
    if prop.dim() == 0:
        return prop.expand(geo.n_elements, geo.dV.shape[1])
    if prop.dim() == 1:
        return prop[:, None].expand(-1, geo.dV.shape[1])
    return prop


def mechanical_strain(u, geo, alpha=None, dT=None) -> torch.Tensor:
    eps = voigt(gradient(u, geo))
    if alpha is not None and dT is not None:
        eth = _per_q(alpha, geo) * dT
        eps = eps - eth[..., None] * identity_voigt(geo.dims)
    return eps


def stress(u, E, geo, C0, alpha=None, dT=None) -> torch.Tensor:
    eps = mechanical_strain(u, geo, alpha, dT)
    return _per_q(E, geo)[..., None] * (eps @ C0)


def strain_energy_density_integral(eps_a, eps_b, E, geo, C0) -> torch.Tensor:
    """int E * eps_a^T C0 eps_b dV."""
    inner = torch.einsum("eqi,ij,eqj->eq", eps_a, C0, eps_b)
    return (_per_q(E, geo) * inner * geo.dV).sum()


# ---------------------------------------------------------------- energies


def point_terms(u: torch.Tensor, loads: Sequence[PointLoad], springs: Sequence[Spring]):
    work = u.new_zeros(())
    spring = u.new_zeros(())
    for ld in loads:
        work = work + (u[ld.node] * torch.as_tensor(ld.force, dtype=DTYPE)).sum()
    for sp in springs:
        un = (u[sp.node] * torch.as_tensor(sp.direction, dtype=DTYPE)).sum()
        spring = spring + 0.5 * sp.stiffness * un ** 2
    return spring, work


def mechanical_energy(u, E, geo: TorchGeometry, C0, loads=(), springs=(), body=None) -> EnergyBreakdown:
    """Strain + spring - external work.  ``body`` is an optional (n_nodes, d) nodal force."""
    eps = mechanical_strain(u, geo)
    se = 0.5 * strain_energy_density_integral(eps, eps, E, geo, C0)
    spring, work = point_terms(u, loads, springs)
    if body is not None:
        work = work + (u * body).sum()
    return EnergyBreakdown(strain_energy=se, spring_energy=spring, external_work=work)


def coupled_mechanical_energy(u, E, alpha, dT, geo: TorchGeometry, C0, loads=(), springs=()) -> EnergyBreakdown:
    """Mechanical energy with the thermal strain alpha * dT * I removed."""
    if dT is None or alpha is None:
        return mechanical_energy(u, E, geo, C0, loads, springs)
    eps = mechanical_strain(u, geo, alpha, dT)
    se = 0.5 * strain_energy_density_integral(eps, eps, E, geo, C0)
    spring, work = point_terms(u, loads, springs)
    return EnergyBreakdown(strain_energy=se, spring_energy=spring, external_work=work)


def thermal_energy(T, kappa, geo: TorchGeometry, source=0.0, h_v: float = 0.0, T_inf: float = 0.0,
                   flux: Sequence[tuple[int, float]] = ()) -> EnergyBreakdown:
    """1/2 int k|grad T|^2 + 1/2 int h_v (T - T_inf)^2 - int s T + boundary flux q T.

    ``flux`` is a list of (node, q * boundary weight) pairs.
    """
    gT = gradient(T, geo)
    te = 0.5 * (_per_q(kappa, geo) * (gT * gT).sum(-1) * geo.dV).sum()
    Tq = at_quadrature(T, geo)
    conv = T.new_zeros(())
    if h_v:
        conv = 0.5 * h_v * (((Tq - T_inf) ** 2) * geo.dV).sum()
    src = (_per_q(source, geo) * Tq * geo.dV).sum()
    fw = T.new_zeros(())
    for node, q in flux:
        fw = fw + q * T[node]
    return EnergyBreakdown(thermal_energy=te, convection_energy=conv, source_energy=src, flux_work=fw)


def compliance(u, E, geo, C0) -> torch.Tensor:
    eps = mechanical_strain(u, geo)
    return strain_energy_density_integral(eps, eps, E, geo, C0)


def thermal_compliance(T, kappa, geo) -> torch.Tensor:
    gT = gradient(T, geo)
    return 0.5 * (_per_q(kappa, geo) * (gT * gT).sum(-1) * geo.dV).sum()


def output_displacement(u, node: int, direction) -> torch.Tensor:
    return (u[node] * torch.as_tensor(direction, dtype=DTYPE)).sum()


def objective(kind: str, *, u=None, T=None, E=None, kappa=None, geo=None, C0=None,
              out_node: int | None = None, out_dir=None) -> torch.Tensor:
    """Objective value L_C (a minimization target) for each problem class."""
    if kind == "compliance":
        return compliance(u, E, geo, C0)
    if kind == "thermal-compliance":
        return thermal_compliance(T, kappa, geo)
    if kind in ("compliant-mechanism", "thermo-mechanical-device"):
        if out_node is None:
            raise ValueError(f"{kind} needs an output node")
        return -output_displacement(u, out_node, out_dir)
    raise ValueError(f"unknown objective class {kind!r}; expected one of {OBJECTIVES}")
