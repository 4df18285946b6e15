"""Penalized multi-material interpolation, constitutive matrices, mass and cost."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

PROPS = ("E", "kappa", "alpha", "s")


@dataclass(frozen=True)
class MaterialPhase:
    name: str
    E: float
    kappa: float = 0.0
    alpha: float = 0.0
    s: float = 0.0
    rho_bar: float = 0.0
    p_bar: float = 0.0

    def __post_init__(self):
        if self.E < 0 or self.kappa < 0:
            raise ValueError(f"phase {self.name}: E and kappa must be non-negative")


@dataclass(frozen=True)
class MaterialSet:
    phases: tuple[MaterialPhase, ...]
    nu: float = 0.31
    penal: float = 3.0
    plane: str = "stress"
    interpolate_source: bool = True

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))
        if len(self.phases) < 2:
            raise ValueError("need a void phase and at least one material")
        if self.penal < 1:
            raise ValueError("penalization exponent must be >= 1")
        if not 0 <= self.nu < 0.5:
            raise ValueError(f"Poisson ratio {self.nu} outside [0, 0.5)")
        if self.plane not in ("stress", "strain"):
            raise ValueError(f"unknown 2D assumption {self.plane!r}")

    @property
    def n_phases(self) -> int:
        return len(self.phases)

    @property
    def n_materials(self) -> int:
        return len(self.phases) - 1

    def column(self, prop: str) -> np.ndarray:
        return np.array([getattr(p, prop) for p in self.phases], dtype=float)

    def with_penal(self, p: float) -> "MaterialSet":
        return MaterialSet(self.phases, self.nu, p, self.plane, self.interpolate_source)

    def subset(self, names: Sequence[str]) -> "MaterialSet":
        keep = [self.phases[0]] + [ph for ph in self.phases[1:] if ph.name in names]
        return MaterialSet(tuple(keep), self.nu, self.penal, self.plane, self.interpolate_source)


# Artificial materials used by the 2D/3D benchmarks (void first).
STANDARD_PHASES = (
    MaterialPhase("void", E=1e-5, kappa=1e-5, rho_bar=0.0, p_bar=0.0),
    MaterialPhase("m1", E=0.4, kappa=0.2, rho_bar=0.5, p_bar=1.6),
    MaterialPhase("m2", E=0.6, kappa=0.5, rho_bar=0.7, p_bar=1.2),
    MaterialPhase("m3", E=1.0, kappa=1.0, rho_bar=1.0, p_bar=1.0),
)


def interpolate(mats: MaterialSet, rho, penal: float | None = None) -> dict:
    """Effective E, kappa, alpha, s = sum_i prop_i * rho_i**p.

    ``rho`` has the phase index last; works for numpy arrays and torch tensors.
    """
    p = mats.penal if penal is None else penal
    is_torch = isinstance(rho, torch.Tensor)
    powered = rho.clamp_min(0.0) ** p if is_torch else np.clip(np.asarray(rho, dtype=float), 0.0, None) ** p
    out = {}
    for prop in PROPS:
        col = mats.column(prop)
        if is_torch:
            col = torch.as_tensor(col, dtype=rho.dtype)
        out[prop] = powered @ col
    return out


def constitutive_matrix(E, nu: float, dims: int = 2, plane: str = "stress") -> np.ndarray:
    """Isotropic Voigt stiffness with engineering shear; broadcasts over E."""
    E = np.asarray(E, dtype=float)
    if dims == 2:
        if plane == "stress":
            base = np.array([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]]) / (1 - nu ** 2)
        else:
            f = 1.0 / ((1 + nu) * (1 - 2 * nu))
            base = f * np.array([[1 - nu, nu, 0], [nu, 1 - nu, 0], [0, 0, (1 - 2 * nu) / 2]])
    else:
        lam = nu / ((1 + nu) * (1 - 2 * nu))
        mu = 1 / (2 * (1 + nu))
        base = np.zeros((6, 6))
        base[:3, :3] = lam
        base[:3, :3] += 2 * mu * np.eye(3)
        base[3:, 3:] = mu * np.eye(3)
    return E[..., None, None] * base


def thermal_modulus(nu: float, dims: int = 2, plane: str = "stress") -> float:
    """C : I per unit E, i.e. the stress from a unit isotropic thermal strain."""
    C = constitutive_matrix(1.0, nu, dims, plane)
    n = 2 if dims == 2 else 3
    return float(C[0, :n].sum())


@dataclass
class MassCost:
    M: float
    P: float
    C_M: float
    C_P: float


def mass_and_cost(rho, dV, mats: MaterialSet, psi_m: float = 0.0, M0: float = 0.0,
                  psi_p: float = 0.0, P0: float = 0.0):
    """Linear mass/cost integrals over element centers.

    ``rho`` is (n_e, n_phases), ``dV`` the per-element quadrature volume.
    Returns a :class:`MassCost` (numpy input) or a tuple of tensors (torch input).
    """
    if isinstance(rho, torch.Tensor):
        dV = torch.as_tensor(dV, dtype=rho.dtype)
        rb = torch.as_tensor(mats.column("rho_bar"), dtype=rho.dtype)
        pb = torch.as_tensor(mats.column("p_bar"), dtype=rho.dtype)
        M = (rho @ rb * dV).sum()
        P = (rho @ pb * dV).sum()
        return M, P, M - psi_m * M0, P - psi_p * P0
    rho = np.asarray(rho, dtype=float)
    M = float(np.sum(rho @ mats.column("rho_bar") * dV))
    P = float(np.sum(rho @ mats.column("p_bar") * dV))
    return MassCost(M, P, M - psi_m * M0, P - psi_p * P0)


def reference_mass(volume: float, mats: MaterialSet) -> float:
    return volume * float(mats.column("rho_bar").max())


def reference_cost(volume: float, mats: MaterialSet) -> float:
    return volume * float(mats.column("p_bar").max())
