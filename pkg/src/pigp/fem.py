"""Independent Q4/H8 finite-element oracle and a SIMP/OC baseline.

Uses full 2x2(x2) Gauss integration and scipy sparse direct solves.  The
oracle shares grids and boundary plans with the PIGP path but none of its
integration code.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .materials import MaterialSet, constitutive_matrix, interpolate, mass_and_cost
from .problem import BoundaryPlan, ProblemSpec, resolve_boundaries
from .shapefn import gradient_matrices

log = logging.getLogger(__name__)


class SingularSystem(RuntimeError):
    pass


class BisectionError(RuntimeError):
    pass


@dataclass
class FemModel:
    """Element operators for one grid, computed once.

    Unit-property element matrices: ``Ke0`` (elastic, E=1), ``KT0``
    (conduction, kappa=1), ``Me0`` (consistent mass, for convection),
    ``Fe0`` (int N dV) and ``Ge0`` (thermal-strain load per E*alpha*dT).
    """

    grid: object
    nu: float = 0.31
    plane: str = "stress"
    order: int = 2
    Ke0: np.ndarray = field(init=False, repr=False)
    KT0: np.ndarray = field(init=False, repr=False)
    Me0: np.ndarray = field(init=False, repr=False)
    Fe0: np.ndarray = field(init=False, repr=False)
    Ge0: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        g = self.grid
        self.dims = g.dims
        self.n_nodes = g.n_nodes
        self.n_dofs = g.n_nodes * self.dims
        geo = gradient_matrices(g.nodes[g.elements], self.order)
        self.geo = geo
        C0 = constitutive_matrix(1.0, self.nu, self.dims, self.plane)
        self.C0 = C0
        B = geo.B_u
        dV = geo.dV
        m = np.zeros(C0.shape[0])
        m[: self.dims] = 1.0
        self.Ke0 = np.einsum("eqvi,vw,eqwj,eq->eij", B, C0, B, dV, optimize=True)
        self.KT0 = np.einsum("eqsd,eqtd,eq->est", geo.dNdx, geo.dNdx, dV, optimize=True)
        self.Me0 = np.einsum("qs,qt,eq->est", geo.N, geo.N, dV, optimize=True)
        self.Fe0 = np.einsum("qs,eq->es", geo.N, dV)
        self.Ge0 = np.einsum("eqvi,v,qs,eq->eis", B, C0 @ m, geo.N, dV, optimize=True)
        el = g.elements
        self.edof = (el[:, :, None] * self.dims + np.arange(self.dims)).reshape(len(el), -1)
        self._rows_u = np.repeat(self.edof, self.edof.shape[1], axis=1).ravel()
        self._cols_u = np.tile(self.edof, (1, self.edof.shape[1])).ravel()
        self._rows_T = np.repeat(el, el.shape[1], axis=1).ravel()
        self._cols_T = np.tile(el, (1, el.shape[1])).ravel()

    @property
    def n_elements(self) -> int:
        return self.grid.n_elements

    # ------------------------------------------------------------ assembly

    def stiffness(self, E: np.ndarray, springs=()) -> sp.csr_matrix:
        vals = (np.asarray(E, dtype=float)[:, None, None] * self.Ke0).ravel()
        K = sp.coo_matrix((vals, (self._rows_u, self._cols_u)), shape=(self.n_dofs, self.n_dofs)).tocsr()
        if springs:
            K = K + self.spring_matrix(springs)
        return K

    def spring_matrix(self, springs) -> sp.csr_matrix:
        rows, cols, vals = [], [], []
        for s in springs:
            d = np.asarray(s.direction, dtype=float)
            dofs = s.node * self.dims + np.arange(self.dims)
            blk = s.stiffness * np.outer(d, d)
            rows.extend(np.repeat(dofs, self.dims))
            cols.extend(np.tile(dofs, self.dims))
            vals.extend(blk.ravel())
        return sp.coo_matrix((vals, (rows, cols)), shape=(self.n_dofs, self.n_dofs)).tocsr()

    def conductivity(self, kappa: np.ndarray, h_v: float = 0.0) -> sp.csr_matrix:
        Ke = np.asarray(kappa, dtype=float)[:, None, None] * self.KT0
        if h_v:
            Ke = Ke + h_v * self.Me0
        return sp.coo_matrix((Ke.ravel(), (self._rows_T, self._cols_T)), shape=(self.n_nodes, self.n_nodes)).tocsr()

    def thermal_load(self, E: np.ndarray, alpha: np.ndarray, dT: np.ndarray) -> np.ndarray:
        fe = np.einsum("e,eis,es->ei", np.asarray(E) * np.asarray(alpha), self.Ge0, dT[self.grid.elements])
        f = np.zeros(self.n_dofs)
        np.add.at(f, self.edof, fe)
        return f

    def thermal_load_adjoint(self, E: np.ndarray, alpha: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Transpose of :meth:`thermal_load`: nodal int N sigma(v):alpha dV."""
        ve = v.reshape(-1)[self.edof]
        fe = np.einsum("e,eis,ei->es", np.asarray(E) * np.asarray(alpha), self.Ge0, ve)
        f = np.zeros(self.n_nodes)
        np.add.at(f, self.grid.elements, fe)
        return f

    def source_load(self, s) -> np.ndarray:
        s = np.broadcast_to(np.asarray(s, dtype=float), (self.n_elements,))
        f = np.zeros(self.n_nodes)
        np.add.at(f, self.grid.elements, s[:, None] * self.Fe0)
        return f

    # ------------------------------------------------------------ solves

    def solve(self, K: sp.csr_matrix, f: np.ndarray, fixed: np.ndarray, values: np.ndarray,
              tol: float = 1e-9, refine: int = 3) -> np.ndarray:
        """Direct solve with Dirichlet elimination and a residual gate."""
        n = K.shape[0]
        fixed = np.asarray(fixed, dtype=int)
        free = np.setdiff1d(np.arange(n), fixed)
        x = np.zeros(n)
        x[fixed] = values
        rhs = f[free] - K[free][:, fixed] @ x[fixed]
        Kff = K[free][:, free].tocsc()
        try:
            lu = spla.splu(Kff)
            xf = lu.solve(rhs)
        except RuntimeError as exc:
            raise SingularSystem(f"singular system ({len(free)} free dofs): {exc}") from exc
        if not np.all(np.isfinite(xf)):
            raise SingularSystem("solution not finite; rigid-body modes remain after constraints")
        scale = max(np.linalg.norm(rhs), np.linalg.norm(Kff @ xf), 1e-300)
        # mixed-precision iterative refinement: residuals in extended precision
        # recover accuracy lost to high stiffness contrast
        K_ext, b_ext = Kff.astype(np.longdouble), rhs.astype(np.longdouble)
        x_ext = xf.astype(np.longdouble)
        r = b_ext - K_ext @ x_ext
        for _ in range(refine):
            if np.linalg.norm(r.astype(float)) <= tol * scale:
                break
            x_ext = x_ext + lu.solve(r.astype(float))
            r = b_ext - K_ext @ x_ext
        # gate the refined solution; rounding it to double can add up to eps*|K||x|
        res = float(np.linalg.norm(r.astype(float))) / scale
        xf = x_ext.astype(float)
        if res > tol:
            diag = _nullspace_hint(Kff)
            raise SingularSystem(f"residual {res:.2e} exceeds {tol:.0e}; {diag}")
        x[free] = xf
        return x

    def solve_elastic(self, E, plan: BoundaryPlan, alpha=None, dT=None, loads=None, springs=None,
                      body: np.ndarray | None = None) -> np.ndarray:
        springs = plan.springs if springs is None else springs
        loads = plan.loads if loads is None else loads
        K = self.stiffness(E, springs)
        f = np.zeros(self.n_dofs)
        for ld in loads:
            f[ld.node * self.dims + np.arange(self.dims)] += ld.force
        if alpha is not None and dT is not None:
            f += self.thermal_load(E, alpha, dT)
        if body is not None:
            f += body.reshape(-1)
        fixed, vals = plan.fixed_dofs(self.dims)
        return self.solve(K, f, fixed, vals).reshape(-1, self.dims)

    def solve_thermal(self, kappa, plan: BoundaryPlan, source=0.0, h_v: float = 0.0, T_inf: float = 0.0,
                      rhs: np.ndarray | None = None, homogeneous: bool = False) -> np.ndarray:
        K = self.conductivity(kappa, h_v)
        f = self.source_load(source)
        if h_v:
            f = f + h_v * T_inf * self.source_load(1.0)
        for node, q in plan.flux:
            f[node] -= q
        if rhs is not None:
            f = rhs
        if plan.T_fixed is None:
            fixed, vals = np.zeros(0, dtype=int), np.zeros(0)
        else:
            fixed, vals = plan.T_fixed
            if homogeneous:
                vals = np.zeros_like(vals)
        return self.solve(K, f, fixed, vals)

    # ------------------------------------------------------------ functionals

    def compliance(self, E, u: np.ndarray) -> float:
        ue = u.reshape(-1)[self.edof]
        return float(np.einsum("e,ei,eij,ej->", np.asarray(E), ue, self.Ke0, ue))

    def thermal_compliance(self, kappa, T: np.ndarray) -> float:
        Te = T[self.grid.elements]
        return 0.5 * float(np.einsum("e,ei,eij,ej->", np.asarray(kappa), Te, self.KT0, Te))


def _nullspace_hint(K) -> str:
    d = K.diagonal()
    zero = np.flatnonzero(np.abs(d) < 1e-14 * max(np.abs(d).max(), 1e-300))
    if len(zero):
        return f"{len(zero)} dofs have zero stiffness (first: {zero[:5].tolist()})"
    return "check supports for unconstrained rigid-body modes"


# ---------------------------------------------------------------- problem-level


@dataclass
class OracleStates:
    u: np.ndarray | None = None
    T: np.ndarray | None = None
    v: np.ndarray | None = None
    vT: np.ndarray | None = None
    objective: float = float("nan")


def element_properties(spec: ProblemSpec, rho: np.ndarray, penal: float | None = None,
                       mats: MaterialSet | None = None) -> dict:
    mats = mats or spec.materials
    props = interpolate(mats, rho, penal)
    if not mats.interpolate_source:
        props["s"] = np.full(len(rho), float(spec.physics["source"]))
    return props


def solve_problem(spec: ProblemSpec, model: FemModel, plan: BoundaryPlan, props: dict,
                  adjoint: bool = True, dT_fixed: np.ndarray | None = None) -> OracleStates:
    """Primary (and, when needed, adjoint) states plus the objective value.

    ``dT_fixed`` supplies a design-independent temperature change for
    isothermal-expansion problems instead of solving for T.
    """
    kind = spec.objective
    ph = spec.physics
    st = OracleStates()
    a_u, a_T = spec.alpha_u, spec.alpha_T
    if kind == "compliance":
        st.u = model.solve_elastic(props["E"], plan)
        st.objective = model.compliance(props["E"], st.u)
        return st
    if kind == "thermal-compliance":
        st.T = model.solve_thermal(props["kappa"], plan, props["s"], ph["h_v"], ph["T_inf"])
        st.objective = model.thermal_compliance(props["kappa"], st.T)
        return st
    out = np.zeros(model.n_dofs)
    out[plan.out_node * model.dims + np.arange(model.dims)] = plan.out_dir
    if kind == "compliant-mechanism":
        st.u = model.solve_elastic(props["E"], plan)
        st.objective = -float(out @ st.u.reshape(-1))
        if adjoint:
            st.v = _adjoint_displacement(model, props["E"], plan, out, a_u)
        return st
    # thermo-mechanical device
    if dT_fixed is not None:
        dT = dT_fixed
        st.T = dT + ph["T_inf"]
    else:
        st.T = model.solve_thermal(props["kappa"], plan, props["s"], ph["h_v"], ph["T_inf"])
        dT = st.T - ph["T_inf"]
    st.u = model.solve_elastic(props["E"], plan, props["alpha"], dT)
    st.objective = -float(out @ st.u.reshape(-1))
    if adjoint:
        st.v = _adjoint_displacement(model, props["E"], plan, out, a_u)
        if dT_fixed is None:
            rhs = (a_u / a_T) * model.thermal_load_adjoint(props["E"], props["alpha"], st.v)
            st.vT = model.solve_thermal(props["kappa"], plan, h_v=ph["h_v"], rhs=rhs, homogeneous=True)
    return st


def _adjoint_displacement(model: FemModel, E, plan: BoundaryPlan, out: np.ndarray, a_u: float) -> np.ndarray:
    # K v = -(1/alpha_u) e_n at the output node, springs kept, homogeneous supports
    K = model.stiffness(E, plan.springs)
    fixed, _ = plan.fixed_dofs(model.dims)
    return model.solve(K, -out / a_u, fixed, np.zeros(len(fixed))).reshape(-1, model.dims)


def oracle_objective(spec: ProblemSpec, model: FemModel, plan: BoundaryPlan, rho: np.ndarray,
                     penal: float | None = None, dT_fixed=None) -> float:
    props = element_properties(spec, rho, penal)
    return solve_problem(spec, model, plan, props, adjoint=False, dT_fixed=dT_fixed).objective


def fd_sensitivity(spec: ProblemSpec, model: FemModel, plan: BoundaryPlan, rho: np.ndarray, element: int,
                   phase: int, h: float = 1e-4, penal: float | None = None, dT_fixed=None) -> float:
    """Central difference of the oracle objective w.r.t. rho[element, phase]."""
    step = h * max(1.0, abs(rho[element, phase]))
    plus, minus = rho.copy(), rho.copy()
    plus[element, phase] += step
    minus[element, phase] -= step
    jp = oracle_objective(spec, model, plan, plus, penal, dT_fixed)
    jm = oracle_objective(spec, model, plan, minus, penal, dT_fixed)
    return (jp - jm) / (2 * step)


# ---------------------------------------------------------------- design evaluation


def resample_design(values: np.ndarray, src_grid, dst_grid) -> np.ndarray:
    """Nearest-center transfer of per-element data between grids."""
    if src_grid.n_elements == dst_grid.n_elements and np.allclose(src_grid.centers, dst_grid.centers):
        return np.asarray(values).copy()
    _, idx = cKDTree(src_grid.centers).query(dst_grid.centers)
    return np.asarray(values)[idx]


def _solid_connects(grid, solid: np.ndarray, targets: np.ndarray, anchors: np.ndarray) -> bool:
    """True if some solid-element path links a target node to an anchor node."""
    if not solid.any() or len(targets) == 0:
        return False
    el = grid.elements[solid]
    n_e, n_s = el.shape
    # bipartite element-node graph restricted to solid elements
    rows = np.repeat(np.arange(n_e), n_s)
    A = sp.coo_matrix((np.ones(n_e * n_s), (rows, el.ravel() + n_e)), shape=(n_e + grid.n_nodes,) * 2)
    _, lab = connected_components(A + A.T, directed=False)
    touched = np.zeros(grid.n_nodes, dtype=bool)
    touched[el.ravel()] = True
    t = {lab[n + n_e] for n in targets if touched[n]}
    a = {lab[n + n_e] for n in anchors if touched[n]}
    return bool(t & a) if anchors.size else bool(t)


def evaluate_design(phases: np.ndarray, spec: ProblemSpec, grid, model: FemModel | None = None) -> dict:
    """FEM analysis of a binarized design (phase index per element of ``grid``)."""
    phases = np.asarray(phases, dtype=int)
    n_ph = spec.materials.n_phases
    if phases.shape != (grid.n_elements,) or phases.min() < 0 or phases.max() >= n_ph:
        raise ValueError("phase field does not match the grid or the material set")
    model = model or FemModel(grid, spec.materials.nu, spec.materials.plane)
    plan = resolve_boundaries(spec, grid)
    rho = np.eye(n_ph)[phases]
    dV = model.geo.dV.sum(axis=1)
    c = spec.constraints
    mc = mass_and_cost(rho, dV, spec.materials, c["psi_m"] or 0.0, c["M0"] or 0.0, c["psi_p"] or 0.0, c["P0"] or 0.0)
    result = {"mass": mc.M, "cost": mc.P, "C_M": mc.C_M if c["psi_m"] is not None else None,
              "C_P": mc.C_P if c["psi_p"] is not None else None, "disconnected": False}

    solid = phases > 0
    if spec.objective == "thermal-compliance":
        targets = np.arange(grid.n_nodes)
        anchors = plan.T_fixed[0] if plan.T_fixed is not None else np.zeros(0, dtype=int)
    else:
        pts = [ld.node for ld in plan.loads] + [s.node for s in plan.springs]
        if plan.out_node is not None:
            pts.append(plan.out_node)
        if spec.objective == "thermo-mechanical-device" and plan.T_fixed is not None:
            pts.extend(plan.T_fixed[0].tolist())
        targets = np.array(sorted(set(pts)), dtype=int)
        anchors = np.concatenate([n for n, _ in plan.u_fixed]) if plan.u_fixed else np.zeros(0, dtype=int)
    if not _solid_connects(grid, solid, targets, anchors):
        result.update(objective=float("inf"), disconnected=True,
                      diagnosis="no solid path between loads and supports")
        return result
    props = element_properties(spec, rho, penal=1.0)
    st = solve_problem(spec, model, plan, props, adjoint=False)
    result["objective"] = st.objective
    if st.u is not None and plan.out_node is not None:
        result["u_out"] = float(np.dot(st.u[plan.out_node], plan.out_dir))
    return result


# ---------------------------------------------------------------- SIMP baseline


def hat_filter(grid, radius: float) -> sp.csr_matrix:
    """Row-normalized linear hat filter; ``radius`` in element-size units."""
    h = np.asarray(grid.spacing)
    c = grid.centers / h
    tree = cKDTree(c)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    n = grid.n_elements
    i = np.concatenate([pairs[:, 0], pairs[:, 1], np.arange(n)])
    j = np.concatenate([pairs[:, 1], pairs[:, 0], np.arange(n)])
    w = np.maximum(0.0, radius - np.linalg.norm(c[i] - c[j], axis=1))
    H = sp.coo_matrix((w, (i, j)), shape=(n, n)).tocsr()
    return sp.diags(1.0 / np.asarray(H.sum(axis=1)).ravel()) @ H


def ordered_knots(mats: MaterialSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalized density knots and the E/kappa values at each (void first)."""
    rb = mats.column("rho_bar")
    order = np.argsort(rb)
    x = rb[order] / rb.max()
    return x, mats.column("E")[order], mats.column("kappa")[order]


def ordered_property(x: np.ndarray, knots: np.ndarray, values: np.ndarray, p: float):
    """Piecewise power law through (knots, values); returns value and d/dx."""
    x = np.asarray(x, dtype=float)
    k = np.clip(np.searchsorted(knots, x, side="right") - 1, 0, len(knots) - 2)
    x0, x1 = knots[k], knots[k + 1]
    v0, v1 = values[k], values[k + 1]
    a = (v1 - v0) / (x1 ** p - x0 ** p)
    return v0 + a * (x ** p - x0 ** p), a * p * x ** (p - 1)


@dataclass
class SimpResult:
    x: np.ndarray
    history: list
    phases: np.ndarray
    objective: float


def run_simp_baseline(spec: ProblemSpec, grid, iterations: int | None = None) -> SimpResult:
    """Nested FEM -> sensitivity -> density filter -> OC loop."""
    cfg = spec.simp
    iterations = iterations or cfg["iterations"]
    if spec.objective == "thermo-mechanical-device":
        raise ValueError("the SIMP baseline covers compliance, thermal compliance and mechanisms only")
    mats = spec.materials
    model = FemModel(grid, mats.nu, mats.plane)
    plan = resolve_boundaries(spec, grid)
    H = hat_filter(grid, cfg["filter_radius"])
    dV = model.geo.dV.sum(axis=1)
    knots, Ek, kk = ordered_knots(mats)
    rb_max = mats.column("rho_bar").max()
    c = spec.constraints
    if c["psi_m"] is None:
        raise ValueError("the SIMP baseline needs a mass constraint")
    target = c["psi_m"] * c["M0"] / rb_max  # volume of normalized density
    x = np.full(grid.n_elements, target / dV.sum())
    p, move, xmin = cfg["penal"], cfg["move"], cfg["rho_min"]
    history = []
    a_u = spec.alpha_u
    for it in range(iterations):
        xf = H @ x
        if spec.objective == "thermal-compliance":
            kap, dk = ordered_property(xf, knots, kk, p)
            T = model.solve_thermal(kap, plan, spec.physics["source"], spec.physics["h_v"], spec.physics["T_inf"])
            Te = T[grid.elements]
            obj = model.thermal_compliance(kap, T)
            dc = -0.5 * dk * np.einsum("ei,eij,ej->e", Te, model.KT0, Te)
        else:
            E, dE = ordered_property(xf, knots, Ek, p)
            u = model.solve_elastic(E, plan)
            ue = u.reshape(-1)[model.edof]
            if spec.objective == "compliance":
                obj = model.compliance(E, u)
                dc = -dE * np.einsum("ei,eij,ej->e", ue, model.Ke0, ue)
            else:
                out = np.zeros(model.n_dofs)
                out[plan.out_node * model.dims + np.arange(model.dims)] = plan.out_dir
                obj = -float(out @ u.reshape(-1))
                v = _adjoint_displacement(model, E, plan, out, a_u)
                ve = v.reshape(-1)[model.edof]
                dc = -a_u * dE * np.einsum("ei,eij,ej->e", ue, model.Ke0, ve)
        dc = H.T @ dc
        dv = H.T @ dV
        x = _oc_update(x, dc, dv, H, dV, target, move, xmin, eta=0.5 if spec.objective != "compliant-mechanism" else 0.3)
        history.append({"iteration": it, "objective": float(obj), "volume": float((H @ x) @ dV)})
    xf = H @ x
    phases = np.searchsorted(0.5 * (knots[1:] + knots[:-1]), xf)
    return SimpResult(xf, history, phases, history[-1]["objective"] if history else float("nan"))


def _oc_update(x, dc, dv, H, dV, target, move, xmin, eta=0.5, tol=1e-9):
    lo, hi = 1e-30, 1e30
    dc = np.minimum(dc, -1e-30)  # OC needs descent-signed sensitivities

    def trial(lam):
        xn = x * (-dc / (lam * dv)) ** eta
        return np.clip(xn, np.maximum(xmin, x - move), np.minimum(1.0, x + move))

    f_lo = (H @ trial(lo)) @ dV - target
    f_hi = (H @ trial(hi)) @ dV - target
    if f_lo < 0 or f_hi > 0:
        raise BisectionError(f"OC bracket [{lo:.1e}, {hi:.1e}] gives residuals [{f_lo:.3e}, {f_hi:.3e}]")
    for _ in range(400):
        mid = np.sqrt(lo * hi)
        r = (H @ trial(mid)) @ dV - target
        if abs(r) <= tol * target:
            break
        if r > 0:
            lo = mid
        else:
            hi = mid
    return trial(mid)
