import numpy as np
import pytest
import torch

from pigp.adjoint import (adjoint_energy, adjoint_plan, boundary_adjacent, build_adjoint_problem,
                          element_sensitivities, verify_adjoint, with_alpha_u)
from pigp.fem import FemModel, element_properties, solve_problem
from pigp.grid import build_grid, tag_boundaries
from pigp.neural import DTYPE
from pigp.physics import TorchGeometry, unit_stiffness
from pigp.problem import load_spec, resolve_boundaries


def _setup(name, counts=(9, 5), seed=0, **train):
    spec = load_spec(name)
    if train:
        spec = spec.with_overrides(**train)
    grid = tag_boundaries(build_grid(spec.domain, counts), spec.boundaries)
    plan = resolve_boundaries(spec, grid)
    model = FemModel(grid, spec.materials.nu, spec.materials.plane, order=2)
    rho = np.random.default_rng(seed).dirichlet(np.full(spec.materials.n_phases, 2.0), size=grid.n_elements)
    return spec, grid, plan, model, rho


def test_self_adjoint_flags():
    for name in ("mbb2d", "heatsink2d"):
        adj = build_adjoint_problem(load_spec(name))
        assert adj.self_adjoint
    adj = build_adjoint_problem(load_spec("inverter2d"))
    assert adj.needs_adjoint_displacement and not adj.needs_adjoint_temperature and adj.alpha_u == 10.0
    adj = build_adjoint_problem(load_spec("thermal_actuator2d"))
    assert adj.needs_adjoint_displacement and adj.needs_adjoint_temperature
    iso = build_adjoint_problem(load_spec("thermal_actuator2d").with_overrides(isothermal=True))
    assert iso.isothermal and not iso.needs_adjoint_temperature


def test_inverter_adjoint_load_opposes_output_direction():
    spec, grid, plan, _, _ = _setup("inverter2d")
    aplan = adjoint_plan(build_adjoint_problem(spec), plan)
    assert len(aplan.loads) == 1 and aplan.loads[0].node == plan.out_node
    # output direction (-1, 0), alpha_u = 10: adjoint load (0.1, 0)
    assert np.allclose(aplan.loads[0].force, (0.1, 0.0))
    assert aplan.springs == plan.springs
    assert all(np.all(v == 0) for _, v in aplan.u_fixed)


@pytest.mark.parametrize("name", ["mbb2d", "mbb2d_multimat", "inverter2d", "heatsink2d", "thermal_actuator2d"])
def test_keystone_continuous_vs_finite_difference(name):
    check = verify_adjoint(load_spec(name))
    assert check.n_checked > 0 and check.n_excluded > 0
    assert check.max_rel_err < 1e-3, check.rows[:3]


def test_keystone_isothermal_device():
    check = verify_adjoint(load_spec("thermal_actuator2d"), dT_fixed=100.0)
    assert check.max_rel_err < 1e-3


def test_boundary_adjacent_marks_supports():
    _, grid, plan, _, _ = _setup("mbb2d")
    mask = boundary_adjacent(grid, plan)
    fixed = plan.fixed_dofs(2)[0] // 2
    touching = np.isin(grid.elements, fixed).any(axis=1)
    assert np.all(mask[touching])


def _sens(spec, grid, plan, model, rho, phase, alpha_u=None):
    st = solve_problem(spec, model, plan, element_properties(spec, rho))
    C0 = torch.as_tensor(unit_stiffness(spec.materials.nu, 2))
    src = None if spec.materials.interpolate_source else spec.physics["source"]
    return element_sensitivities(spec.objective, TorchGeometry.build(grid, 2), C0, spec.materials, rho,
                                 spec.materials.penal, phase, source=src, u=st.u, T=st.T, v=st.v, vT=st.vT,
                                 alpha_u=alpha_u or spec.alpha_u, alpha_T=spec.alpha_T,
                                 T_inf=spec.physics["T_inf"])


@pytest.mark.parametrize("name", ["mbb2d", "heatsink2d"])
def test_self_adjoint_sensitivities_non_positive(name):
    spec, grid, plan, model, rho = _setup(name)
    for phase in range(1, spec.materials.n_phases):
        assert np.all(_sens(spec, grid, plan, model, rho, phase) <= 0)


def test_sensitivity_independent_of_alpha_u():
    spec, grid, plan, model, rho = _setup("inverter2d")
    a = _sens(spec, grid, plan, model, rho, 3)
    spec1 = spec.with_overrides(alpha_u=1.0)
    b = _sens(spec1, grid, plan, model, rho, 3, alpha_u=1.0)
    assert np.allclose(a, b, rtol=1e-9, atol=1e-12 * np.abs(a).max())
    assert with_alpha_u(build_adjoint_problem(spec), 1.0).alpha_u == 1.0


def _adjoint_gradient(spec, grid, plan, model, rho, v):
    adj = build_adjoint_problem(spec)
    aplan = adjoint_plan(adj, plan)
    props = {k: torch.as_tensor(val, dtype=DTYPE) for k, val in element_properties(spec, rho).items()}
    st = solve_problem(spec, model, plan, element_properties(spec, rho))
    vt = torch.as_tensor(v, dtype=DTYPE).requires_grad_(True)
    mech, _ = adjoint_energy(adj, aplan, TorchGeometry.build(grid, 2), torch.as_tensor(model.C0), props,
                             v=vt, u=torch.as_tensor(st.u))
    (g,) = torch.autograd.grad(mech.L_M, vt)
    fixed = plan.fixed_dofs(2)[0]
    g = g.reshape(-1).numpy().copy()
    g[fixed] = 0.0
    return g, st


def test_adjoint_energy_stationary_at_oracle_adjoint():
    spec, grid, plan, model, rho = _setup("inverter2d")
    st = solve_problem(spec, model, plan, element_properties(spec, rho))
    g, _ = _adjoint_gradient(spec, grid, plan, model, rho, st.v)
    assert np.abs(g).max() < 1e-10 * max(1.0, np.abs(st.v).max())


def test_spring_on_primary_variant_stationary_at_its_own_solution():
    spec, grid, plan, model, rho = _setup("inverter2d", adjoint_spring_uses_primary=True)
    props = element_properties(spec, rho)
    st = solve_problem(spec, model, plan, props)
    # K v = f_a - sum_s k d (d . u): springs act through the primary field
    K = model.stiffness(props["E"])
    f = np.zeros(model.n_dofs)
    aplan = adjoint_plan(build_adjoint_problem(spec), plan)
    for ld in aplan.loads:
        f[ld.node * 2 + np.arange(2)] += ld.force
    for s in plan.springs:
        d = np.asarray(s.direction)
        f[s.node * 2 + np.arange(2)] -= s.stiffness * d * (st.u[s.node] @ d)
    fixed, _ = plan.fixed_dofs(2)
    v = model.solve(K, f, fixed, np.zeros(len(fixed))).reshape(-1, 2)
    g, _ = _adjoint_gradient(spec, grid, plan, model, rho, v)
    assert np.abs(g).max() < 1e-10 * max(1.0, np.abs(v).max())
    assert not np.allclose(v, st.v)
