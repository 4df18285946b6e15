"""Acceptance gate: one verdict line per criterion (see the terminal summary).

Criteria 5-8 and 10 train networks at desk scale and take minutes each; they
carry the ``slow`` marker (deselect with ``-m "not slow"``).
"""

import json
import time

import numpy as np
import pytest
import torch
from scipy.spatial import cKDTree

from pigp.adjoint import verify_adjoint
from pigp.cli import main
from pigp.fem import FemModel, element_properties, evaluate_design, run_simp_baseline, solve_problem
from pigp.grid import Domain, build_grid, build_grid_family, tag_boundaries
from pigp.neural import learning_rate
from pigp.problem import bundled_problems, load_spec, parse_spec, resolve_boundaries
from pigp.shapefn import gradient_matrices, grid_geometry, reference_nodes, shape_values
from pigp.trainer import Trainer, build_family, scheduled_fraction

# desk-scale network: the default 128-channel encoder is sized for GPU runs
DESK_NETWORK = {"n_f": 32}


def desk_spec(name, coarse, fine, n_g, epochs, network=None, **train):
    raw = load_spec(name).raw
    raw["grid"] = {"coarse": list(coarse), "fine": list(fine), "n_g": n_g}
    raw["network"] = dict(raw.get("network") or {}, **DESK_NETWORK, **(network or {}))
    raw["train"] = dict(raw.get("train") or {}, n_tol=epochs, **train)
    return parse_spec(raw)


def smooth_density(spec):
    """Frozen design: a smooth stiff-phase fraction in [0.15, 0.95], the rest void."""
    Lx, Ly = spec.domain.lengths
    n_ph = spec.materials.n_phases

    def rho(grid):
        x, y = grid.centers.T
        r = 0.55 + 0.4 * np.sin(2 * np.pi * x / Lx) * np.cos(np.pi * y / Ly)
        out = np.zeros((grid.n_elements, n_ph))
        out[:, 0], out[:, -1] = 1 - r, r
        return out

    return rho


# ---------------------------------------------------------------- 1


def test_01_shape_function_exactness(accept):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    pu = 0.0
    for dims in (2, 3):
        xi = rng.uniform(-1, 1, (1000, dims))
        pu = max(pu, np.abs(shape_values(xi).sum(axis=1) - 1).max())
    grad_err = 0.0
    for dims in (2, 3):
        ref = reference_nodes(dims)
        for _ in range(50):
            A = np.eye(dims) + 0.2 * rng.standard_normal((dims, dims))
            coords = (ref @ A.T + rng.standard_normal(dims))[None]
            coords = coords + 0.05 * rng.standard_normal(coords.shape)
            G = rng.standard_normal((dims, dims))
            vals = coords[0] @ G.T + rng.standard_normal(dims)
            for order in (1, 2):
                geo = gradient_matrices(coords, order)
                got = np.einsum("eqsd,sc->eqcd", geo.dNdx, vals)
                grad_err = max(grad_err, np.abs(got - G).max() / np.abs(G).max())
    vol_err = 0.0
    for lengths, counts in (((200, 100), (41, 21)), ((3.0, 2.0, 1.0), (7, 5, 3))):
        g = build_grid(Domain(lengths), counts)
        for order in (1, 2):
            vol_err = max(vol_err, abs(grid_geometry(g, order).dV.sum() / np.prod(lengths) - 1))
    elapsed = time.perf_counter() - t0
    ok = pu < 1e-14 and grad_err < 1e-12 and vol_err < 1e-12 and elapsed < 1.0
    accept(1, ok, f"partition {pu:.1e}, affine gradient {grad_err:.1e}, volume {vol_err:.1e}, {elapsed:.2f} s")
    assert ok


# ---------------------------------------------------------------- 2


def _randomize(net, gen):
    with torch.no_grad():
        for p in net.parameters():
            p.uniform_(-0.5, 0.5, generator=gen)


def test_02_gp_boundary_enforcement(accept):
    t0 = time.perf_counter()
    worst, checked = 0.0, []
    names = [n for n in bundled_problems() if load_spec(n).dims == 2]
    for name in names:
        raw = load_spec(name).raw
        raw["grid"] = {"coarse": [21, 11], "fine": [41, 21], "n_g": 3}
        raw["network"] = dict(raw.get("network") or {}, n_f=8, res=6)
        tr = Trainer(parse_spec(raw), seed=0, threads=1)
        for seed in range(10):
            gen = torch.Generator().manual_seed(seed)
            for field in tr.fields.values():
                _randomize(field.net, gen)
                for g, grid in enumerate(tr.family):
                    vals = field.evaluate(grid).detach().numpy()
                    tree = cKDTree(grid.nodes / np.asarray(grid.domain.lengths))
                    for c, cond in enumerate(field.conditioners):
                        if cond is None:
                            continue
                        dist, idx = tree.query(cond.X[g])
                        assert dist.max() < 1e-12
                        worst = max(worst, np.abs(vals[idx, c] - cond.y[g]).max())
        checked.append(name)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and elapsed < 30
    accept(2, ok, f"max violation {worst:.1e} over {len(checked)} configs x 10 inits, {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------- 3


def _toy_gradient_spec(**train):
    raw = load_spec("inverter2d").raw
    raw["grid"] = {"coarse": [9, 5], "fine": [9, 5], "n_g": 1}
    raw["network"] = dict(raw["network"], n_f=16, width=8, res=1, min_vertices=2)
    raw["train"] = dict(train)
    return parse_spec(raw)


def _fd_errors(tr, nets, n, rng, epoch=5):
    tr.losses(0, epoch)  # fixes the objective scale
    params = [p for net in nets for p in net.parameters()]
    for p in params:
        p.grad = None
    tr.losses(0, epoch)[0].backward()
    flat = [(p, i) for p in params for i in range(p.numel())]
    errs = []
    for k in rng.choice(len(flat), n, replace=False):
        p, i = flat[k]
        v = p.data.view(-1)
        x0 = v[i].item()
        h = 1e-3 * max(1.0, abs(x0))

        def f(d):
            with torch.no_grad():
                v[i] = x0 + d
                out = tr.losses(0, epoch)[1].total
                v[i] = x0
            return out

        fd = (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h)
        ga = p.grad.view(-1)[i].item()
        errs.append(abs(ga - fd) / max(abs(ga), abs(fd), 1e-300))
    return errs


def test_03_gradient_engine(accept):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    # density parameters: every energy keeps its design dependence
    tr = Trainer(_toy_gradient_spec(energy_design_gradient=True), seed=0, threads=1)
    assert tr.rho_net.vertices == (2, 2) and tr.rho_net.width == 8
    errs = _fd_errors(tr, [tr.rho_net], 25, rng)
    # state parameters: densities frozen so the loss is the pure field energy
    spec = _toy_gradient_spec()
    tr = Trainer(spec, seed=0, threads=1, frozen_rho=smooth_density(spec))
    errs += _fd_errors(tr, [tr.fields["u"].net, tr.fields["v"].net], 25, rng)
    elapsed = time.perf_counter() - t0
    worst = max(errs)
    ok = worst < 1e-4 and len(errs) == 50 and elapsed < 60
    accept(3, ok, f"max rel err {worst:.1e} over {len(errs)} parameters, {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------- 4


def test_04_keystone_adjoint(accept):
    t0 = time.perf_counter()
    checks = {
        "compliance": verify_adjoint(load_spec("mbb2d")),
        "mechanism": verify_adjoint(load_spec("inverter2d")),
        "heat": verify_adjoint(load_spec("heatsink2d")),
        "isothermal device": verify_adjoint(load_spec("thermal_actuator2d"), dT_fixed=100.0),
    }
    assert load_spec("inverter2d").alpha_u == 10.0
    elapsed = time.perf_counter() - t0
    worst = max(c.max_rel_err for c in checks.values())
    ok = worst < 1e-3 and all(c.n_checked for c in checks.values()) and elapsed < 300
    detail = ", ".join(f"{k} {c.max_rel_err:.1e}" for k, c in checks.items())
    accept(4, ok, f"{detail}; {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------- 5


@pytest.mark.slow
def test_05_state_solve_cross_check(accept):
    t0 = time.perf_counter()
    # frozen densities need the final penalization; full quadrature avoids hourglass modes
    spec = desk_spec("mbb2d", (41, 21), (41, 21), 1, 3000, network={"res": 20, "u_scale": 10.0},
                     penal_start=3.0, quadrature=2)
    rho = smooth_density(spec)
    tr = Trainer(spec, frozen_rho=rho, seed=0, threads=1)
    tr.run()
    grid = tr.family[0]
    model = FemModel(grid, spec.materials.nu, spec.materials.plane)
    ref = solve_problem(spec, model, resolve_boundaries(spec, grid), element_properties(spec, rho(grid), 3.0)).u
    u = tr.state(0)["u"]
    err = np.linalg.norm(u - ref) / np.linalg.norm(ref)
    elapsed = time.perf_counter() - t0
    ok = err < 0.02 and elapsed < 900
    accept(5, ok, f"relative L2 {err:.4f} after 3000 epochs, {elapsed:.0f} s")
    assert ok


# ---------------------------------------------------------------- 6


def _identity(rec, prefix, stored_keys, work_key):
    stored = sum(rec.get(f"{prefix}.{k}", 0.0) for k in stored_keys)
    work = rec.get(f"{prefix}.{work_key}", 0.0)
    return abs(2 * stored - work) / abs(work)


@pytest.mark.slow
def test_06_equilibrium_identity(accept):
    t0 = time.perf_counter()
    mech = ("strain_energy", "spring_energy")
    cases = {}
    for name, epochs in (("mbb2d", 3000), ("inverter2d", 3000), ("thermal_actuator2d", 3000)):
        spec = desk_spec(name, (41, 21), (41, 21), 1, epochs, network={"res": 20}, penal_start=3.0, quadrature=2)
        tr = Trainer(spec, frozen_rho=smooth_density(spec), seed=0, threads=1)
        tr.run()
        _, _, rec = tr.losses(0, epochs)
        if name == "mbb2d":
            cases["mbb primary"] = _identity(rec, "mech", mech, "external_work")
        elif name == "inverter2d":
            cases["inverter primary"] = _identity(rec, "mech", mech, "external_work")
            cases["inverter adjoint"] = _identity(rec, "mech_adj", mech, "external_work")
        else:
            cases["actuator adjoint"] = _identity(rec, "mech_adj", mech, "external_work")
            cases["actuator adjoint thermal"] = _identity(rec, "therm_adj", ("thermal_energy", "convection_energy"),
                                                          "source_energy")
    elapsed = time.perf_counter() - t0
    worst = max(cases.values())
    ok = worst < 0.05
    accept(6, ok, ", ".join(f"{k} {v:.3f}" for k, v in cases.items()) + f"; {elapsed:.0f} s")
    assert ok


# ---------------------------------------------------------------- 7


@pytest.mark.slow
def test_07_desk_mbb_compliance(accept):
    t0 = time.perf_counter()
    spec = desk_spec("mbb2d", (101, 51), (151, 76), 11, 5000)
    tr = Trainer(spec, seed=0, threads=1)
    res = tr.run()
    elapsed = time.perf_counter() - t0
    design = res.design
    target = spec.constraints["psi_m"] * spec.constraints["M0"]
    mass = res.history[-1]["M"]
    pigp = evaluate_design(design.phases, spec, design.grid)
    grid = tag_boundaries(build_grid(spec.domain, (151, 76)), spec.boundaries)
    simp = run_simp_baseline(spec, grid)
    oracle = evaluate_design(simp.phases, spec, grid)
    ratio = pigp["objective"] / oracle["objective"]
    ok = abs(mass - target) / target < 0.01 and design.gray_total < 0.10 and ratio <= 1.25 and elapsed < 3600
    accept(7, ok, f"mass {mass:.1f}/{target:.0f}, gray {design.gray_total:.3f}, compliance {pigp['objective']:.4f} "
                  f"vs SIMP {oracle['objective']:.4f} (ratio {ratio:.3f}), {elapsed:.0f} s")
    assert ok


# ---------------------------------------------------------------- 8


@pytest.mark.slow
def test_08_cost_only_uses_stiffest(accept):
    t0 = time.perf_counter()
    spec = desk_spec("mbb2d_cost", (101, 51), (151, 76), 11, 5000)
    res = Trainer(spec, seed=0, threads=1).run()
    elapsed = time.perf_counter() - t0
    phases = res.design.phases
    solid = phases > 0
    share = float(np.mean(phases[solid] == 3)) if solid.any() else 0.0
    ok = share >= 0.95 and elapsed < 3600
    accept(8, ok, f"material 3 share of solid cells {share:.3f}, {elapsed:.0f} s")
    assert ok


# ---------------------------------------------------------------- 9


def test_09_curriculum_and_schedule(accept):
    rng = np.random.default_rng(0)
    bad = 0
    for _ in range(1000):
        n_tol = int(rng.integers(1, 20_001))
        n = int(rng.integers(0, n_tol + 1))
        psi_0, psi_l, gamma = rng.uniform(0, 1), rng.uniform(0.01, 1), rng.uniform(0.01, 1)
        ramp = gamma * n_tol
        expect = (psi_l - psi_0) / ramp * n + psi_0 if n <= ramp else psi_l
        if n == ramp:
            expect = psi_l
        bad += scheduled_fraction(n, psi_0, psi_l, gamma, n_tol) != expect
    lr_end = learning_rate(9_999, 10_000)
    ok = bad == 0 and lr_end == 1e-3 * 0.75 ** 4
    accept(9, ok, f"{1000 - bad}/1000 tuples exact, lr endpoint {lr_end!r}")
    assert ok


# ---------------------------------------------------------------- 10


def _box_distance(points, box):
    lo, hi = np.asarray(box, dtype=float)
    return np.linalg.norm(np.maximum(0.0, np.maximum(lo - points, points - hi)), axis=1)


@pytest.mark.slow
def test_10_heat_sink_sanity(accept):
    t0 = time.perf_counter()
    out = {}
    for name in ("heatsink2d", "heatsink2d_single"):
        spec = desk_spec(name, (61, 31), (61, 31), 1, 3000)
        res = Trainer(spec, seed=0, threads=1).run()
        out[name] = (spec, res.design, evaluate_design(res.design.phases, spec, res.design.grid))
    elapsed = time.perf_counter() - t0
    multi, single = out["heatsink2d"][2]["objective"], out["heatsink2d_single"][2]["objective"]
    spec, design, _ = out["heatsink2d"]
    box = next(b.selector["box"] for b in spec.boundaries if b.kind == "dirichlet-temperature")
    dist = _box_distance(design.grid.centers, box)
    near = dist <= np.quantile(dist, 0.25)
    red = design.phases == 3
    frac = float(near[red].mean()) if red.any() else 0.0
    ok = multi < single and frac >= 0.60 and elapsed < 3600
    accept(10, ok, f"thermal compliance multi {multi:.4g} vs single {single:.4g}; "
                   f"red cells in nearest quartile {frac:.3f}; {elapsed:.0f} s")
    assert ok


# ---------------------------------------------------------------- 11


def test_11_determinism(accept, tmp_path, capsys):
    tiny = ["--set", "grid.coarse=[21, 11]", "--set", "grid.fine=[31, 16]", "--set", "grid.n_g=3",
            "--set", "network.n_f=8", "--set", "network.res=6"]
    commands = {
        "run": ["run", "inverter2d", *tiny, "--epochs", "20", "--seed", "3", "--threads", "1", "--no-vtk"],
        "baseline": ["baseline", "mbb2d", "--iterations", "5", "--resolution", "41", "21", "--seed", "3"],
    }
    same = {}
    for label, cmd in commands.items():
        blobs = []
        for k in range(2):
            dest = tmp_path / f"{label}{k}"
            assert main([*cmd, "--out", str(dest)]) == 0
            blobs.append((dest / "history.csv").read_bytes())
        same[label] = blobs[0] == blobs[1] and len(blobs[0]) > 0
    capsys.readouterr()
    ok = all(same.values())
    accept(11, ok, ", ".join(f"{k} history {'identical' if v else 'differs'}" for k, v in same.items()))
    assert ok
