import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pigp.gp_field import ConditioningError, GpField, Kernel, build_conditioner, evaluate_field, thin
from pigp.grid import Domain, build_grid_family
from pigp.neural import DTYPE, Pgcan, vertex_counts


def _family(counts=((21, 11), (41, 21), 3)):
    return build_grid_family(Domain((200, 100)), *counts)


def test_diagonal_is_s2_plus_jitter():
    k = Kernel(0.5, 1.0, 1e-5)
    x = np.random.default_rng(0).random((5, 2))
    assert np.allclose(np.diag(k(x, x)), 1.0 + 1e-5, rtol=0, atol=0)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 500), st.integers(0, 1000))
def test_kernel_symmetric_positive_definite(n, seed):
    x = np.random.default_rng(seed).random((n, 2))
    K = Kernel()(x, x)
    assert np.array_equal(K, K.T)
    assert np.linalg.eigvalsh(K).min() > 0


def test_invalid_kernel_rejected():
    with pytest.raises(ConditioningError):
        Kernel(phi=0.0)
    with pytest.raises(ConditioningError):
        Kernel(jitter=0.0)


def test_single_point_reproduced():
    fam = _family()
    c = build_conditioner(Kernel(), np.array([[0.0, 0.0]]), [3.0], fam)
    m_c = torch.tensor([-7.0], dtype=DTYPE)
    m_q = torch.randn(fam[0].n_nodes, dtype=DTYPE)
    m_q[0] = m_c[0]  # node 0 sits on the conditioning point; the mean net agrees there
    out = evaluate_field(c, m_c, m_q, 0)
    assert abs(out[0].item() - 3.0) < 1e-12


def test_cached_weights_match_direct_solve():
    fam = _family()
    X = fam[1].nodes[fam[1].nodes[:, 0] == 0]
    c = build_conditioner(Kernel(), X, 0.0, fam)
    for g in range(fam.n_g):
        direct = c.direct(g, fam[g].nodes / np.array([200.0, 100.0]))
        assert np.max(np.abs(c.weights(g, "nodes").numpy() - direct)) < 1e-10


def test_constant_mean_matches_closed_form():
    fam = _family()
    X = fam[0].nodes[fam[0].nodes[:, 1] == 0]
    c = build_conditioner(Kernel(), X, 2.0, fam)
    mean = 5.0
    out = evaluate_field(c, torch.full((len(X),), mean, dtype=DTYPE),
                         torch.full((fam[0].n_nodes,), mean, dtype=DTYPE), 0).numpy()
    expected = mean + (2.0 - mean) * c.weights(0, "nodes").numpy().sum(axis=0)
    assert np.allclose(out, expected, atol=1e-12)


def test_zero_mean_zero_prescription_gives_zero_correction():
    fam = _family()
    X = fam[0].nodes[:3]
    c = build_conditioner(Kernel(), X, 0.0, fam)
    out = evaluate_field(c, torch.zeros(3, dtype=DTYPE), torch.zeros(fam[0].n_nodes, dtype=DTYPE))
    assert torch.all(out == 0)


def test_no_conditioner_passes_mean_through():
    m = torch.randn(7, dtype=DTYPE)
    assert evaluate_field(None, None, m) is m


def test_duplicate_points_rejected():
    fam = _family()
    with pytest.raises(ConditioningError):
        build_conditioner(Kernel(), np.zeros((2, 2)), [0.0, 1.0], fam)


def test_thin_keeps_endpoints_and_caps():
    idx = np.arange(1000)
    t = thin(idx, 600)
    assert len(t) <= 600 and t[0] == 0 and t[-1] == 999
    assert np.array_equal(thin(idx[:10], 600), idx[:10])


@pytest.mark.parametrize("seed", range(10))
def test_gp_field_reproduces_673_on_left_edge(seed):
    fam = _family()
    X = {g: fam[g].nodes[fam[g].nodes[:, 0] == 0] for g in range(fam.n_g)}
    y = {g: np.full(len(X[g]), 673.0) for g in range(fam.n_g)}
    c = build_conditioner(Kernel(), X, y, fam)
    gen = torch.Generator().manual_seed(seed)
    net = Pgcan(2, 1, vertex_counts((200, 100), 8), n_f=8, out_transform="scaled", scale=100.0, generator=gen)
    field = GpField("T", net, [c], (200, 100))
    for g in range(fam.n_g):
        T = field.evaluate(fam[g])[:, 0].detach().numpy()
        edge = fam[g].nodes[:, 0] == 0
        assert np.max(np.abs(T[edge] - 673.0)) < 1e-6


def test_off_grid_evaluation_matches_cached():
    fam = _family()
    X = fam[0].nodes[fam[0].nodes[:, 0] == 0]
    c = build_conditioner(Kernel(), X, 1.0, fam)
    net = Pgcan(2, 1, (6, 4), n_f=4, generator=torch.Generator().manual_seed(0))
    field = GpField("T", net, [c], (200, 100))
    a = field.evaluate(fam[2]).detach().numpy()
    b = field.evaluate_points(fam[2].nodes, 2).detach().numpy()
    assert np.allclose(a, b, atol=1e-10)
