import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reachavoid.geometry import HalfspacePolytope
from reachavoid.tightening import (
    OverTightenedError,
    TighteningError,
    UnboundedSetError,
    ValidatedPolytope,
    ZeroSet,
    build_constraint_family,
    compute_eta,
    compute_tube_radius,
    growth_bound_psi,
    is_bounded,
    kappa_u,
    kappa_x,
    polytope_vertices,
    tightening_params,
    validate_terminal_invariance,
)

from .conftest import double_integrator
from .soundness import fuzz_inter_sample, fuzz_tube, inter_sample_violations, random_structured, tube_exceedances


def test_psi_closed_form_and_limit():
    a, dt, z, d = 2.0, 0.3, 1.5, 0.7
    g = math.exp(a * dt) - 1
    assert growth_bound_psi(a, dt, z, d) == pytest.approx(g * z + g / a * d, rel=1e-14)
    assert growth_bound_psi(0.0, dt, z, d) == pytest.approx(dt * d)
    # the a -> 0 limit is continuous
    assert growth_bound_psi(1e-9, dt, z, d) == pytest.approx(dt * d, rel=1e-6)
    with pytest.raises(ValueError):
        growth_bound_psi(-1.0, dt, z, d)


def test_double_integrator_margins():
    sys = double_integrator()
    g = HalfspacePolytope.from_box([-1, -1], [1, 1])
    p = tightening_params(sys, g, 0.1, 2.5, 0.1)
    assert p.kappa_u == pytest.approx(math.sqrt(2))
    assert p.kappa_x == pytest.approx(math.sqrt(2))
    assert p.eta == pytest.approx(0.1 * math.sqrt(2))
    assert p.r == pytest.approx(0.05 * math.sqrt(2))


def test_vertices_of_triangle_and_box():
    tri = HalfspacePolytope(np.array([[-1.0, 0.0], [0.0, -1.0], [1.0, 1.0]]), [0.0, 0.0, 1.0])
    V = polytope_vertices(tri)
    assert sorted(map(tuple, np.round(V, 12))) == [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0)]
    box = HalfspacePolytope.from_box([-1] * 10, [2] * 10)
    assert polytope_vertices(box).shape == (1024, 10)
    assert kappa_x(box) == pytest.approx(math.sqrt(40))


def test_unbounded_set_needs_kappa_override():
    rng = np.random.default_rng(0)
    sys = random_structured(rng)
    half = HalfspacePolytope(np.array([[1.0, 0.0]]), [1.0])
    assert not is_bounded(half)
    with pytest.raises(UnboundedSetError):
        compute_eta(sys, half, None, 0.1)
    eta, kx, _ = compute_eta(sys, half, None, 0.1, kappa_x_override=3.0)
    assert kx == 3.0 and eta > 0


def test_kappa_u_attained_at_vertex():
    B2 = np.array([[1.0, 2.0], [0.0, 1.0]])
    U = HalfspacePolytope.from_box([-1, -1], [1, 1])
    X = np.random.default_rng(1).uniform(-1, 1, (5000, 2))
    assert kappa_u(B2, U) >= np.linalg.norm(X @ B2.T, axis=1).max()


def test_tube_radius_modes():
    A = np.zeros((4, 4))
    A[0, 2] = A[1, 3] = 1
    assert compute_tube_radius(A, 2.5, 0.1, 2) == pytest.approx(0.05 * math.sqrt(2))
    A[2, 0] = 0.0
    A[0, 0] = -0.5
    r = compute_tube_radius(A, 2.5, 0.1, 2)
    assert r == pytest.approx(math.exp(np.linalg.norm(A, 2) * 2.5) * 0.05 * math.sqrt(2))


def test_family_offsets():
    g = HalfspacePolytope(np.array([[3.0, 4.0], [-1.0, 0.0], [0.0, -1.0]]), [5.0, 1.0, 1.0])
    sys = double_integrator()
    p = tightening_params(sys, HalfspacePolytope.from_box([-1, -1], [1, 1]), 0.1, 2.5, 0.1)
    fam = build_constraint_family(g, p)
    np.testing.assert_allclose(fam.g_hat.offsets, g.offsets - g.row_norms * p.eta)
    np.testing.assert_allclose(fam.g_tilde.offsets, g.offsets - g.row_norms * (p.eta + p.r))
    assert isinstance(fam.terminal, ZeroSet)
    same = build_constraint_family(g, p, tilde_equals_hat=True)
    np.testing.assert_array_equal(same.g_tilde.offsets, same.g_hat.offsets)


def test_over_tightening_reports_row():
    sys = double_integrator(5.0)
    g = HalfspacePolytope.from_box([-0.5, -0.5], [0.5, 0.5])
    p = tightening_params(sys, g, 0.5, 2.5, 0.1)
    with pytest.raises(OverTightenedError) as exc:
        build_constraint_family(g, p)
    assert exc.value.index >= 0
    with pytest.raises(TighteningError):
        build_constraint_family(g, p, terminal="box")


def test_terminal_invariance_lp():
    A4 = np.eye(2)
    B2 = 0.1 * np.eye(2)
    term = HalfspacePolytope.from_box([-0.1, -0.1], [0.1, 0.1])
    G = HalfspacePolytope.from_box([-1, -1], [1, 1])
    U = HalfspacePolytope.from_box([-1, -1], [1, 1])
    assert validate_terminal_invariance(term, A4, B2, G, U, 0.05)
    assert not validate_terminal_invariance(term, A4, B2, G, U, 0.2)
    fam = build_constraint_family(G, tightening_params(double_integrator(), G, 0.1, 2.5, 0.1),
                                  ValidatedPolytope(term))
    assert fam.robust_terminal().offsets.max() < 0.1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_inter_sample_margin_is_sound(seed):
    bad, done = fuzz_inter_sample(np.random.default_rng(seed), 400, per_system=200)
    assert done == 400 and bad == 0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_tube_radius_is_sound(seed):
    bad, done = fuzz_tube(np.random.default_rng(seed), 400, per_system=200)
    assert bad == 0


def test_probes_detect_undersized_margins():
    rng = np.random.default_rng(5)
    sys = double_integrator()
    g = HalfspacePolytope.from_box([-1, -1], [1, 1])
    assert inter_sample_violations(sys, g, 0.2, rng, 2000, margin_scale=0.5) > 0
    # decoupled positions: the radius is attained at the cell corners
    A = random_structured(rng, coupled=False, scale=0.5).A_c
    assert tube_exceedances(A, 2, 0.2, 1.0, rng, 2000, radius_scale=0.99) > 0
