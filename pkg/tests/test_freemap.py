import numpy as np
import pytest

from periso.errors import ConfigError
from periso.fields import GridSpec, sym_size
from periso.freemap import (
    ambient_dimension,
    generic_projection_reduce,
    initial_dimension,
    initial_embedding,
    min_perturbation_dimension,
    projection_rejects_in_span_direction,
    veronese_lift,
    veronese_point,
    whitney_torus,
)
from periso.lattice import Lattice
from periso.maps import freeness_certificate, relative_min_singular_values
from periso.metric import flat_metric, induced_metric, shortness_defect


def test_whitney_circle_at_zero():
    lat = Lattice.identity(1)
    g = GridSpec(lat, (16,))
    w = whitney_torus(lat, g)
    assert np.allclose(w.periodic.flat[0], [1.0, 0.0])


def test_whitney_torus_exact_trig_values():
    lat = Lattice.identity(2)
    g = GridSpec(lat, (8, 8))
    w = whitney_torus(lat, g)
    # t = (1/4, 1/2) is grid point (2, 4) at resolution 8
    val = w.periodic.samples[2, 4]
    assert np.allclose(val, [0.0, 1.0, -1.0, 0.0], atol=1e-15)


def test_whitney_torus_injective_on_grid():
    # Oracle: all-pairs separation at resolution 32^2.
    lat = Lattice.identity(2)
    g = GridSpec(lat, (32, 32))
    w = whitney_torus(lat, g)
    pts = w.periodic.flat
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    assert np.sqrt(d2.min()) > 0.1


def test_veronese_point_examples():
    assert np.allclose(veronese_point(np.array([1.0, 2.0])), [1, 2, 1, 2, 4])
    assert np.allclose(veronese_point(np.zeros(3)), np.zeros(3 + 6))


def test_veronese_lift_second_derivatives_bounded_below():
    lat = Lattice.identity(2)
    g = GridSpec(lat, (16, 16))
    u = veronese_lift(whitney_torus(lat, g))
    hess = np.swapaxes(u.hessian(), 1, 2)  # (P, s_n, q)
    rng = np.random.default_rng(2)
    idx = rng.integers(0, g.num_points, size=16)
    sv = np.linalg.svd(hess[idx], compute_uv=False)
    assert sv[:, -1].min() > 1.0


def test_veronese_lift_requires_quotient_level_map():
    lat = Lattice.identity(1)
    g = GridSpec(lat, (8,))
    w = whitney_torus(lat, g)
    bad = w.with_periodic_samples(w.periodic.samples)
    object.__setattr__ if False else None
    bad.affine = np.ones((2, 1))
    with pytest.raises(ConfigError):
        veronese_lift(bad)


def test_projection_identity_when_target_equals_q():
    lat = Lattice.identity(1)
    g = GridSpec(lat, (32,))
    u = veronese_lift(whitney_torus(lat, g))
    reduced, dirs = generic_projection_reduce(u, u.q, rng_seed=0)
    assert dirs == []
    assert np.array_equal(reduced.periodic.samples, u.periodic.samples)


def test_projection_reduce_circle_to_plane_keeps_ranks():
    # n=1: R^5 -> R^2 = s_1 + 1; SVD certificate at 256 grid points.
    lat = Lattice.identity(1)
    g = GridSpec(lat, (256,))
    u = veronese_lift(whitney_torus(lat, g))
    reduced, dirs = generic_projection_reduce(u, 2, rng_seed=0)
    assert reduced.q == 2
    assert len(dirs) == 3
    jac = np.swapaxes(reduced.jacobian(), 1, 2)
    hess = np.swapaxes(reduced.hessian(), 1, 2)
    assert relative_min_singular_values(jac).min() > 1e-6
    assert relative_min_singular_values(hess).min() > 1e-6


def test_projection_reduce_deterministic_from_seed():
    lat = Lattice.identity(1)
    g = GridSpec(lat, (64,))
    u = veronese_lift(whitney_torus(lat, g))
    r1, d1 = generic_projection_reduce(u, 2, rng_seed=7)
    r2, d2 = generic_projection_reduce(u, 2, rng_seed=7)
    assert np.array_equal(r1.periodic.samples, r2.periodic.samples)
    assert all(np.array_equal(a, b) for a, b in zip(d1, d2))


def test_in_span_direction_is_rejected():
    lat = Lattice.identity(1)
    g = GridSpec(lat, (64,))
    u = veronese_lift(whitney_torus(lat, g))
    assert projection_rejects_in_span_direction(u, grid_index=0)


def test_initial_embedding_dimensions_and_certificate_n1():
    lat = Lattice.identity(1)
    g = GridSpec(lat, (256,))
    metric = flat_metric(g, scale=(2 * np.pi) ** 2)
    u0, cert, diag = initial_embedding(metric, lat, g, rng_seed=0)
    assert u0.q == 3  # s_1 + 2
    assert cert.valid
    assert cert.sigma_min > 1e-8
    # still short with margin
    _, min_eig = shortness_defect(metric, u0)
    assert min_eig > 0


def test_initial_embedding_dimensions_n2():
    lat = Lattice.identity(2)
    g = GridSpec(lat, (16, 16))
    metric = flat_metric(g, scale=1.0)
    u0, cert, diag = initial_embedding(metric, lat, g, rng_seed=0)
    assert u0.q == 7  # s_2 + 4
    assert cert.valid


def test_initial_embedding_equivariance_structural():
    lat = Lattice.identity(1)
    g = GridSpec(lat, (64,))
    metric = flat_metric(g, scale=(2 * np.pi) ** 2)
    u0, _, _ = initial_embedding(metric, lat, g, rng_seed=0)
    assert u0.equivariance_residual(trials=100, rng_seed=1) < 1e-12


def test_initial_embedding_affine_is_identity_block_scaled():
    lat = Lattice.identity(2)
    g = GridSpec(lat, (16, 16))
    metric = flat_metric(g, scale=1.0)
    u0, _, diag = initial_embedding(metric, lat, g, rng_seed=3)
    c = diag["shortness_scale"]
    assert np.allclose(u0.affine[:2, :], c * np.eye(2))
    assert np.allclose(u0.affine[2:, :], 0.0)


def test_freeness_certificate_scale_invariant():
    lat = Lattice.identity(1)
    g = GridSpec(lat, (64,))
    metric = flat_metric(g, scale=(2 * np.pi) ** 2)
    u0, cert, _ = initial_embedding(metric, lat, g, rng_seed=0)
    cert_small = freeness_certificate(u0.scaled(1e-3))
    assert cert.valid == cert_small.valid
    assert cert.sigma_min == pytest.approx(cert_small.sigma_min, rel=1e-9)


def test_affine_map_is_not_free():
    from periso.fields import VECTOR, PeriodicField
    from periso.maps import EquivariantMap

    lat = Lattice.identity(2)
    g = GridSpec(lat, (8, 8))
    affine = np.zeros((7, 2))
    affine[:2, :] = np.eye(2)
    u = EquivariantMap(lat, affine, PeriodicField.zeros(g, VECTOR, components=7))
    cert = freeness_certificate(u)
    assert not cert.valid
    assert cert.sigma_min == 0.0


def test_dimension_formulas():
    assert [initial_dimension(n) for n in (1, 2, 3)] == [3, 7, 12]
    assert [min_perturbation_dimension(n) for n in (1, 2, 3)] == [7, 10, 14]
    assert [ambient_dimension(n) for n in (1, 2, 3)] == [7, 10, 14]
    assert ambient_dimension(4) == max(sym_size(4) + 8, sym_size(4) + 4 + 5)
