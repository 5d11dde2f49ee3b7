import numpy as np
import pytest

from periso.errors import ConfigError, NotShortError
from periso.fields import SYM2, VECTOR, GridSpec, PeriodicField, sym_pairs
from periso.freemap import veronese_lift, whitney_torus
from periso.lattice import Lattice
from periso.maps import EquivariantMap
from periso.metric import (
    MetricField,
    conformal_metric,
    flat_metric,
    induced_metric,
    metric_from_preset,
    scale_until_short,
    shortness_defect,
)


def identity_map(grid, q):
    n = grid.n
    affine = np.zeros((q, n))
    affine[:n, :] = np.eye(n)
    phi = PeriodicField.zeros(grid, VECTOR, components=q)
    return EquivariantMap(grid.lattice, affine, phi)


def circle_map(grid, radius):
    t = grid.fractional_coords().reshape(-1, 1)
    samples = radius * np.stack(
        [np.cos(2 * np.pi * t[:, 0]), np.sin(2 * np.pi * t[:, 0])], axis=-1
    )
    return EquivariantMap(
        grid.lattice,
        np.zeros((2, 1)),
        PeriodicField(grid, VECTOR, samples.reshape(grid.shape + (2,))),
    )


def test_induced_metric_of_identity_map():
    g = GridSpec(Lattice.identity(2), (16, 16))
    u = identity_map(g, 5)
    ind = induced_metric(u)
    expected = np.array([1.0, 0.0, 1.0])  # pairs (0,0),(0,1),(1,1)
    assert np.allclose(ind.field.flat, expected[None, :], atol=1e-12)


def test_induced_metric_of_circle():
    g = GridSpec(Lattice.identity(1), (64,))
    for radius in (1.0, 2.5):
        u = circle_map(g, radius)
        ind = induced_metric(u)
        assert np.allclose(ind.field.flat, (2 * np.pi * radius) ** 2, atol=1e-8)


def test_induced_metric_matches_analytic_chain_rule_n2():
    # Oracle: term-by-term analytic differentiation of the closed-form lifted
    # torus map, independent of the spectral operator.
    lat = Lattice.identity(2)
    g = GridSpec(lat, (64, 64))
    u = veronese_lift(whitney_torus(lat, g))
    t = g.fractional_coords().reshape(-1, 2)
    w = 2 * np.pi

    # y = (c1, s1, c2, s2); analytic dy/dt (P, 4, 2)
    c1, s1 = np.cos(w * t[:, 0]), np.sin(w * t[:, 0])
    c2, s2 = np.cos(w * t[:, 1]), np.sin(w * t[:, 1])
    zero = np.zeros_like(c1)
    dy = np.stack(
        [
            np.stack([-w * s1, zero], -1),
            np.stack([w * c1, zero], -1),
            np.stack([zero, -w * s2], -1),
            np.stack([zero, w * c2], -1),
        ],
        axis=1,
    )
    y = np.stack([c1, s1, c2, s2], axis=1)
    # lift jacobian: d(y_i y_j) = y_i dy_j + y_j dy_i
    rows = [dy[:, k, :] for k in range(4)]
    for (i, j) in sym_pairs(4):
        rows.append(y[:, i, None] * dy[:, j, :] + y[:, j, None] * dy[:, i, :])
    jac_analytic = np.stack(rows, axis=1)  # (P, 14, 2)
    gram = np.einsum("pqi,pqj->pij", jac_analytic, jac_analytic)
    expected = np.stack(
        [gram[:, 0, 0], gram[:, 0, 1], gram[:, 1, 1]], axis=-1
    )

    ind = induced_metric(u)
    assert np.abs(ind.field.flat - expected).max() < 1e-10


def test_shortness_defect_of_zero_map_is_g():
    g = GridSpec(Lattice.identity(1), (32,))
    metric = flat_metric(g, scale=2.0)
    u = circle_map(g, 1.0).scaled(0.0)
    defect, min_eig = shortness_defect(metric, u)
    assert np.allclose(defect.field.flat, metric.field.flat)
    assert min_eig == pytest.approx(2.0)


def test_isometric_map_is_flagged_not_short():
    g = GridSpec(Lattice.identity(1), (32,))
    metric = flat_metric(g, scale=(2 * np.pi) ** 2)
    u = circle_map(g, 1.0)  # induces exactly (2 pi)^2 d theta^2
    with pytest.raises(NotShortError):
        shortness_defect(metric, u)


def test_defect_of_unit_speed_circle_in_scaled_flat_metric():
    g = GridSpec(Lattice.identity(1), (32,))
    metric = flat_metric(g, scale=4.0)
    u = circle_map(g, 1.0 / (2 * np.pi))  # unit speed: induced = d theta^2
    defect, min_eig = shortness_defect(metric, u)
    assert np.allclose(defect.field.flat, 3.0, atol=1e-10)
    assert min_eig == pytest.approx(3.0, abs=1e-10)


def test_scale_until_short_returns_one_when_already_short():
    g = GridSpec(Lattice.identity(1), (32,))
    metric = flat_metric(g, scale=4.0)
    u = circle_map(g, 1.0 / (2 * np.pi))
    scaled, c = scale_until_short(metric, u)
    assert c == 1.0


def test_scale_until_short_halving_trace():
    # g = d theta^2, u induces 4 d theta^2: c=1/2 induces exactly d theta^2
    # (not strictly short), so the halving continues to c=1/4.
    g = GridSpec(Lattice.identity(1), (32,))
    metric = flat_metric(g, scale=1.0)
    u = circle_map(g, 2.0 / (2 * np.pi))  # |du| = 2 -> induced 4
    scaled, c = scale_until_short(metric, u)
    assert c == pytest.approx(0.25)
    ind = induced_metric(scaled)
    assert np.allclose(ind.field.flat, 0.25, atol=1e-10)


def test_scale_until_short_degenerate_metric_errors():
    # Metric of ordinary scale whose eigenvalue dips to 1e-14 at one point:
    # no amount of halving makes the defect clear the shortness margin there.
    g = GridSpec(Lattice.identity(1), (32,))
    samples = np.ones(g.shape + (1,))
    samples[5, 0] = 1e-14
    degenerate = MetricField(
        PeriodicField(g, SYM2, samples), provenance="degenerate", check=False
    )
    u = circle_map(g, 1.0)
    with pytest.raises(NotShortError):
        scale_until_short(degenerate, u)


def test_induced_metric_bilinearity():
    g = GridSpec(Lattice.identity(2), (16, 16))
    lat = g.lattice
    u = veronese_lift(whitney_torus(lat, g))
    for c in (0.5, 2.0):
        lhs = induced_metric(u.scaled(c)).field.flat
        rhs = c * c * induced_metric(u).field.flat
        assert np.abs(lhs - rhs).max() < 1e-12 * max(1.0, np.abs(rhs).max())


def test_quadratic_expansion_identity():
    # induced(u+v) - induced(u) - symmetrized cross terms == dv.dv exactly.
    g = GridSpec(Lattice.identity(1), (64,))
    u = circle_map(g, 1.0)
    rng = np.random.default_rng(5)
    t = g.fractional_coords().reshape(-1, 1)
    v_samples = 0.3 * np.stack(
        [np.sin(2 * np.pi * 2 * t[:, 0]), np.cos(2 * np.pi * 3 * t[:, 0])], axis=-1
    ).reshape(g.shape + (2,))
    v = PeriodicField(g, VECTOR, v_samples)
    u_plus = u.add_periodic(v_samples)

    jac_u = u.jacobian()
    jac_v = v.gradient().reshape(-1, 2, 1)
    cross = np.einsum("pqi,pqj->pij", jac_u, jac_v)
    sym_cross = cross + np.swapaxes(cross, 1, 2)
    dvdv = np.einsum("pqi,pqj->pij", jac_v, jac_v)

    lhs = (
        induced_metric(u_plus).field.flat
        - induced_metric(u).field.flat
        - sym_cross[:, 0, 0][:, None]
    )
    assert np.abs(lhs[:, 0] - dvdv[:, 0, 0]).max() < 1e-10


def test_metric_positive_definiteness_enforced():
    g = GridSpec(Lattice.identity(2), (8, 8))
    samples = np.zeros(g.shape + (3,))
    samples[..., 0] = 1.0
    samples[..., 2] = -1.0  # indefinite
    with pytest.raises(ConfigError):
        MetricField(PeriodicField(g, SYM2, samples))


def test_conformal_preset_matches_formula():
    g = GridSpec(Lattice.identity(2), (16, 16))
    m = conformal_metric(g, amplitude=0.05)
    t = g.fractional_coords().reshape(-1, 2)
    phi = 0.05 * np.sin(2 * np.pi * t[:, 0]) * np.sin(2 * np.pi * t[:, 1])
    assert np.allclose(m.field.flat[:, 0], np.exp(2 * phi))
    assert np.allclose(m.field.flat[:, 1], 0.0)


def test_metric_from_preset_config():
    g = GridSpec(Lattice.identity(1), (16,))
    m = metric_from_preset(g, {"preset": "flat", "scale": 3.0})
    assert np.allclose(m.field.flat[:, 0], 3.0)
    with pytest.raises(ConfigError):
        metric_from_preset(g, {"preset": "nope"})
