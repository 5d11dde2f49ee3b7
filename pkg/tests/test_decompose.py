import numpy as np
import pytest

from periso.decompose import (
    RankOneTerm,
    build_chart_cover,
    chart_decompose,
    decompose_defect,
    forms_to_sym_matrix,
    positive_span_forms,
)
from periso.errors import PositivityError
from periso.fields import (
    SCALAR,
    SYM2,
    Chart,
    GridSpec,
    PeriodicField,
    partition_of_unity,
    sym_to_matrix,
)
from periso.lattice import Lattice, wrapped_distance
from periso.metric import MetricField, flat_metric


def test_positive_span_forms_n1():
    forms = positive_span_forms(1)
    assert len(forms) == 1
    assert np.allclose(forms[0], [1.0])


def test_positive_span_forms_n2():
    forms = positive_span_forms(2)
    assert len(forms) == 4
    r2 = 1 / np.sqrt(2)
    expected = [[1, 0], [0, 1], [r2, r2], [r2, -r2]]
    assert np.allclose(forms, expected)


def test_positive_span_forms_span_and_count():
    for n in (1, 2, 3):
        forms = positive_span_forms(n)
        assert len(forms) == n * n
        B = forms_to_sym_matrix(forms, n)
        assert np.linalg.matrix_rank(B) == n * (n + 1) // 2


def test_identity_has_strictly_positive_representation():
    # Oracle: expand 1/2 e1e1 + 1/2 e2e2 + 1/2 f+f+ + 1/2 f-f- symbolically.
    forms = positive_span_forms(2)
    c = np.full(4, 0.5)
    total = sum(ci * np.outer(f, f) for ci, f in zip(c, forms))
    assert np.allclose(total, np.eye(2))


def grid_for(n, res):
    return GridSpec(Lattice.identity(n), (res,) * n)


def make_chart_and_chi(grid, center, radius):
    chart = Chart(center=np.asarray(center, dtype=float), radius=radius, index=0)
    # single chart covering everything for decomposition unit tests
    (chi,) = partition_of_unity([chart], grid)
    return chart, chi


def test_chart_decompose_constant_identity_exact():
    g = grid_for(2, 16)
    G = flat_metric(g, scale=1.0)
    chart, chi = make_chart_and_chi(g, [0.5, 0.5], 0.9)
    terms = chart_decompose(G, chart, chi)
    total = sum(t.tensor_samples() for t in terms)
    chi4 = chi.samples[..., 0] ** 4
    expected = chi4[..., None] * np.array([1.0, 0.0, 1.0])[None, None, :]
    assert np.abs(total - expected).max() < 1e-12


def test_chart_decompose_scalar_matches_algebra():
    # n=1: G = (2 + sin 2 pi x) dx^2; c(x) = 2 + sin, a = chi * c^{1/4}.
    g = grid_for(1, 64)
    x = g.flat_points()[:, 0]
    G = MetricField(
        PeriodicField(g, SYM2, (2 + np.sin(2 * np.pi * x)).reshape(g.shape + (1,))),
        check=False,
    )
    chart, chi = make_chart_and_chi(g, [0.5], 0.8)
    terms = chart_decompose(G, chart, chi)
    assert len(terms) == 1
    a = terms[0].coefficient.samples[..., 0].reshape(-1)
    chi_flat = chi.samples[..., 0].reshape(-1)
    expected = chi_flat * (2 + np.sin(2 * np.pi * x)) ** 0.25
    assert np.abs(a - expected).max() < 1e-12


def test_chart_decompose_positivity_error_on_near_degenerate():
    g = grid_for(1, 64)
    x = g.flat_points()[:, 0]
    vals = 1.0 + 0.0 * x
    vals[20] = 1e-9  # engineered dip inside the chart
    G = MetricField(PeriodicField(g, SYM2, vals.reshape(g.shape + (1,))), check=False)
    chart, chi = make_chart_and_chi(g, [0.3], 0.55)
    with pytest.raises(PositivityError) as ei:
        chart_decompose(G, chart, chi)
    assert ei.value.min_coefficient is not None


def test_chart_decompose_non_dominant_center_uses_eigen_forms():
    # SPD but not diagonally dominant: needs the augmented form set.
    g = grid_for(2, 16)
    mat = np.array([[4.0, 1.2], [1.2, 0.5]])
    samples = np.zeros(g.shape + (3,))
    samples[..., 0] = mat[0, 0]
    samples[..., 1] = mat[0, 1]
    samples[..., 2] = mat[1, 1]
    G = MetricField(PeriodicField(g, SYM2, samples))
    chart, chi = make_chart_and_chi(g, [0.5, 0.5], 0.9)
    stats = {}
    terms = chart_decompose(G, chart, chi, stats=stats)
    assert stats["eigen_augmented"]
    total = sum(t.tensor_samples() for t in terms)
    chi4 = chi.samples[..., 0] ** 4
    assert np.abs(total - chi4[..., None] * samples).max() < 1e-10


def test_rank_one_term_is_psd_rank_one():
    g = grid_for(2, 8)
    G = flat_metric(g, scale=2.0)
    chart, chi = make_chart_and_chi(g, [0.5, 0.5], 0.9)
    terms = chart_decompose(G, chart, chi)
    for t in terms:
        mats = sym_to_matrix(t.tensor_field().flat, 2)
        lam = np.linalg.eigvalsh(mats)
        assert lam.min() > -1e-12
        assert (lam[:, 0] < 1e-12 * max(1.0, lam[:, 1].max())).all()


def test_decompose_defect_flat_half_identity_four_charts():
    # Reconstruction to 1e-10 with the 2-per-axis cover (4 charts) on n=2.
    g = grid_for(2, 32)
    G = flat_metric(g, scale=0.5)
    dec = decompose_defect(G, g.lattice, g, per_axis=2)
    assert len(dec.charts) == 4
    assert dec.reconstruction_error <= 1e-10
    assert len(dec.terms) <= len(dec.charts) * 4  # charts x n^2 forms


def test_decompose_defect_terms_are_translate_disjoint():
    g = grid_for(2, 32)
    G = flat_metric(g, scale=0.5)
    dec = decompose_defect(G, g.lattice, g)
    lat = g.lattice
    pts = g.flat_points()
    for term in dec.terms:
        mask = term.support_mask(g)
        if not np.any(mask):
            continue
        support_pts = pts[mask]
        # distance between the support and its own nearest translate
        for k in ([1, 0], [0, 1], [1, 1], [1, -1]):
            shift = lat.basis @ np.array(k, dtype=float)
            d = np.linalg.norm(
                support_pts[:, None, :] - (support_pts + shift)[None, :, :], axis=-1
            )
            assert d.min() > 0.0
        assert term.chart.translate_disjoint(lat)


def test_decompose_defect_varying_metric():
    g = grid_for(2, 32)
    t = g.fractional_coords().reshape(-1, 2)
    factor = 0.5 + 0.1 * np.sin(2 * np.pi * t[:, 0]) * np.sin(2 * np.pi * t[:, 1])
    samples = np.zeros((g.num_points, 3))
    samples[:, 0] = factor
    samples[:, 2] = factor
    G = MetricField(PeriodicField(g, SYM2, samples.reshape(g.shape + (3,))))
    dec = decompose_defect(G, g.lattice, g)
    assert dec.reconstruction_error <= 1e-8 * G.sup_norm()
    assert dec.diagnostics["min_coefficient_on_support"] > 0


def test_build_chart_cover_radius_below_translate_cap():
    lat = Lattice.identity(2)
    g = GridSpec(lat, (32, 32))
    charts = build_chart_cover(lat, g, per_axis=2)
    assert len(charts) == 4
    for c in charts:
        assert 2 * c.radius < lat.shortest_vector_norm()
    # covering: every grid point strictly inside some chart
    pts = g.flat_points()
    centers = np.array([c.center for c in charts])
    d = wrapped_distance(pts, centers, lat)
    assert (d.min(axis=1) < charts[0].radius).all()


def test_form_normalization_enforced():
    g = grid_for(1, 16)
    coeff = PeriodicField.zeros(g, SCALAR)
    chart = Chart(center=np.zeros(1), radius=0.3, index=0)
    with pytest.raises(Exception):
        RankOneTerm(chart=chart, form=np.array([2.0]), coefficient=coeff)
