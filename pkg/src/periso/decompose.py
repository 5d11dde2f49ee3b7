"""Decomposition of a positive-definite defect into rank-one chart terms.

The defect G is split by a fourth-power partition of unity over a finite
chart cover, and on each chart written as sum_k c_k(x) f_k f_k^T with unit
linear forms f_k and coefficients c_k affine in G, strictly positive on the
chart.  Each term is stored as a^4 df (x) df with a = chi * c^{1/4}, so the
term is smooth, supported in its chart, and positive semidefinite of rank one.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, PositivityError
from .fields import (
    SCALAR,
    SYM2,
    Chart,
    PeriodicField,
    partition_of_unity,
    sym_pairs,
    sym_size,
)
from .metric import MetricField

# Chart radius cap relative to the shortest lattice vector; strictly below 1/2
# keeps every chart ball disjoint from its own translates.
RADIUS_CAP_FRACTION = 0.49
# Chart radius relative to the largest distance from a grid point to its
# nearest chart center; the margin keeps the partition weights resolvable.
RADIUS_MARGIN = 1.35

_REFINEMENT_CAP = 5


@dataclass(frozen=True)
class RankOneTerm:
    """One tensor a^4 * (df)(df)^T with df constant and supp(a) inside a chart."""

    chart: Chart
    form: np.ndarray
    coefficient: PeriodicField

    def __post_init__(self):
        f = np.asarray(self.form, dtype=float)
        norm = np.linalg.norm(f)
        if abs(norm - 1.0) > 1e-12:
            raise ConfigError(f"form must be unit length, got |f| = {norm}")
        object.__setattr__(self, "form", f)
        if self.coefficient.samples.min() < 0:
            raise ConfigError("coefficient field must be nonnegative")

    def tensor_samples(self):
        """Packed symmetric samples of a^4 (df)(df)^T, shape (*res, s_n)."""
        n = self.form.shape[0]
        a4 = self.coefficient.samples[..., 0] ** 4
        outer = np.array([self.form[i] * self.form[j] for (i, j) in sym_pairs(n)])
        return a4[..., None] * outer[None, :]

    def tensor_field(self):
        grid = self.coefficient.grid
        return PeriodicField(grid, SYM2, self.tensor_samples().reshape(grid.shape + (-1,)))

    def support_mask(self, grid):
        return (self.coefficient.samples[..., 0] > 0.0).reshape(-1)


@dataclass
class RankOneDecomposition:
    """Finite list of rank-one chart terms summing to the target defect."""

    terms: list
    target: MetricField
    reconstruction_error: float
    charts: list = field(default_factory=list)
    partition: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def reconstruction(self):
        grid = self.target.grid
        total = np.zeros(grid.shape + (sym_size(grid.n),))
        for term in self.terms:
            total += term.tensor_samples()
        return PeriodicField(grid, SYM2, total)


def positive_span_forms(n):
    """Unit forms {e_i} + {(e_i +/- e_j)/sqrt(2)}: n^2 directions whose squares
    span the symmetric tensors and positively represent the identity."""
    if n < 1:
        raise ConfigError("dimension must be >= 1")
    forms = [np.eye(n)[i] for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            e = np.eye(n)
            forms.append((e[i] + e[j]) / np.sqrt(2.0))
            forms.append((e[i] - e[j]) / np.sqrt(2.0))
    return forms


def forms_to_sym_matrix(forms, n):
    """Matrix B with columns vec(f f^T) in packed i <= j order, shape (s_n, K)."""
    cols = []
    for f in forms:
        outer = np.outer(f, f)
        cols.append([outer[i, j] for (i, j) in sym_pairs(n)])
    return np.array(cols).T


def _interior_representation(G0, forms, n):
    """Strictly positive coefficients for G0 over the standard forms.

    Splits the off-diagonal entries across the +/- pair forms with the
    diagonal-dominance slack shared evenly, so every coefficient sits a
    positive distance inside the orthant whenever G0 is strictly dominant.
    Returns None when G0 is not (comfortably) diagonally dominant.
    """
    diag = np.diag(G0)
    off = G0 - np.diag(diag)
    slack = diag - np.abs(off).sum(axis=1)
    if slack.min() <= 0:
        return None
    if n == 1:
        return np.array([G0[0, 0]])
    rho = slack.min() / (2.0 * (n - 1))
    coeffs = []
    pair_load = np.zeros(n)
    pair_coeffs = []
    for i in range(n):
        for j in range(i + 1, n):
            m = abs(G0[i, j]) + rho
            pair_coeffs.append((m + G0[i, j], m - G0[i, j]))
            pair_load[i] += m
            pair_load[j] += m
    for i in range(n):
        coeffs.append(diag[i] - pair_load[i])
    for plus, minus in pair_coeffs:
        coeffs.append(plus)
        coeffs.append(minus)
    c = np.array(coeffs)
    # order must match positive_span_forms: e_1..e_n then (+,-) per pair
    if c.min() <= 0:
        return None
    return c


def _eigen_augmented(G0, forms, n):
    """Fallback for non-dominant centers: add the eigenvector forms of
    G0 - m I (m = half the smallest eigenvalue) so that G0 = sum of positive
    multiples of the new forms plus a uniform positive load on the standard
    ones.  Works for every symmetric positive-definite G0."""
    lam, vecs = np.linalg.eigh(G0)
    m = 0.5 * lam[0]
    if m <= 0:
        raise PositivityError(
            f"chart center tensor not positive-definite (min eigenvalue {lam[0]:.3e})",
            min_coefficient=float(lam[0]),
        )
    extra_forms = [vecs[:, k].copy() for k in range(n)]
    coeffs = np.concatenate([np.full(len(forms), m / n), lam - m])
    return forms + extra_forms, coeffs


def chart_decompose(G, chart, chi, delta_pos=None, stats=None):
    """Rank-one terms for chi^4 * G supported in one chart.

    The coefficient functions are affine in G(x), anchored at a strictly
    positive representation of G(center); positivity c_k >= delta_pos is
    verified at every grid point of the chart support and a PositivityError
    (caller shrinks the charts) reports the worst point otherwise.
    """
    n = G.n
    grid = G.grid
    if delta_pos is None:
        delta_pos = 1e-8 * G.mean_eigenvalue_scale()

    center_idx = _nearest_grid_index(grid, chart.center)
    G0 = _sym_at(G, center_idx, n)

    forms = positive_span_forms(n)
    c0 = _interior_representation(G0, forms, n)
    if c0 is None:
        forms, c0 = _eigen_augmented(G0, forms, n)
    B = forms_to_sym_matrix(forms, n)
    resid = B @ c0 - np.array([G0[i, j] for (i, j) in sym_pairs(n)])
    if np.abs(resid).max() > 1e-10 * max(1.0, np.abs(G0).max()):
        raise ConfigError("interior representation failed to reproduce the center tensor")

    pinvB = np.linalg.pinv(B)
    dG = G.field.flat - G.field.flat[center_idx][None, :]
    c_all = c0[None, :] + dG @ pinvB.T  # (P, K)

    support = chi.samples[..., 0].reshape(-1) > 0.0
    c_support = c_all[support]
    if c_support.size:
        worst_flat = int(np.argmin(c_support.min(axis=1)))
        worst_val = float(c_support.min())
        if worst_val < delta_pos:
            worst_idx = int(np.nonzero(support)[0][worst_flat])
            raise PositivityError(
                f"coefficient dips to {worst_val:.3e} < delta_pos {delta_pos:.3e} "
                f"at grid point {worst_idx} of chart {chart.index}",
                grid_index=worst_idx,
                min_coefficient=worst_val,
            )

    if stats is not None:
        stats["min_coefficient_on_support"] = (
            float(c_support.min()) if c_support.size else float("inf")
        )
        stats["num_forms"] = len(forms)
        stats["eigen_augmented"] = len(forms) > n * n

    chi_flat = chi.samples[..., 0].reshape(-1)
    terms = []
    for k, f in enumerate(forms):
        a = np.zeros(grid.num_points)
        a[support] = chi_flat[support] * c_all[support, k] ** 0.25
        coeff = PeriodicField(grid, SCALAR, a.reshape(grid.shape + (1,)))
        terms.append(RankOneTerm(chart=chart, form=f, coefficient=coeff))
    return terms


def _nearest_grid_index(grid, point):
    t = grid.lattice.to_fractional(point)
    idx = [int(np.round(t[a] * r)) % r for a, r in enumerate(grid.resolution)]
    return int(np.ravel_multi_index(idx, grid.resolution))


def _sym_at(G, flat_index, n):
    from .fields import sym_to_matrix

    return sym_to_matrix(G.field.flat[flat_index], n)


def build_chart_cover(lattice, grid, per_axis=2):
    """Overlapping chart balls centered on a regular sublattice of the grid.

    Radius is the covering distance times a margin, capped strictly below half
    the shortest lattice vector so every chart stays disjoint from its own
    translates.  Centers snap to grid points so the anchor tensors are sampled
    exactly.
    """
    n = lattice.n
    s_min = lattice.shortest_vector_norm()
    centers_frac = _center_grid(per_axis, n)
    centers = centers_frac @ lattice.basis.T
    # largest distance from any grid point to its nearest center
    from .lattice import wrapped_distance

    pts = grid.flat_points()
    dist = wrapped_distance(pts, centers, lattice).min(axis=1)
    required = float(dist.max())
    radius = min(RADIUS_MARGIN * required, RADIUS_CAP_FRACTION * s_min)
    if radius <= required:
        from .errors import CoverageError

        raise CoverageError(
            f"cover with {per_axis} charts per axis needs radius > {required:.4f} "
            f"but the translate-disjointness cap allows {radius:.4f}; "
            "increase charts per axis"
        )
    charts = []
    for l, c in enumerate(centers):
        snapped = _snap_to_grid(grid, c)
        charts.append(Chart(center=snapped, radius=radius, index=l))
    for chart in charts:
        if not chart.translate_disjoint(lattice):
            raise ConfigError(
                f"chart radius {radius} not disjoint from translates (s_min {s_min})"
            )
    return charts


def _center_grid(per_axis, n):
    axes = [np.arange(per_axis) / per_axis] * n
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _snap_to_grid(grid, point):
    t = grid.lattice.to_fractional(point)
    idx = np.array([np.round(t[a] * r) % r for a, r in enumerate(grid.resolution)])
    return (idx / np.asarray(grid.resolution, dtype=float)) @ grid.lattice.basis.T


def decompose_defect(G, lattice, grid, per_axis=None, delta_pos=None):
    """Split the defect G into rank-one chart terms over a finite cover.

    Starts from 2 charts per lattice axis and refines (more, smaller charts)
    on PositivityError, up to 5 refinements.  The reconstruction identity is
    verified on the grid before returning.
    """
    from .errors import CoverageError

    attempts = 0
    m = per_axis if per_axis is not None else 2
    last_error = None
    while attempts <= _REFINEMENT_CAP:
        try:
            charts = build_chart_cover(lattice, grid, per_axis=m)
            chis = partition_of_unity(charts, grid)
            terms = []
            min_coeff = float("inf")
            augmented = False
            for chart, chi in zip(charts, chis):
                stats = {}
                terms.extend(
                    chart_decompose(G, chart, chi, delta_pos=delta_pos, stats=stats)
                )
                min_coeff = min(min_coeff, stats["min_coefficient_on_support"])
                augmented = augmented or stats["eigen_augmented"]
            dec = RankOneDecomposition(
                terms=terms,
                target=G,
                reconstruction_error=0.0,
                charts=charts,
                partition=chis,
                diagnostics={
                    "charts_per_axis": m,
                    "chart_radius": charts[0].radius,
                    "num_terms": len(terms),
                    "refinements": attempts,
                    "min_coefficient_on_support": min_coeff,
                    "eigen_augmented": augmented,
                },
            )
            err = float(np.abs(dec.reconstruction().samples - G.field.samples).max())
            dec.reconstruction_error = err
            bound = 1e-8 * max(G.sup_norm(), 1e-300)
            if err > bound:
                raise ConfigError(
                    f"reconstruction error {err:.3e} above bound {bound:.3e}"
                )
            dec.diagnostics["reconstruction_error"] = err
            return dec
        except (PositivityError, CoverageError) as exc:
            last_error = exc
            m *= 2
            attempts += 1
    raise last_error
