"""Periodic Riemannian metrics, induced metrics of maps, and shortness checks."""

import numpy as np

from .errors import ConfigError, NotShortError
from .fields import SYM2, GridSpec, PeriodicField, matrix_to_sym, sym_to_matrix

# Margin for strict shortness, relative to the mean eigenvalue scale of g.
DELTA_SHORT_REL = 1e-6

_MAX_HALVINGS = 60


class MetricField:
    """Symmetric positive-definite 2-tensor field sampled on a periodic grid."""

    def __init__(self, field, provenance="unknown", check=True):
        if field.rank != SYM2:
            raise ConfigError("metric must be a symmetric2tensor field")
        self.field = field
        self.provenance = provenance
        if check:
            lam = self.eigenvalues()
            worst = float(lam.min())
            if worst <= 1e-10:
                raise ConfigError(
                    f"metric is not positive-definite (min eigenvalue {worst:.3e})"
                )

    @property
    def grid(self):
        return self.field.grid

    @property
    def n(self):
        return self.grid.n

    def matrices(self):
        """Full matrices at grid points, shape (P, n, n)."""
        return sym_to_matrix(self.field.flat, self.n)

    def eigenvalues(self):
        """Eigenvalues at every grid point, shape (P, n), ascending."""
        return np.linalg.eigvalsh(self.matrices())

    def mean_eigenvalue_scale(self):
        n = self.n
        return float(np.mean(self.field.flat[:, _diag_indices(n)]))

    def sup_norm(self):
        return self.field.sup_norm()


def _diag_indices(n):
    from .fields import sym_pairs

    return [k for k, (i, j) in enumerate(sym_pairs(n)) if i == j]


def flat_metric(grid, scale=1.0):
    """Constant metric scale * identity."""
    n = grid.n
    samples = np.zeros(grid.shape + (len(_sym_pairs_cached(n)),))
    for k in _diag_indices(n):
        samples[..., k] = scale
    return MetricField(PeriodicField(grid, SYM2, samples), provenance=f"flat({scale})")


def conformal_metric(grid, amplitude=0.05):
    """e^{2 phi} * identity with phi = amplitude * prod_i sin(2 pi t_i)."""
    n = grid.n
    t = grid.fractional_coords().reshape(-1, n)
    phi = amplitude * np.prod(np.sin(2 * np.pi * t), axis=1)
    factor = np.exp(2.0 * phi)
    samples = np.zeros((grid.num_points, len(_sym_pairs_cached(n))))
    for k in _diag_indices(n):
        samples[:, k] = factor
    return MetricField(
        PeriodicField(grid, SYM2, samples.reshape(grid.shape + (-1,))),
        provenance=f"conformal({amplitude})",
    )


def _sym_pairs_cached(n):
    from .fields import sym_pairs

    return sym_pairs(n)


def metric_from_preset(grid, spec):
    """Build a metric from a config mapping {preset | file, parameters}."""
    if "file" in spec:
        from .serialize import load_field

        field = load_field(spec["file"], grid=grid)
        return MetricField(field, provenance=str(spec["file"]))
    preset = spec.get("preset")
    if preset == "flat":
        return flat_metric(grid, scale=float(spec.get("scale", 1.0)))
    if preset == "conformal":
        return conformal_metric(grid, amplitude=float(spec.get("amplitude", 0.05)))
    raise ConfigError(f"unknown metric preset {preset!r}")


def induced_metric(u, method="spectral"):
    """Pullback of the ambient inner product: entries (d_i u) . (d_j u)."""
    jac = u.jacobian(method)  # (P, q, n)
    gram = np.einsum("pqi,pqj->pij", jac, jac)
    samples = matrix_to_sym(gram, u.n).reshape(u.grid.shape + (-1,))
    return MetricField(
        PeriodicField(u.grid, SYM2, samples), provenance="induced", check=False
    )


def shortness_defect(g, u, delta_short=None, method="spectral"):
    """Defect G = g - du.du and its minimum eigenvalue over the grid.

    Raises NotShortError when the minimum eigenvalue is at or below the margin
    ``delta_short`` (default DELTA_SHORT_REL times the mean eigenvalue of g).
    """
    if g.grid.shape != u.grid.shape:
        raise ConfigError("metric and map grids do not match")
    if delta_short is None:
        delta_short = DELTA_SHORT_REL * g.mean_eigenvalue_scale()
    ind = induced_metric(u, method)
    defect = PeriodicField(g.grid, SYM2, g.field.samples - ind.field.samples)
    lam = np.linalg.eigvalsh(sym_to_matrix(defect.flat, g.n))
    flat_min = lam[:, 0]
    worst = int(np.argmin(flat_min))
    min_eig = float(flat_min[worst])
    if min_eig <= delta_short:
        raise NotShortError(
            f"metric defect not positive-definite: min eigenvalue {min_eig:.3e} "
            f"<= margin {delta_short:.3e} at grid point {worst}",
            grid_index=worst,
            min_eigenvalue=min_eig,
        )
    return MetricField(defect, provenance="defect", check=False), min_eig


def scale_until_short(g, u, delta_short=None):
    """Halve a scale factor c from 1 until g - d(cu).d(cu) passes the margin.

    Scaling preserves equivariance and freeness, so only shortness is checked.
    Returns (c * u, c).
    """
    c = 1.0
    for _ in range(_MAX_HALVINGS + 1):
        candidate = u.scaled(c) if c != 1.0 else u
        try:
            shortness_defect(g, candidate, delta_short=delta_short)
            return candidate, c
        except NotShortError:
            c *= 0.5
    raise NotShortError(
        "defect not positive-definite even after 60 halvings; "
        "the metric is degenerate at grid scale"
    )
