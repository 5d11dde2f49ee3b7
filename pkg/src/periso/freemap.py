"""Construction of the initial short free equivariant embedding.

The quotient torus is embedded by the explicit trigonometric map into R^{2n},
lifted with all degree-2 monomials (which forces independent second
derivatives), and then reduced to R^{s_n + n} by seeded generic projections
that certify derivative ranks on the grid at every step.  Prepending the
identity coordinates yields a free equivariant embedding of R^n into
R^{s_n + 2n}, which is finally scaled until strictly short for the target
metric.
"""

import numpy as np

from .errors import ConfigError, GenericityError
from .fields import VECTOR, PeriodicField, sym_pairs, sym_size
from .maps import EquivariantMap, freeness_certificate, relative_min_singular_values
from .metric import scale_until_short, shortness_defect

# A projection candidate passes when each derivative block keeps at least this
# fraction of its pre-projection conditioning at every grid point; of the
# passing candidates the best-conditioned one is taken.
PROJECTION_KEEP_FRACTION = 0.02
PROJECTION_ABS_FLOOR = 1e-6
PROJECTION_RETRIES = 16

# The lifted torus map carries modes up to 2 per axis; spectral derivatives
# need those strictly below Nyquist.
_MIN_RESOLUTION = 6


def whitney_torus(lattice, grid):
    """Torus embedding into R^{2n}: t -> (cos 2pi t_1, sin 2pi t_1, ...).

    Returned as a quotient-level map (zero affine part).
    """
    t = grid.fractional_coords().reshape(-1, grid.n)
    cols = []
    for i in range(grid.n):
        cols.append(np.cos(2 * np.pi * t[:, i]))
        cols.append(np.sin(2 * np.pi * t[:, i]))
    samples = np.stack(cols, axis=-1).reshape(grid.shape + (2 * grid.n,))
    return EquivariantMap(
        lattice,
        np.zeros((2 * grid.n, grid.n)),
        PeriodicField(grid, VECTOR, samples),
    )


def veronese_point(y):
    """Append all degree-2 monomials y_i y_j (i <= j) to the coordinates."""
    y = np.asarray(y, dtype=float)
    m = y.shape[-1]
    monos = [y[..., i] * y[..., j] for (i, j) in sym_pairs(m)]
    return np.concatenate([y, np.stack(monos, axis=-1)], axis=-1)


def veronese_lift(w):
    """Lift a quotient-level map into R^m to R^{s_m + m} via degree-2 monomials.

    Composition with an embedding stays an embedding, and the lifted map has
    linearly independent second derivatives wherever the input is regular.
    """
    if np.any(w.affine != 0.0):
        raise ConfigError("veronese_lift expects a quotient-level map (affine part 0)")
    lifted = veronese_point(w.periodic.flat)
    samples = lifted.reshape(w.grid.shape + (lifted.shape[-1],))
    return EquivariantMap(
        w.lattice,
        np.zeros((lifted.shape[-1], w.n)),
        PeriodicField(w.grid, VECTOR, samples),
    )


def _householder_complement(v):
    """Orthonormal basis of v-perp as rows of a (q-1) x q matrix.

    Reflecting v onto +/- e_1 makes the remaining rows of the (symmetric,
    orthogonal) Householder matrix an explicit isometry onto R^{q-1}.
    """
    q = v.shape[0]
    e1 = np.zeros(q)
    e1[0] = 1.0 if v[0] >= 0 else -1.0
    w = v + e1
    h = np.eye(q) - 2.0 * np.outer(w, w) / (w @ w)
    return h[1:, :]


def _block_quality(block, reference=None):
    """Min over grid of sigma_min relative to the largest row norm; block (P, r, q).

    ``reference`` supplies the row norms to normalize by (the pre-projection
    block); without it a projection that collapses every row at once would
    normalize itself away.
    """
    sv = np.linalg.svd(block, compute_uv=False)
    ref = reference if reference is not None else block
    row_norms = np.linalg.norm(ref, axis=2).max(axis=1)
    row_norms = np.where(row_norms > 0, row_norms, 1.0)
    return float((sv[:, -1] / row_norms).min())


def generic_projection_reduce(
    f,
    target_q,
    rng_seed,
    retries=PROJECTION_RETRIES,
    keep_fraction=PROJECTION_KEEP_FRACTION,
    abs_floor=PROJECTION_ABS_FLOOR,
):
    """Reduce a quotient-level map one dimension at a time by generic projection.

    Each step draws ``retries`` uniform directions on the sphere (seeded,
    hence reproducible), projects onto the complement, rejects candidates
    whose projected first- or second-derivative block loses rank margin at any
    grid point, and keeps the best-conditioned survivor.  Returns the reduced
    map and the accepted directions.
    """
    n = f.n
    if target_q < sym_size(n) + n:
        raise ConfigError(
            f"target_q={target_q} below s_n + n = {sym_size(n) + n}"
        )
    if np.any(f.affine != 0.0):
        raise ConfigError("generic_projection_reduce expects a quotient-level map")
    rng = np.random.default_rng(rng_seed)

    samples = f.periodic.flat.copy()
    jac = f.jacobian()  # (P, q, n)
    hess = f.hessian()  # (P, q, s_n)
    directions = []

    q = samples.shape[-1]
    while q > target_q:
        jac_block = np.swapaxes(jac, 1, 2)  # (P, n, q)
        hess_block = np.swapaxes(hess, 1, 2)  # (P, s_n, q)
        combined = np.concatenate([jac_block, hess_block], axis=1)
        base_jac = _block_quality(jac_block)
        base_hess = _block_quality(hess_block)
        best = None
        for _ in range(retries):
            v = rng.normal(size=q)
            v /= np.linalg.norm(v)
            proj = _householder_complement(v)
            cand_jac = _block_quality(jac_block @ proj.T, reference=jac_block)
            cand_hess = _block_quality(hess_block @ proj.T, reference=hess_block)
            ok_jac = cand_jac >= max(keep_fraction * base_jac, abs_floor)
            ok_hess = cand_hess >= max(keep_fraction * base_hess, abs_floor)
            # Rank by the conditioning of the stacked rows: that is what the
            # downstream pointwise solves invert.
            score = _block_quality(combined @ proj.T, reference=combined)
            if ok_jac and ok_hess and (best is None or score > best[0]):
                best = (score, v, proj)
        if best is None:
            raise GenericityError(
                f"no acceptable projection direction at q={q} after {retries} draws"
            )
        _, v, proj = best
        directions.append(v)
        samples = samples @ proj.T
        jac = np.einsum("rq,pqi->pri", proj, jac)
        hess = np.einsum("rq,pqi->pri", proj, hess)
        q -= 1

    reduced = EquivariantMap(
        f.lattice,
        np.zeros((target_q, n)),
        PeriodicField(f.grid, VECTOR, samples.reshape(f.grid.shape + (target_q,))),
    )
    return reduced, directions


def projection_rejects_in_span_direction(f, grid_index=0):
    """Engineered failure check: projecting along an existing second-derivative
    direction collapses the rank certificate at that point."""
    hess_block = np.swapaxes(f.hessian(), 1, 2)
    v = hess_block[grid_index, 0].copy()
    v /= np.linalg.norm(v)
    proj = _householder_complement(v)
    block = hess_block[grid_index : grid_index + 1]
    before = _block_quality(block)
    after = _block_quality(block @ proj.T, reference=block)
    return after < PROJECTION_KEEP_FRACTION * before


def periodic_amplitude_for(g, w):
    """Scale for the periodic factor so its metric load fits inside g.

    With u = c (x, gamma * w(p(x))) the induced metric is
    c^2 (I + gamma^2 dw^T dw).  gamma is sized so that the whole-map halving
    lands at c = 1/2 with comfortable shortness margin whenever the metric
    allows it, which keeps the second-derivative rows of the pointwise
    systems well conditioned and the deck-translation separation usable.
    """
    lam_g = g.eigenvalues()
    m_g = float(lam_g[:, 0].min())
    jac = w.jacobian()
    gram = np.einsum("pqi,pqj->pij", jac, jac)
    lam_w = float(np.linalg.eigvalsh(gram)[:, -1].max())
    if lam_w <= 0:
        raise ConfigError("periodic factor is degenerate (zero derivative)")
    gamma_sq = max((2.88 * m_g - 1.0) / lam_w, 0.45 * m_g / lam_w)
    return float(np.sqrt(gamma_sq))


def initial_embedding(g, lattice, grid, rng_seed, retries=PROJECTION_RETRIES):
    """Short free equivariant embedding u0 of R^n into R^{s_n + 2n}.

    Returns (u0, certificate, diagnostics).  The map is assembled as
    x -> c (x, gamma * w0(p(x))) with w0 the reduced lifted torus embedding;
    the identity block makes equivariance and injectivity structural, and the
    monomial block carries the second derivatives.
    """
    n = lattice.n
    if any(r < _MIN_RESOLUTION for r in grid.resolution):
        raise ConfigError(
            f"initial embedding needs resolution >= {_MIN_RESOLUTION} per axis"
        )
    torus = whitney_torus(lattice, grid)
    lifted = veronese_lift(torus)
    w0, directions = generic_projection_reduce(
        lifted, sym_size(n) + n, rng_seed, retries=retries
    )
    gamma = periodic_amplitude_for(g, w0)

    q = sym_size(n) + 2 * n
    affine = np.zeros((q, n))
    affine[:n, :] = np.eye(n)
    samples = np.concatenate(
        [np.zeros(grid.shape + (n,)), gamma * w0.periodic.samples], axis=-1
    )
    u = EquivariantMap(lattice, affine, PeriodicField(grid, VECTOR, samples))

    u0, c = scale_until_short(g, u)
    cert = freeness_certificate(u0)
    _, defect_min = shortness_defect(g, u0)
    diagnostics = {
        "projection_directions": [d.tolist() for d in directions],
        "periodic_amplitude": gamma,
        "shortness_scale": c,
        "freeness_sigma_min": cert.sigma_min,
        "defect_min_eigenvalue": defect_min,
    }
    return u0, cert, diagnostics


def initial_dimension(n):
    """Ambient dimension of the initial embedding."""
    return sym_size(n) + 2 * n


def min_perturbation_dimension(n):
    """Smallest ambient dimension the normal perturbation stage accepts."""
    return sym_size(n) + n + 5


def ambient_dimension(n):
    """Default target dimension: the larger of the two stage requirements."""
    return max(initial_dimension(n), min_perturbation_dimension(n))
