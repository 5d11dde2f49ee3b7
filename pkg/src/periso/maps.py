"""Equivariant maps R^n -> R^q stored as affine part plus periodic part.

A map u(x) = A x + phi(x) with phi periodic satisfies u(x + tau) = u(x) + A tau
for every lattice translation tau by construction, so equivariance is a
property of the representation rather than something to maintain numerically.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .fields import VECTOR, PeriodicField, sym_size


class EquivariantMap:
    """u(x) = affine @ x + periodic(x); ``affine`` is q x n, ``periodic`` vector(q)."""

    def __init__(self, lattice, affine, periodic):
        affine = np.asarray(affine, dtype=float)
        if periodic.rank != VECTOR:
            raise ConfigError("periodic part must be a vector field")
        q = periodic.components
        n = lattice.n
        if affine.shape != (q, n):
            raise ConfigError(f"affine part must be {q}x{n}, got {affine.shape}")
        if q < n:
            raise ConfigError(f"ambient dimension {q} below domain dimension {n}")
        self.lattice = lattice
        self.affine = affine
        self.periodic = periodic

    @property
    def grid(self):
        return self.periodic.grid

    @property
    def q(self):
        return self.periodic.components

    @property
    def n(self):
        return self.lattice.n

    def evaluate(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return points @ self.affine.T + self.periodic.evaluate(points)

    def samples(self):
        """Map values at the grid points, shape (P, q)."""
        return self.grid.flat_points() @ self.affine.T + self.periodic.flat

    def jacobian(self, method="spectral"):
        """First derivatives at grid points, shape (P, q, n)."""
        dphi = self.periodic.gradient(method).reshape(-1, self.q, self.n)
        return dphi + self.affine[None, :, :]

    def hessian(self, method="spectral"):
        """Second derivatives at grid points, packed i <= j: (P, q, s_n)."""
        return self.periodic.second_derivatives(method).reshape(
            -1, self.q, sym_size(self.n)
        )

    def derivative_rows(self, method="spectral"):
        """Stacked first then second derivative rows: (P, n + s_n, q).

        Row order is d_1 .. d_n, then d_i d_j for pairs i <= j, matching the
        pointwise linear systems of the perturbation solver.
        """
        jac = np.swapaxes(self.jacobian(method), 1, 2)  # (P, n, q)
        hess = np.swapaxes(self.hessian(method), 1, 2)  # (P, s_n, q)
        return np.concatenate([jac, hess], axis=1)

    def scaled(self, c):
        """c * u: scales affine and periodic parts together."""
        return EquivariantMap(
            self.lattice,
            c * self.affine,
            PeriodicField(self.grid, VECTOR, c * self.periodic.samples),
        )

    def with_periodic_samples(self, samples):
        return EquivariantMap(
            self.lattice, self.affine, PeriodicField(self.grid, VECTOR, samples)
        )

    def add_periodic(self, v_samples):
        """u + v for a periodic displacement sampled like the periodic part."""
        return self.with_periodic_samples(self.periodic.samples + v_samples)

    def padded(self, q_new):
        """Append zero coordinates up to dimension q_new."""
        if q_new < self.q:
            raise ConfigError(f"cannot pad from q={self.q} down to {q_new}")
        if q_new == self.q:
            return self
        pad = q_new - self.q
        affine = np.vstack([self.affine, np.zeros((pad, self.n))])
        samples = np.concatenate(
            [self.periodic.samples, np.zeros(self.grid.shape + (pad,))], axis=-1
        )
        return EquivariantMap(
            self.lattice, affine, PeriodicField(self.grid, VECTOR, samples)
        )

    def equivariance_residual(self, trials=100, rng_seed=0):
        """Max |u(x + tau) - u(x) - A tau| over random points and translations."""
        rng = np.random.default_rng(rng_seed)
        n = self.n
        t = rng.uniform(0.0, 1.0, size=(trials, n))
        x = t @ self.lattice.basis.T
        k = rng.integers(-3, 4, size=(trials, n)).astype(float)
        shift = k @ self.lattice.basis.T
        lhs = self.evaluate(x + shift)
        rhs = self.evaluate(x) + shift @ self.affine.T
        return float(np.abs(lhs - rhs).max())


@dataclass(frozen=True)
class FreenessCertificate:
    """Grid certificate that first and second derivatives stay independent.

    ``sigma_min`` is the smallest singular value of the stacked derivative
    rows across the grid, relative to the largest row norm at the same point.
    """

    sigma_min: float
    worst_point: int
    threshold: float

    @property
    def valid(self):
        return bool(self.sigma_min > self.threshold)


def relative_min_singular_values(rows):
    """Per-point sigma_min of stacked rows (P, r, q), relative to row norms."""
    sv = np.linalg.svd(rows, compute_uv=False)
    row_norms = np.linalg.norm(rows, axis=2).max(axis=1)
    row_norms = np.where(row_norms > 0, row_norms, 1.0)
    return sv[:, -1] / row_norms


def freeness_certificate(u, threshold=1e-8, method="spectral"):
    """Certify linear independence of derivative rows over the whole grid."""
    rel = relative_min_singular_values(u.derivative_rows(method))
    worst = int(np.argmin(rel))
    return FreenessCertificate(
        sigma_min=float(rel[worst]), worst_point=worst, threshold=threshold
    )
