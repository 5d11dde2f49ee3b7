"""Translation lattices, deck transformations, and the periodic wrapping map.

The deck group here is a full-rank lattice of translations of R^n.  Points are
wrapped into the half-open fundamental parallelepiped {B t : t in [0,1)^n},
where the columns of B are the lattice generators.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShellCapError

# Fractional parts this close to 1 are folded down to 0 of the next cell, so
# wrap stays a total deterministic function at cell boundaries.
_TIE_EPS = 1e-15

_SHELL_CAP = 10**6


@dataclass(frozen=True)
class Lattice:
    """Full-rank translation lattice. Columns of ``basis`` are the generators."""

    basis: np.ndarray
    inverse_basis: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        basis = np.asarray(self.basis, dtype=float)
        if basis.ndim != 2 or basis.shape[0] != basis.shape[1]:
            raise ConfigError(f"lattice basis must be square, got shape {basis.shape}")
        n = basis.shape[0]
        scale = np.linalg.norm(basis, ord=2)
        det = np.linalg.det(basis)
        if abs(det) <= 1e-12 * max(scale, 1.0) ** n:
            raise ConfigError(f"lattice basis is singular (|det| = {abs(det):.3e})")
        inv = np.linalg.inv(basis)
        resid = np.abs(inv @ basis - np.eye(n)).max()
        if resid > 1e-12:
            raise ConfigError(f"lattice inverse check failed, residual {resid:.3e}")
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "inverse_basis", inv)

    @property
    def n(self):
        return self.basis.shape[0]

    @classmethod
    def identity(cls, n):
        return cls(np.eye(n))

    @classmethod
    def from_flat(cls, n, entries):
        """Build from a row-major list of n*n reals (the config encoding)."""
        arr = np.asarray(entries, dtype=float)
        if arr.size != n * n:
            raise ConfigError(f"lattice needs {n * n} entries, got {arr.size}")
        return cls(arr.reshape(n, n))

    def to_fractional(self, x):
        return np.asarray(x, dtype=float) @ self.inverse_basis.T

    def to_cartesian(self, t):
        return np.asarray(t, dtype=float) @ self.basis.T

    def shortest_vector_norm(self, search=2):
        """Norm of the shortest nonzero lattice vector.

        Enumerates integer coefficients in a small box; adequate for the
        near-reduced bases this library accepts in configs.
        """
        n = self.n
        rng = np.arange(-search, search + 1)
        grids = np.meshgrid(*([rng] * n), indexing="ij")
        coeffs = np.stack([g.ravel() for g in grids], axis=-1)
        coeffs = coeffs[np.any(coeffs != 0, axis=1)]
        return float(np.linalg.norm(coeffs @ self.basis.T, axis=1).min())


@dataclass(frozen=True)
class DeckTransform:
    """A lattice translation, stored by its integer coefficients in the basis."""

    coefficients: tuple

    def __post_init__(self):
        object.__setattr__(
            self, "coefficients", tuple(int(c) for c in self.coefficients)
        )

    @classmethod
    def identity(cls, n):
        return cls((0,) * n)

    @property
    def is_identity(self):
        return all(c == 0 for c in self.coefficients)

    def compose(self, other):
        return DeckTransform(
            tuple(a + b for a, b in zip(self.coefficients, other.coefficients))
        )

    def inverse(self):
        return DeckTransform(tuple(-a for a in self.coefficients))

    def translation(self, lattice):
        """The translation vector of this transform in ambient coordinates."""
        return lattice.basis @ np.asarray(self.coefficients, dtype=float)

    def apply(self, x, lattice):
        return np.asarray(x, dtype=float) + self.translation(lattice)


def wrap(x, lattice):
    """Wrap a point into the fundamental domain.

    Returns ``(y, tau)`` with ``x = y + tau.translation(lattice)`` and the
    fractional coordinates of ``y`` in [0, 1)^n.  Accepts a single point or an
    array of points (last axis = n); for arrays the second return value is the
    integer coefficient array.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    t = lattice.to_fractional(x)
    k = np.floor(t)
    frac = t - k
    ties = frac >= 1.0 - _TIE_EPS
    frac = np.where(ties, 0.0, frac)
    k = k + ties
    y = lattice.to_cartesian(frac)
    if single:
        return y, DeckTransform(tuple(int(c) for c in k))
    return y, k.astype(int)


def wrap_fractional(t):
    """Fractional coordinates folded into [0, 1)^n with the same tie rule."""
    k = np.floor(t)
    frac = t - k
    ties = frac >= 1.0 - _TIE_EPS
    return np.where(ties, 0.0, frac)


def neighbor_shell(lattice, radius_bound):
    """All nonidentity deck transforms with translation norm <= radius_bound.

    Sorted lexicographically by coefficients so callers iterate in a
    deterministic order.
    """
    if radius_bound < 0:
        raise ConfigError("radius_bound must be nonnegative")
    n = lattice.n
    if radius_bound == 0:
        return []
    # A safe integer box: |k_i| <= radius * ||row_i of B^-1||.
    row_norms = np.linalg.norm(lattice.inverse_basis, axis=1)
    half = np.maximum(np.ceil(radius_bound * row_norms + 1e-9).astype(int), 0)
    count = np.prod(2 * half.astype(object) + 1)
    if count > _SHELL_CAP:
        raise ShellCapError(
            f"neighbor shell would enumerate {count} transforms (cap {_SHELL_CAP})"
        )
    axes = [np.arange(-h, h + 1) for h in half]
    grids = np.meshgrid(*axes, indexing="ij")
    coeffs = np.stack([g.ravel() for g in grids], axis=-1)
    coeffs = coeffs[np.any(coeffs != 0, axis=1)]
    norms = np.linalg.norm(coeffs @ lattice.basis.T, axis=1)
    keep = coeffs[norms <= radius_bound + 1e-12]
    order = np.lexsort(keep.T[::-1])
    return [DeckTransform(tuple(row)) for row in keep[order]]


def wrapped_distance(x, centers, lattice):
    """Distance from points ``x`` to ``centers`` modulo lattice translations.

    ``x``: (..., n); ``centers``: (m, n).  Returns (..., m).  Minimizes over
    the adjacent-cell shifts, which is exact for the near-orthogonal bases
    this library targets.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    n = lattice.n
    dt = lattice.to_fractional(x)[:, None, :] - lattice.to_fractional(centers)[None, :, :]
    dt -= np.round(dt)
    shifts = np.stack(
        np.meshgrid(*([np.array([-1.0, 0.0, 1.0])] * n), indexing="ij"), axis=-1
    ).reshape(-1, n)
    d = dt[:, :, None, :] + shifts[None, None, :, :]
    dist = np.linalg.norm(d @ lattice.basis.T, axis=-1)
    return dist.min(axis=-1)


@dataclass(frozen=True)
class FundamentalDomain:
    """Half-open parallelepiped {B t : t in [0,1)^n} of a lattice."""

    lattice: Lattice

    def wrap(self, x):
        return wrap(x, self.lattice)

    def contains(self, x):
        t = self.lattice.to_fractional(x)
        return bool(np.all(t >= 0.0) and np.all(t < 1.0))
