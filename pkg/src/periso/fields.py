"""Periodic fields on regular grids with spectral and finite-difference calculus.

Scalar, vector, and symmetric-2-tensor fields are sampled on a regular grid
over the fundamental domain of a lattice.  Derivatives default to spectral
(exact for band-limited data); 4th-order centered differences exist for
cross-validation.  Off-grid evaluation uses trigonometric interpolation.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, CoverageError
from .lattice import Lattice, wrap_fractional, wrapped_distance

SCALAR = "scalar"
VECTOR = "vector"
SYM2 = "symmetric2tensor"


def sym_size(n):
    """Number of independent entries of a symmetric 2-tensor in dimension n."""
    return n * (n + 1) // 2


def sym_pairs(n):
    """Index pairs (i, j), i <= j, in the storage order used everywhere here."""
    return [(i, j) for i in range(n) for j in range(i, n)]


def sym_to_matrix(values, n):
    """Expand packed symmetric entries (..., s_n) to full matrices (..., n, n)."""
    values = np.asarray(values)
    out = np.zeros(values.shape[:-1] + (n, n), dtype=values.dtype)
    for k, (i, j) in enumerate(sym_pairs(n)):
        out[..., i, j] = values[..., k]
        out[..., j, i] = values[..., k]
    return out


def matrix_to_sym(mats, n):
    """Pack full symmetric matrices (..., n, n) into (..., s_n) storage."""
    mats = np.asarray(mats)
    cols = [mats[..., i, j] for (i, j) in sym_pairs(n)]
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class GridSpec:
    """Regular sampling grid: ``resolution[i]`` points along lattice direction i."""

    lattice: Lattice
    resolution: tuple

    def __post_init__(self):
        res = tuple(int(r) for r in np.atleast_1d(self.resolution))
        if len(res) != self.lattice.n:
            raise ConfigError(
                f"resolution needs {self.lattice.n} entries, got {len(res)}"
            )
        if any(r < 4 for r in res):
            raise ConfigError(f"every resolution entry must be >= 4, got {res}")
        object.__setattr__(self, "resolution", res)

    @property
    def n(self):
        return self.lattice.n

    @property
    def shape(self):
        return self.resolution

    @property
    def num_points(self):
        return int(np.prod(self.resolution))

    def fractional_coords(self):
        """Array (*resolution, n) of fractional grid coordinates in [0,1)^n."""
        axes = [np.arange(r) / r for r in self.resolution]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def points(self):
        """Array (*resolution, n) of ambient grid point coordinates."""
        return self.fractional_coords() @ self.lattice.basis.T

    def flat_points(self):
        return self.points().reshape(-1, self.n)

    def spacing(self):
        """Ambient length of one grid step along each lattice direction."""
        lens = np.linalg.norm(self.lattice.basis, axis=0)
        return lens / np.asarray(self.resolution)


def _wavenumbers(grid):
    """Per-axis angular wavenumber multipliers (2*pi*m) with Nyquist zeroed.

    Zeroing the Nyquist bin makes the first-derivative operator skew-adjoint
    and keeps repeated application consistent with itself.
    """
    out = []
    for r in grid.resolution:
        m = np.fft.fftfreq(r) * r
        if r % 2 == 0:
            m[r // 2] = 0.0
        out.append(2.0 * np.pi * m)
    return out


class PeriodicField:
    """Densely sampled periodic field with a trailing component axis.

    ``samples`` has shape (*grid.resolution, C) where C is 1 for scalars, q
    for vectors, and s_n for symmetric 2-tensors (packed i <= j).
    """

    def __init__(self, grid, rank, samples, q=None):
        samples = np.asarray(samples, dtype=float)
        if samples.shape[: grid.n] != grid.shape:
            raise ConfigError(
                f"samples shape {samples.shape} does not match grid {grid.shape}"
            )
        if samples.ndim == grid.n:
            samples = samples[..., None]
        comps = samples.shape[-1]
        if rank == SCALAR and comps != 1:
            raise ConfigError("scalar field needs exactly one component")
        if rank == SYM2 and comps != sym_size(grid.n):
            raise ConfigError(
                f"symmetric tensor field needs {sym_size(grid.n)} components, got {comps}"
            )
        if rank == VECTOR:
            if q is not None and comps != q:
                raise ConfigError(f"vector field declared q={q} but has {comps} components")
        self.grid = grid
        self.rank = rank
        self.samples = samples

    @property
    def components(self):
        return self.samples.shape[-1]

    @property
    def flat(self):
        """Samples reshaped to (num_points, C)."""
        return self.samples.reshape(-1, self.components)

    @classmethod
    def zeros(cls, grid, rank, components=1):
        if rank == SCALAR:
            components = 1
        elif rank == SYM2:
            components = sym_size(grid.n)
        return cls(grid, rank, np.zeros(grid.shape + (components,)))

    @classmethod
    def from_function(cls, grid, rank, fn, components=None):
        """Sample ``fn`` (mapping (P, n) points to (P, C) values) on the grid."""
        pts = grid.flat_points()
        vals = np.asarray(fn(pts), dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        return cls(grid, rank, vals.reshape(grid.shape + (vals.shape[-1],)))

    def copy(self):
        return PeriodicField(self.grid, self.rank, self.samples.copy())

    def __add__(self, other):
        return PeriodicField(self.grid, self.rank, self.samples + other.samples)

    def __sub__(self, other):
        return PeriodicField(self.grid, self.rank, self.samples - other.samples)

    def __mul__(self, scalar):
        return PeriodicField(self.grid, self.rank, self.samples * scalar)

    __rmul__ = __mul__

    def sup_norm(self):
        return float(np.abs(self.samples).max())

    def fourier_coefficients(self):
        axes = tuple(range(self.grid.n))
        return np.fft.fftn(self.samples, axes=axes) / self.grid.num_points

    def evaluate(self, points):
        """Trigonometric interpolation at arbitrary points (m, n) -> (m, C)."""
        coeff = self.fourier_coefficients()
        t = wrap_fractional(self.grid.lattice.to_fractional(np.atleast_2d(points)))
        n = self.grid.n
        factors = []
        for axis, r in enumerate(self.grid.resolution):
            m = np.fft.fftfreq(r) * r
            e = np.exp(2j * np.pi * np.outer(t[:, axis], m))
            if r % 2 == 0:
                # Split the Nyquist bin symmetrically so the interpolant is real.
                e[:, r // 2] = np.cos(np.pi * r * t[:, axis])
            factors.append(e)
        letters = "ijk"[:n]
        spec = ",".join(f"p{c}" for c in letters) + f",{letters}c->pc"
        vals = np.einsum(spec, *factors, coeff)
        return np.ascontiguousarray(vals.real)

    def gradient(self, method="spectral"):
        """Derivatives w.r.t. ambient coordinates: array (*res, C, n)."""
        return _gradient(self.samples, self.grid, method)

    def second_derivatives(self, method="spectral"):
        """Second derivatives, packed i <= j: array (*res, C, s_n)."""
        return _second_derivatives(self.samples, self.grid, method)

    def lowpass(self, fraction):
        """Sharp per-axis low-pass keeping modes |m| <= fraction * Nyquist."""
        return PeriodicField(
            self.grid, self.rank, lowpass_samples(self.samples, self.grid, fraction)
        )


def _fft_axis_derivative(fhat, grid, axis, wavenumbers):
    shape = [1] * fhat.ndim
    shape[axis] = grid.resolution[axis]
    return fhat * (1j * wavenumbers[axis]).reshape(shape)


def _gradient(samples, grid, method="spectral"):
    if method == "spectral":
        axes = tuple(range(grid.n))
        wn = _wavenumbers(grid)
        fhat = np.fft.fftn(samples, axes=axes)
        dt = [
            np.fft.ifftn(_fft_axis_derivative(fhat, grid, a, wn), axes=axes).real
            for a in range(grid.n)
        ]
    elif method == "finite_difference":
        dt = [_fd1(samples, grid, a) for a in range(grid.n)]
    else:
        raise ConfigError(f"unknown derivative method {method!r}")
    dt = np.stack(dt, axis=-1)  # (*res, C, n) of d/dt
    return dt @ grid.lattice.inverse_basis  # chain rule: d/dx_j = sum_i invB[i,j] d/dt_i


def _second_derivatives(samples, grid, method="spectral"):
    n = grid.n
    if method == "spectral":
        axes = tuple(range(n))
        wn = _wavenumbers(grid)
        fhat = np.fft.fftn(samples, axes=axes)
        dt2 = {}
        for a in range(n):
            for b in range(a, n):
                h = _fft_axis_derivative(
                    _fft_axis_derivative(fhat, grid, a, wn), grid, b, wn
                )
                dt2[(a, b)] = np.fft.ifftn(h, axes=axes).real
    elif method == "finite_difference":
        dt2 = {}
        for a in range(n):
            for b in range(a, n):
                if a == b:
                    dt2[(a, b)] = _fd2(samples, grid, a)
                else:
                    dt2[(a, b)] = _fd1(_fd1(samples, grid, a), grid, b)
    else:
        raise ConfigError(f"unknown derivative method {method!r}")
    invB = grid.lattice.inverse_basis

    def dt2_get(a, b):
        return dt2[(a, b)] if a <= b else dt2[(b, a)]

    out = []
    for (i, j) in sym_pairs(n):
        acc = 0.0
        for a in range(n):
            for b in range(n):
                w = invB[a, i] * invB[b, j]
                if w != 0.0:
                    acc = acc + w * dt2_get(a, b)
        out.append(acc)
    return np.stack(out, axis=-1)


def _fd1(samples, grid, axis):
    """4th-order centered first difference along one lattice axis."""
    h = 1.0 / grid.resolution[axis]
    f1 = np.roll(samples, -1, axis=axis)
    f_1 = np.roll(samples, 1, axis=axis)
    f2 = np.roll(samples, -2, axis=axis)
    f_2 = np.roll(samples, 2, axis=axis)
    return (-f2 + 8 * f1 - 8 * f_1 + f_2) / (12 * h)


def _fd2(samples, grid, axis):
    """4th-order centered second difference along one lattice axis."""
    h = 1.0 / grid.resolution[axis]
    f1 = np.roll(samples, -1, axis=axis)
    f_1 = np.roll(samples, 1, axis=axis)
    f2 = np.roll(samples, -2, axis=axis)
    f_2 = np.roll(samples, 2, axis=axis)
    return (-f2 + 16 * f1 - 30 * samples + 16 * f_1 - f_2) / (12 * h * h)


def lowpass_samples(samples, grid, fraction):
    if fraction is None or fraction >= 1.0:
        return samples.copy()
    axes = tuple(range(grid.n))
    fhat = np.fft.fftn(samples, axes=axes)
    for axis, r in enumerate(grid.resolution):
        m = np.abs(np.fft.fftfreq(r) * r)
        keep = m <= fraction * (r / 2.0)
        shape = [1] * fhat.ndim
        shape[axis] = r
        fhat = fhat * keep.reshape(shape)
    return np.fft.ifftn(fhat, axes=axes).real


def derivative(f, order, method="spectral"):
    """Derivative operator on a PeriodicField.

    order 1 returns (*res, C, n); order 2 returns (*res, C, s_n) packed i <= j.
    """
    if order == 1:
        return f.gradient(method)
    if order == 2:
        return f.second_derivatives(method)
    raise ConfigError(f"derivative order must be 1 or 2, got {order}")


@dataclass(frozen=True)
class Chart:
    """Metric ball around a center point, used as a perturbation support."""

    center: np.ndarray
    radius: float
    index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.radius <= 0:
            raise ConfigError("chart radius must be positive")

    def translate_disjoint(self, lattice):
        """True when the chart ball cannot touch any of its own lattice translates."""
        return 2.0 * self.radius < lattice.shortest_vector_norm()

    def distances(self, points, lattice):
        return wrapped_distance(points, self.center[None, :], lattice)[:, 0]

    def support_mask(self, grid):
        """Boolean grid mask of points strictly inside the chart ball."""
        d = self.distances(grid.flat_points(), grid.lattice)
        return (d < self.radius).reshape(grid.shape)


def bump(chart, x, lattice):
    """Smooth compactly supported profile exp(-1/(1-r^2)) on the chart ball.

    ``x`` may be a single point or an array of points; distances are measured
    modulo the lattice, so the profile is periodic.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    d = chart.distances(np.atleast_2d(x), lattice)
    r2 = (d / chart.radius) ** 2
    out = np.zeros_like(r2)
    inside = r2 < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    return float(out[0]) if single else out


def partition_of_unity(charts, grid):
    """Fields chi_l with sum_l chi_l^4 = 1 and supp(chi_l) inside chart l.

    Every grid point must lie strictly inside at least one chart, otherwise a
    CoverageError reports the first uncovered point.
    """
    pts = grid.flat_points()
    bumps = np.stack([bump(c, pts, grid.lattice) for c in charts], axis=0)
    total = bumps.sum(axis=0)
    uncovered = np.nonzero(total <= 0.0)[0]
    if uncovered.size:
        idx = int(uncovered[0])
        raise CoverageError(
            f"grid point {idx} at {pts[idx]} is not inside any chart", grid_index=idx
        )
    chi = (bumps / total) ** 0.25
    return [
        PeriodicField(grid, SCALAR, chi[l].reshape(grid.shape + (1,)))
        for l in range(len(charts))
    ]
