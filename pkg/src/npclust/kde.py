"""Kernel density estimation on uniform grids.

Densities are represented by their values on an equally spaced grid.
Integrals over the grid use the trapezoid rule. The two smoothing
operators are

* ``S f(y) = int K_h(y - u) f(u) du``                (:func:`linear_smooth`)
* ``N f(y) = exp(int K_h(y - u) log f(u) du)``       (:func:`nonlinear_smooth`)

Both are computed with the kernel restricted to the grid, truncated at
``TRUNCATE`` bandwidths and rescaled to unit quadrature mass at every
evaluation point, so constants are reproduced exactly and the kernel
average inside ``N`` is a proper weighted mean (Jensen's inequality
``N f <= S f`` then holds on the discrete grid as well).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDataError, EmptyComponentError, ParseError, PreconditionError

TRUNCATE = 6.0
GRID_MARGIN = 4.0
MIN_GRID_SIZE = 64
DEFAULT_GRID_SIZE = 512

_SQRT_2PI = math.sqrt(2.0 * math.pi)
_CHUNK = 1 << 22  # max matrix entries built at once


class GaussianKernel:
    """Standard normal density, the only kernel offered."""

    tag = "gaussian"

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return np.exp(-0.5 * u * u) / _SQRT_2PI

    def scaled(self, v, h):
        """``K_h(v) = K(v / h) / h``."""
        return self(np.asarray(v, dtype=float) / h) / h

    def __repr__(self):
        return "GaussianKernel()"


GAUSSIAN = GaussianKernel()


@dataclass(frozen=True)
class Grid:
    """``size`` equally spaced abscissae from ``lo`` to ``hi`` inclusive."""

    lo: float
    hi: float
    size: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise PreconditionError(f"grid needs lo < hi, got [{self.lo}, {self.hi}]")
        if self.size < MIN_GRID_SIZE:
            raise PreconditionError(f"grid needs at least {MIN_GRID_SIZE} points, got {self.size}")

    @property
    def step(self):
        return (self.hi - self.lo) / (self.size - 1)

    @property
    def points(self):
        return np.linspace(self.lo, self.hi, self.size)

    def trapezoid_weights(self):
        c = np.full(self.size, self.step)
        c[0] = c[-1] = 0.5 * self.step
        return c

    def integrate(self, values):
        return float(np.dot(self.trapezoid_weights(), values))


@dataclass(frozen=True)
class GridDensity:
    """A probability density sampled on a :class:`Grid`."""

    grid: Grid
    values: np.ndarray

    def integral(self):
        return self.grid.integrate(self.values)


def _check_h(h):
    h = float(h)
    if not (h > 0 and math.isfinite(h)):
        raise PreconditionError(f"bandwidth must be positive and finite, got {h!r}")
    return h


def silverman_bandwidth(data, count=None):
    """Silverman's rule of thumb on pooled data.

    ``h = 0.9 * count**(-1/5) * min(SD, IQR / 1.34)`` with the sample
    standard deviation (``ddof=1``) and the linearly interpolated
    interquartile range. ``count`` defaults to the number of values; for a
    flattened ``n x d`` matrix that is ``n * d``. When the IQR is zero but
    the data still vary, the standard deviation alone is used.
    """
    x = np.asarray(data, dtype=float).ravel()
    nd = x.size if count is None else int(count)
    if x.size < 2 or nd < 2:
        raise DegenerateDataError("bandwidth needs at least two observations")
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    iqr = float(q75 - q25)
    if sd == 0 and iqr == 0:
        raise DegenerateDataError("bandwidth undefined for constant data")
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * nd ** (-0.2) * spread


def build_grid(data_range, h, size=DEFAULT_GRID_SIZE, margin=GRID_MARGIN):
    """Grid covering ``[min - margin*h, max + margin*h]``."""
    lo, hi = float(data_range[0]), float(data_range[1])
    if lo > hi:
        raise PreconditionError("data range must satisfy min <= max")
    h = _check_h(h)
    return Grid(lo - margin * h, hi + margin * h, int(size))


def smoothing_weights(y, grid, h, truncate=TRUNCATE):
    """Quadrature weights of the kernel average ``int K_h(y - u) g(u) du``.

    Returns an array of shape ``(len(y), grid.size)`` whose rows are
    ``c_g K_h(y - u_g)`` (trapezoid weights ``c_g``) with the kernel cut at
    ``truncate * h`` and each row rescaled to sum to one. A point with no
    grid node inside its window falls back to its nearest node.
    """
    h = _check_h(h)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    u = grid.points
    c = grid.trapezoid_weights()
    out = np.empty((y.size, u.size))
    rows = max(1, _CHUNK // u.size)
    for start in range(0, y.size, rows):
        z = (y[start:start + rows, None] - u[None, :]) / h
        k = np.exp(-0.5 * z * z)
        k[np.abs(z) > truncate] = 0.0
        k *= c
        s = k.sum(axis=1)
        empty = s == 0
        if np.any(empty):
            near = np.clip(np.rint((y[start:start + rows][empty] - grid.lo) / grid.step), 0, u.size - 1)
            k[np.flatnonzero(empty), near.astype(int)] = 1.0
            s[empty] = 1.0
        out[start:start + rows] = k / s[:, None]
    return out


def weighted_kde(points, weights, h, grid, grid_normalized=False):
    """Weighted kernel density estimate on ``grid``.

    By default this is the textbook estimate
    ``sum_i w_i K_h(u - x_i) / sum_i w_i`` with the full Gaussian kernel.
    With ``grid_normalized=True`` each point's kernel is the one used by
    :func:`smoothing_weights` (truncated, restricted to the grid and scaled
    to unit trapezoid mass), so the estimate integrates to exactly one on
    the grid; this is the variant the mixture M-step uses.

    Raises
    ------
    EmptyComponentError
        When the weights sum to zero.
    """
    h = _check_h(h)
    x = np.asarray(points, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    if x.shape != w.shape:
        raise PreconditionError("points and weights differ in length")
    if np.any(w < 0):
        raise PreconditionError("weights must be nonnegative")
    total = w.sum()
    if not total > 0:
        raise EmptyComponentError(component=None)
    u = grid.points
    dens = np.zeros(u.size)
    rows = max(1, _CHUNK // u.size)
    for start in range(0, x.size, rows):
        xs, ws = x[start:start + rows], w[start:start + rows]
        if grid_normalized:
            k = smoothing_weights(xs, grid, h) / grid.trapezoid_weights()
        else:
            k = GAUSSIAN.scaled(xs[:, None] - u[None, :], h)
        dens += ws @ k
    return GridDensity(grid, dens / total)


def grid_smoothing_matrix(grid, h):
    """``smoothing_weights`` evaluated at the grid's own abscissae."""
    return smoothing_weights(grid.points, grid, h)


def linear_smooth(f, h, weights=None):
    """Apply ``S`` to a grid density; the result is renormalized to unit
    trapezoid mass."""
    a = grid_smoothing_matrix(f.grid, h) if weights is None else weights
    s = a @ np.asarray(f.values, dtype=float)
    return GridDensity(f.grid, s / f.grid.integrate(s))


def log_floored(values, floor):
    return np.log(np.maximum(np.asarray(values, dtype=float), floor))


def nonlinear_smooth(f, h, floor, weights=None):
    """Apply ``N`` to a grid density.

    ``log f`` is taken after clamping ``f`` at ``floor`` so the result is
    strictly positive. The output is a plain array on ``f.grid`` and is not
    renormalized.
    """
    if not floor > 0:
        raise PreconditionError("floor must be positive")
    a = grid_smoothing_matrix(f.grid, h) if weights is None else weights
    return np.exp(a @ log_floored(f.values, floor))


def eval_interp(grid, values, y, floor):
    """Linear interpolation of grid values at ``y``; ``floor`` outside the grid."""
    y = np.asarray(y, dtype=float)
    out = np.interp(y, grid.points, np.asarray(values, dtype=float))
    outside = (y < grid.lo) | (y > grid.hi)
    return np.where(outside, floor, out)


# ---------------------------------------------------------------------------
# serialization

def write_density(path, f, h, values=None):
    """Write ``abscissa<TAB>value`` rows preceded by a ``# lo= hi= G= h=`` line."""
    g = f.grid
    vals = f.values if values is None else values
    with open(path, "w") as fh:
        fh.write(f"# lo={g.lo!r} hi={g.hi!r} G={g.size} h={float(h)!r}\n")
        for x, v in zip(g.points, vals):
            fh.write(f"{x!r}\t{float(v)!r}\n")


def read_density(path):
    """Inverse of :func:`write_density`; returns ``(GridDensity, h)``."""
    with open(path) as fh:
        head = fh.readline()
        if not head.startswith("#"):
            raise ParseError(f"{path}: missing density header", row=1)
        meta = dict(item.split("=", 1) for item in head[1:].split())
        vals = [float(line.split("\t")[1]) for line in fh if line.strip()]
    grid = Grid(float(meta["lo"]), float(meta["hi"]), int(meta["G"]))
    if len(vals) != grid.size:
        raise ParseError(f"{path}: expected {grid.size} rows, found {len(vals)}")
    return GridDensity(grid, np.asarray(vals)), float(meta["h"])
