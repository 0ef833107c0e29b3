"""Regular lattice, SPDE precision matrices and bilinear projection.

The lattice nodes serve as simulation grid, SPDE mesh and prediction grid at
once.  The Matérn (nu = 1) field is approximated by the finite-difference
discretization of ``(kappa^2 - Laplacian) x = W / tau``::

    Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G)

with ``C`` the lumped (trapezoidal) mass matrix and ``G`` the 5-point
stiffness matrix with zero-flux boundaries.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln, kv

from .exceptions import InvalidArgumentError, NumericalError
from .sparse import SparseCholesky

NU = 1.0


@dataclass(frozen=True)
class GridSpec:
    """Regular ``nx`` by ``ny`` lattice over ``[x_min, x_max] x [y_min, y_max]``.

    Nodes are numbered row-major: node ``k = j * nx + i`` sits at
    ``(x_min + i * hx, y_min + j * hy)``.  An axis with a single node is a
    degenerate transect whose node stands for the whole extent of that axis;
    :func:`build_grid` never produces one, but toy problems may.
    """

    nx: int
    ny: int
    x_min: float = 0.0
    x_max: float = 1.0
    y_min: float = 0.0
    y_max: float = 1.0

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny or self.nx < 1 or self.ny < 1:
            raise InvalidArgumentError(f"node counts must be positive integers, got ({self.nx}, {self.ny})")
        if not (np.isfinite(self.x_min) and np.isfinite(self.x_max) and self.x_max > self.x_min):
            raise InvalidArgumentError(f"degenerate x bounds [{self.x_min}, {self.x_max}]")
        if not (np.isfinite(self.y_min) and np.isfinite(self.y_max) and self.y_max > self.y_min):
            raise InvalidArgumentError(f"degenerate y bounds [{self.y_min}, {self.y_max}]")

    @property
    def n_nodes(self):
        return self.nx * self.ny

    @property
    def hx(self):
        return (self.x_max - self.x_min) / max(self.nx - 1, 1)

    @property
    def hy(self):
        return (self.y_max - self.y_min) / max(self.ny - 1, 1)

    @property
    def cell_area(self):
        return self.hx * self.hy

    @property
    def area(self):
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def bounds(self):
        return (self.x_min, self.x_max, self.y_min, self.y_max)

    @cached_property
    def x_nodes(self):
        if self.nx == 1:
            return np.array([0.5 * (self.x_min + self.x_max)])
        return self.x_min + self.hx * np.arange(self.nx)

    @cached_property
    def y_nodes(self):
        if self.ny == 1:
            return np.array([0.5 * (self.y_min + self.y_max)])
        return self.y_min + self.hy * np.arange(self.ny)

    @cached_property
    def coords(self):
        """Node coordinates, shape (N, 2)."""
        xx, yy = np.meshgrid(self.x_nodes, self.y_nodes)
        return np.column_stack([xx.ravel(), yy.ravel()])

    @cached_property
    def node_weights(self):
        """Quadrature weight of each node; these sum to the domain area."""
        return np.kron(_axis_weights(self.ny, self.hy), _axis_weights(self.nx, self.hx))

    @cached_property
    def cell_bounds(self):
        """Dual cell of every node, clipped to the domain: (x0, x1, y0, y1) columns."""
        x0, x1 = _axis_cells(self.x_nodes, self.nx, self.hx, self.x_min, self.x_max)
        y0, y1 = _axis_cells(self.y_nodes, self.ny, self.hy, self.y_min, self.y_max)
        return np.column_stack([
            np.tile(x0, self.ny), np.tile(x1, self.ny),
            np.repeat(y0, self.nx), np.repeat(y1, self.nx),
        ])

    @cached_property
    def stiffness(self):
        """Symmetric 5-point stiffness matrix ``G = C L`` (zero-flux boundary)."""
        wx = sp.diags(_axis_weights(self.nx, self.hx))
        wy = sp.diags(_axis_weights(self.ny, self.hy))
        gx = wx @ _neumann_second_difference(self.nx, self.hx)
        gy = wy @ _neumann_second_difference(self.ny, self.hy)
        g = sp.kron(wy, gx) + sp.kron(gy, wx)
        g = sp.csc_matrix(g)
        return sp.csc_matrix((g + g.T) * 0.5)

    @cached_property
    def laplacian_eigenvalues(self):
        """Eigenvalues of ``C^{-1} G`` (the discrete negative Laplacian)."""
        ex = _neumann_eigenvalues(self.nx, self.hx)
        ey = _neumann_eigenvalues(self.ny, self.hy)
        return (ey[:, None] + ex[None, :]).ravel()

    def nearest_node(self, locations):
        locations = np.atleast_2d(np.asarray(locations, dtype=float))
        i = _nearest_index(locations[:, 0], self.x_min, self.hx, self.nx)
        j = _nearest_index(locations[:, 1], self.y_min, self.hy, self.ny)
        return j * self.nx + i

    def contains(self, locations, atol=1e-12):
        locations = np.atleast_2d(np.asarray(locations, dtype=float))
        tx = atol * (self.x_max - self.x_min)
        ty = atol * (self.y_max - self.y_min)
        return (
            (locations[:, 0] >= self.x_min - tx) & (locations[:, 0] <= self.x_max + tx)
            & (locations[:, 1] >= self.y_min - ty) & (locations[:, 1] <= self.y_max + ty)
        )


def _axis_weights(n, h):
    if n == 1:
        return np.array([h])
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


def _axis_cells(nodes, n, h, lo, hi):
    if n == 1:
        return np.array([lo]), np.array([hi])
    return np.clip(nodes - 0.5 * h, lo, hi), np.clip(nodes + 0.5 * h, lo, hi)


def _neumann_second_difference(n, h):
    # Ghost-point reflection at both ends; rows 0 and n-1 read (2, -2) / h^2.
    if n == 1:
        return sp.csr_matrix((1, 1))
    main = np.full(n, 2.0)
    upper = np.full(n - 1, -1.0)
    lower = np.full(n - 1, -1.0)
    upper[0] = -2.0
    lower[-1] = -2.0
    return sp.diags([lower, main, upper], [-1, 0, 1], format="csr") / h**2


def _neumann_eigenvalues(n, h):
    if n == 1:
        return np.zeros(1)
    k = np.arange(n)
    return (2.0 - 2.0 * np.cos(np.pi * k / (n - 1))) / h**2


def _nearest_index(values, lo, h, n):
    if n == 1:
        return np.zeros(values.shape[0], dtype=np.int64)
    return np.clip(np.rint((values - lo) / h), 0, n - 1).astype(np.int64)


def build_grid(nx, ny, bounds=(0.0, 1.0, 0.0, 1.0)):
    """Regular lattice with ``nx * ny`` nodes including the boundary.

    Parameters
    ----------
    nx, ny : int
        Node counts per axis, both at least 2.
    bounds : tuple of float
        ``(x_min, x_max, y_min, y_max)``.
    """
    if int(nx) != nx or int(ny) != ny or nx < 2 or ny < 2:
        raise InvalidArgumentError(f"need at least 2 nodes per axis, got ({nx}, {ny})")
    x_min, x_max, y_min, y_max = (float(b) for b in bounds)
    return GridSpec(int(nx), int(ny), x_min, x_max, y_min, y_max)


@dataclass(frozen=True)
class MaternConfig:
    """Internal SPDE parameters; smoothness is fixed at one."""

    kappa: float
    tau: float
    nu: float = NU

    def __post_init__(self):
        if not (np.isfinite(self.kappa) and self.kappa > 0):
            raise InvalidArgumentError(f"kappa must be positive, got {self.kappa}")
        if not (np.isfinite(self.tau) and self.tau > 0):
            raise InvalidArgumentError(f"tau must be positive, got {self.tau}")
        if self.nu != NU:
            raise InvalidArgumentError("only nu = 1 is supported")


def matern_correlation(d, kappa):
    """Matérn correlation for ``nu = 1``: ``kappa d K_1(kappa d)``."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise InvalidArgumentError("distances must be nonnegative")
    if kappa <= 0:
        raise InvalidArgumentError("kappa must be positive")
    r = kappa * d
    with np.errstate(invalid="ignore", over="ignore"):
        out = np.where(r > 0, r * kv(1.0, np.where(r > 0, r, 1.0)), 1.0)
    out = np.nan_to_num(out, nan=0.0)
    return out if out.ndim else float(out)


def reparam_internal_to_interpretable(m):
    """Return ``(phi, sigma)``: practical range and marginal standard deviation."""
    nu = m.nu
    phi = np.sqrt(8.0 * nu) / m.kappa
    log_sigma = (
        0.5 * gammaln(nu) - 0.5 * gammaln(nu + 1.0)
        - nu * np.log(m.kappa) - np.log(m.tau) - 0.5 * np.log(4.0 * np.pi)
    )
    return float(phi), float(np.exp(log_sigma))


def reparam_interpretable_to_internal(phi, sigma, nu=NU):
    if not (phi > 0 and sigma > 0):
        raise InvalidArgumentError(f"range and sd must be positive, got ({phi}, {sigma})")
    kappa = np.sqrt(8.0 * nu) / phi
    log_tau = (
        0.5 * gammaln(nu) - 0.5 * gammaln(nu + 1.0)
        - nu * np.log(kappa) - np.log(sigma) - 0.5 * np.log(4.0 * np.pi)
    )
    return MaternConfig(float(kappa), float(np.exp(log_tau)), nu)


@dataclass(frozen=True, eq=False)
class SparsePrecision:
    """SPDE precision matrix on a grid, with closed-form log-determinant.

    ``Q = tau^2 K C^{-1} K`` with ``K = kappa^2 C + G``; because ``C^{-1} G``
    has a known spectrum on the lattice, ``log|Q|`` needs no factorization.
    """

    grid: GridSpec
    config: MaternConfig
    matrix: sp.csc_matrix
    operator: sp.csc_matrix = field(repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self):
        return self.matrix.shape[0]

    @cached_property
    def logdet(self):
        k2 = self.config.kappa**2
        lam = self.grid.laplacian_eigenvalues
        return float(
            self.n * 2.0 * np.log(self.config.tau)
            + np.sum(np.log(self.grid.node_weights))
            + 2.0 * np.sum(np.log(k2 + lam))
        )

    @cached_property
    def dlogdet_dlog_kappa(self):
        k2 = self.config.kappa**2
        return float(np.sum(4.0 * k2 / (k2 + self.grid.laplacian_eigenvalues)))

    @cached_property
    def d_log_kappa(self):
        """``dQ / d log(kappa) = 4 kappa^2 tau^2 K``."""
        return sp.csc_matrix(4.0 * self.config.kappa**2 * self.config.tau**2 * self.operator)

    def factor(self):
        if "chol" not in self._cache:
            try:
                self._cache["chol"] = SparseCholesky(self.matrix)
            except NumericalError as exc:
                raise NumericalError(
                    f"precision factorization failed for kappa={self.config.kappa:g}, "
                    f"tau={self.config.tau:g}: {exc}"
                ) from exc
        return self._cache["chol"]


def build_precision(grid, m):
    """Sparse SPDE precision for Matérn ``nu = 1`` on ``grid``."""
    c = grid.node_weights
    k = sp.csc_matrix(sp.diags(m.kappa**2 * c) + grid.stiffness)
    q = m.tau**2 * (k @ sp.diags(1.0 / c) @ k)
    q = sp.csc_matrix(q)
    q = sp.csc_matrix((q + q.T) * 0.5)
    q.sort_indices()
    return SparsePrecision(grid, m, q, k)


def projection_matrix(grid, locations):
    """Bilinear interpolation weights from nodes to ``locations`` (n x N, CSR)."""
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    if locations.size == 0:
        return sp.csr_matrix((0, grid.n_nodes))
    if locations.ndim != 2 or locations.shape[1] != 2:
        raise InvalidArgumentError("locations must have shape (n, 2)")
    inside = grid.contains(locations)
    if not np.all(inside):
        bad = int(np.flatnonzero(~inside)[0])
        raise InvalidArgumentError(f"location {bad} at {tuple(locations[bad])} lies outside the domain")
    ix, tx = _axis_interp(locations[:, 0], grid.x_min, grid.hx, grid.nx)
    iy, ty = _axis_interp(locations[:, 1], grid.y_min, grid.hy, grid.ny)
    n = locations.shape[0]
    dx = 1 if grid.nx > 1 else 0
    dy = grid.nx if grid.ny > 1 else 0
    base = iy * grid.nx + ix
    cols = np.column_stack([base, base + dx, base + dy, base + dx + dy])
    vals = np.column_stack([(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty])
    rows = np.repeat(np.arange(n), 4)
    a = sp.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(n, grid.n_nodes))
    a.eliminate_zeros()
    return a


def _axis_interp(values, lo, h, n):
    if n == 1:
        return np.zeros(values.shape[0], dtype=np.int64), np.zeros(values.shape[0])
    t = (values - lo) / h
    i = np.clip(np.floor(t), 0, n - 2).astype(np.int64)
    frac = np.clip(t - i, 0.0, 1.0)
    return i, frac
