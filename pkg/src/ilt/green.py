"""Domains, tensor grids, and the Green operator of killed Brownian motion.

The generator convention is 1/2 * Laplacian throughout, so the Green function
G(x, y) is the expected occupation density of a standard Brownian motion
started at x and killed on the boundary of the domain B, and the operator

    A f(x) = integral G(x, y) f(y) dy

inverts -1/2 * Laplacian with zero boundary values.  On a uniform tensor grid
the discrete counterpart is the factorized Dirichlet Laplacian; in one
dimension the closed-form kernel evaluated at the nodes coincides with the
discrete inverse exactly, which keeps the two code paths interchangeable.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigurationError, PartitionError, SingularDiagonalError

__all__ = [
    "Domain",
    "Grid",
    "GreenOperator",
    "Partition",
    "green_eval",
    "green_apply",
    "green_cell_bounds",
    "green_cell_average",
    "mean_exit_time",
    "kernel_function",
    "kernel_to_csv",
]


# ---------------------------------------------------------------------------
# domains
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Domain:
    """Open set B: interval, axis-aligned box, ball, or all of R^d (d >= 3)."""

    kind: str                      # "interval" | "box" | "ball" | "free_space"
    dim: int
    bounds: tuple[tuple[float, float], ...] = ()
    center: tuple[float, ...] = ()
    radius: float = 0.0

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigurationError(f"dimension must be positive, got {self.dim}")
        if self.kind == "free_space" and self.dim <= 2:
            raise ConfigurationError("free_space requires d >= 3 (B must be bounded for d <= 2)")
        if self.kind in ("interval", "box"):
            if len(self.bounds) != self.dim:
                raise ConfigurationError("bounds must have one (lo, hi) pair per axis")
            for lo, hi in self.bounds:
                if not hi > lo:
                    raise ConfigurationError(f"empty axis bounds ({lo}, {hi})")
        if self.kind == "ball":
            if self.radius <= 0:
                raise ConfigurationError("ball radius must be positive")
            if len(self.center) != self.dim:
                raise ConfigurationError("ball center must have one coordinate per axis")

    @staticmethod
    def interval(a: float, b: float) -> "Domain":
        return Domain("interval", 1, bounds=((float(a), float(b)),))

    @staticmethod
    def box(bounds: Sequence[tuple[float, float]]) -> "Domain":
        bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
        return Domain("box", len(bounds), bounds=bounds)

    @staticmethod
    def ball(dim: int, center: Sequence[float], radius: float) -> "Domain":
        return Domain("ball", dim, center=tuple(float(c) for c in center), radius=float(radius))

    @staticmethod
    def free_space(dim: int) -> "Domain":
        return Domain("free_space", dim)

    @property
    def bounded(self) -> bool:
        return self.kind != "free_space"

    def check_admissible(self, p: int) -> None:
        """The whole theory needs p(d-2) < d; reject configurations outside it."""
        if p < 1:
            raise ConfigurationError(f"p must be a positive integer, got {p}")
        if p * (self.dim - 2) >= self.dim:
            raise ConfigurationError(
                f"inadmissible configuration: p(d-2) < d fails for p={p}, d={self.dim} "
                f"({p}*({self.dim}-2) = {p * (self.dim - 2)} >= {self.dim})"
            )

    def contains(self, x, strict: bool = True) -> np.ndarray:
        """Pointwise membership in B (strict) or in closure(B)."""
        x = np.atleast_2d(np.asarray(x, float))
        if self.kind == "free_space":
            return np.ones(x.shape[0], bool)
        if self.kind == "ball":
            r = np.linalg.norm(x - np.asarray(self.center), axis=1)
            return r < self.radius if strict else r <= self.radius + 1e-12
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        if strict:
            return np.all((x > lo) & (x < hi), axis=1)
        return np.all((x >= lo - 1e-12) & (x <= hi + 1e-12), axis=1)

    def volume(self) -> float:
        if self.kind in ("interval", "box"):
            return float(np.prod([hi - lo for lo, hi in self.bounds]))
        if self.kind == "ball":
            d = self.dim
            return math.pi ** (d / 2) / math.gamma(d / 2 + 1) * self.radius**d
        raise ConfigurationError("free space has infinite volume")


# ---------------------------------------------------------------------------
# closed-form kernels
# ---------------------------------------------------------------------------

def _free_space_constant(d: int) -> float:
    # G(x, y) = C_d |x-y|^{2-d} for standard BM (generator 1/2 Laplacian)
    return math.gamma(d / 2 - 1) / (2 * math.pi ** (d / 2))


def _interval_kernel(a: float, b: float, x, y):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    length = b - a
    g = 2.0 * (np.minimum(x, y) - a) * (b - np.maximum(x, y)) / length
    return np.maximum(g, 0.0)


def _ball_kernel(dom: Domain, x, y):
    """Image-charge kernel of the ball; infinite on the diagonal for d >= 2."""
    c = np.asarray(dom.center)
    r = dom.radius
    x = np.atleast_2d(np.asarray(x, float)) - c
    y = np.atleast_2d(np.asarray(y, float)) - c
    d = dom.dim
    dxy = np.linalg.norm(x - y, axis=-1)
    nx = np.linalg.norm(x, axis=-1)
    # |x| |x* - y| with x* = r^2 x / |x|^2, continuous limit r at x = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        xstar = np.where(nx[..., None] > 0, r**2 * x / np.maximum(nx, 1e-300)[..., None] ** 2, 0.0)
    img = np.where(nx > 0, nx * np.linalg.norm(xstar - y, axis=-1), r * np.ones_like(nx))
    with np.errstate(divide="ignore"):
        if d == 1:
            raise ConfigurationError("use an interval domain in d = 1")
        if d == 2:
            out = (1.0 / math.pi) * np.log(img / (r * dxy))
        else:
            cd = _free_space_constant(d)
            out = cd * (dxy ** (2 - d) - (img / r) ** (2 - d))
    out = np.where(dxy == 0, np.inf, out)
    return np.maximum(out, 0.0)


def kernel_function(domain: Domain) -> Callable:
    """Vectorized closed-form G(x, y) for interval/ball/free-space domains.

    Boxes have no closed form here; use a GreenOperator kernel table instead.
    """
    if domain.kind == "interval":
        a, b = domain.bounds[0]
        return lambda x, y: _interval_kernel(a, b, x, y)
    if domain.kind == "free_space":
        d = domain.dim
        cd = _free_space_constant(d)

        def _free(x, y):
            x = np.atleast_2d(np.asarray(x, float))
            y = np.atleast_2d(np.asarray(y, float))
            r = np.linalg.norm(x - y, axis=-1)
            with np.errstate(divide="ignore"):
                return np.where(r == 0, np.inf, cd * r ** (2 - d))

        return _free
    if domain.kind == "ball":
        return lambda x, y: _ball_kernel(domain, x, y)
    raise ConfigurationError("no closed-form kernel for box domains")


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Uniform tensor mesh over (the bounding box of) B with a boundary mask.

    Quadrature weights are the trapezoid weights h^d at interior nodes and
    zero on masked nodes, so the weight vector sums to Leb(B) + O(h).
    """

    domain: Domain
    axes: tuple[np.ndarray, ...]
    shape: tuple[int, ...]
    points: np.ndarray          # (N, d) all nodes, C order
    boundary_mask: np.ndarray   # (N,) True = on or outside the boundary
    weights: np.ndarray         # (N,) zero on boundary
    spacing: tuple[float, ...]

    @classmethod
    def build(cls, domain: Domain, resolution) -> "Grid":
        """resolution: subintervals per axis (scalar or per-axis sequence)."""
        if domain.kind == "free_space":
            raise ConfigurationError("free space cannot be gridded; use closed-form kernels")
        if np.isscalar(resolution):
            resolution = [int(resolution)] * domain.dim
        if any(r < 2 for r in resolution):
            raise ConfigurationError("grid resolution must be at least 2 per axis")
        if domain.kind == "ball":
            box = [(c - domain.radius, c + domain.radius) for c in domain.center]
        else:
            box = list(domain.bounds)
        axes = tuple(np.linspace(lo, hi, r + 1) for (lo, hi), r in zip(box, resolution))
        spacing = tuple(float(ax[1] - ax[0]) for ax in axes)
        shape = tuple(len(ax) for ax in axes)
        mesh = np.meshgrid(*axes, indexing="ij")
        points = np.stack([m.ravel() for m in mesh], axis=1)
        on_box_edge = np.zeros(points.shape[0], bool)
        for k, ax in enumerate(axes):
            on_box_edge |= (points[:, k] == ax[0]) | (points[:, k] == ax[-1])
        if domain.kind == "ball":
            boundary = ~domain.contains(points, strict=True)
        else:
            boundary = on_box_edge
        cell = float(np.prod(spacing))
        weights = np.where(boundary, 0.0, cell)
        return cls(domain, axes, shape, points, boundary, weights, spacing)

    @property
    def n_nodes(self) -> int:
        return self.points.shape[0]

    @property
    def interior(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_mask)

    def nearest_node(self, x) -> np.ndarray:
        """Flat index of the nearest grid node for each query point."""
        x = np.atleast_2d(np.asarray(x, float))
        idx = []
        for k, ax in enumerate(self.axes):
            j = np.clip(np.rint((x[:, k] - ax[0]) / self.spacing[k]).astype(int), 0, len(ax) - 1)
            idx.append(j)
        flat = idx[0]
        for k in range(1, len(self.axes)):
            flat = flat * self.shape[k] + idx[k]
        return flat

    def __eq__(self, other):
        return self is other or (
            isinstance(other, Grid)
            and self.domain == other.domain
            and self.shape == other.shape
        )

    def __hash__(self):
        return hash((self.domain, self.shape))


# ---------------------------------------------------------------------------
# partitions of a sub-region into cells
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Partition:
    """Cells U_1..U_r of a region U, stored as node-index sets of a grid."""

    grid: Grid
    cells: tuple[np.ndarray, ...]
    centers: np.ndarray          # (r, d)
    volumes: np.ndarray          # (r,) sum of quadrature weights per cell

    def __post_init__(self):
        for l, c in enumerate(self.cells):
            if len(c) == 0:
                raise PartitionError(f"cell {l} of the partition contains no interior node")

    @classmethod
    def regular(cls, grid: Grid, region: Sequence[tuple[float, float]], shape) -> "Partition":
        """Split the box `region` into a regular array of `shape` cells."""
        region = [(float(lo), float(hi)) for lo, hi in region]
        if np.isscalar(shape):
            shape = [int(shape)] * len(region)
        edges = [np.linspace(lo, hi, s + 1) for (lo, hi), s in zip(region, shape)]
        pts = grid.points
        inside = ~grid.boundary_mask
        for k, (lo, hi) in enumerate(region):
            inside &= (pts[:, k] >= lo) & (pts[:, k] <= hi)
        node_idx = np.flatnonzero(inside)
        cell_of = np.zeros(len(node_idx), dtype=int)
        for k, e in enumerate(edges):
            j = np.clip(np.searchsorted(e, pts[node_idx, k], side="right") - 1, 0, len(e) - 2)
            cell_of = cell_of * (len(e) - 1) + j
        r = int(np.prod([len(e) - 1 for e in edges]))
        cells = tuple(node_idx[cell_of == l] for l in range(r))
        centers = np.stack(
            [m.ravel() for m in np.meshgrid(*[(e[:-1] + e[1:]) / 2 for e in edges], indexing="ij")],
            axis=1,
        )
        volumes = np.array([grid.weights[c].sum() for c in cells])
        return cls(grid, cells, centers, volumes)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def node_index(self) -> np.ndarray:
        return np.concatenate(self.cells)

    def covers(self, node_mask: np.ndarray) -> bool:
        covered = np.zeros(self.grid.n_nodes, bool)
        covered[self.node_index] = True
        return bool(np.all(covered[node_mask]))


# ---------------------------------------------------------------------------
# the Green operator
# ---------------------------------------------------------------------------

def _dirichlet_laplacian(grid: Grid):
    """Sparse -1/2 Delta_h on interior nodes (zero Dirichlet data elsewhere)."""
    n = grid.n_nodes
    interior = grid.interior
    pos = -np.ones(n, dtype=np.int64)
    pos[interior] = np.arange(len(interior))
    strides = np.cumprod((1,) + grid.shape[::-1][:-1])[::-1]
    rows, cols, vals = [], [], []
    diag = np.zeros(len(interior))
    for k in range(len(grid.shape)):
        inv2h2 = 0.5 / grid.spacing[k] ** 2
        diag += 2.0 * inv2h2
        coord = (interior // strides[k]) % grid.shape[k]
        for step in (-1, 1):
            ok = (coord + step >= 0) & (coord + step < grid.shape[k])
            nb = interior[ok] + step * strides[k]
            nb_pos = pos[nb]
            has = nb_pos >= 0
            rows.append(np.arange(len(interior))[ok][has])
            cols.append(nb_pos[has])
            vals.append(np.full(has.sum(), -inv2h2))
    rows.append(np.arange(len(interior)))
    cols.append(np.arange(len(interior)))
    vals.append(diag)
    L = sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(interior), len(interior)),
    )
    return L


def _interval_diag_correction(*_args):  # pragma: no cover - d = 1 diagonal is finite
    raise AssertionError


def _singular_cell_average(d: int, cell_volume: float) -> float:
    """Average of the free-space singularity over a ball of the cell's volume."""
    if d == 2:
        rc = math.sqrt(cell_volume / math.pi)
        return (1.0 / math.pi) * (math.log(1.0 / rc) + 0.5)
    cd = _free_space_constant(d)
    rc = (cell_volume * math.gamma(d / 2 + 1) / math.pi ** (d / 2)) ** (1.0 / d)
    # mean of |z|^{2-d} over the ball of radius rc is  d rc^{2-d} / 2
    return cd * d * rc ** (2 - d) / 2.0


class GreenOperator:
    """A = (-1/2 Delta_h)^{-1} on a grid, as a factorization or a dense table.

    Immutable after construction; apply/eval are safe to call concurrently.
    """

    def __init__(self, grid: Grid, mode: str = "sparse_solve", cutoff: Optional[float] = None):
        if mode not in ("sparse_solve", "dense_kernel"):
            raise ConfigurationError(f"unknown GreenOperator mode {mode!r}")
        if cutoff is not None and cutoff <= 0:
            raise ConfigurationError("cutoff level M must be positive")
        self.grid = grid
        self.mode = mode
        self.cutoff = cutoff
        self._lap = _dirichlet_laplacian(grid)
        self._lu = spla.splu(self._lap)
        self._table: Optional[np.ndarray] = None

    def apply_generator(self, values: np.ndarray) -> np.ndarray:
        """-1/2 Delta_h applied to node values (zero outside the interior)."""
        values = np.asarray(values, float)
        out = np.zeros_like(values)
        interior = self.grid.interior
        out[interior] = self._lap @ values[interior]
        return out

    # -- kernel table -------------------------------------------------------
    @property
    def kernel_table(self) -> np.ndarray:
        """Dense symmetric table G(x_i, x_j) over all nodes, zero on the boundary.

        Interval and ball domains use the closed forms (with the cell-averaged
        singularity on the diagonal for d >= 2); boxes invert the discrete
        Laplacian column by column.
        """
        if self._table is None:
            dom = self.grid.domain
            n = self.grid.n_nodes
            interior = self.grid.interior
            pts = self.grid.points
            table = np.zeros((n, n))
            if dom.kind == "interval":
                a, b = dom.bounds[0]
                x = pts[interior, 0]
                table[np.ix_(interior, interior)] = _interval_kernel(a, b, x[:, None], x[None, :])
            elif dom.kind == "ball":
                ker = kernel_function(dom)
                block = ker(pts[interior][:, None, :], pts[interior][None, :, :])
                np.fill_diagonal(block, 0.0)
                cell = float(np.prod(self.grid.spacing))
                sing = _singular_cell_average(dom.dim, cell)
                # smooth remainder at the node: total kernel minus the free-space part
                cd = _free_space_constant(dom.dim) if dom.dim >= 3 else None
                for t, i in enumerate(interior):
                    x = pts[i]
                    eps = 1e-6 * self.grid.spacing[0]
                    probe = x.copy()
                    probe[0] += eps
                    gtot = float(ker(x[None, :], probe[None, :]))
                    if dom.dim == 2:
                        gfree = (1.0 / math.pi) * math.log(1.0 / eps)
                    else:
                        gfree = cd * eps ** (2 - dom.dim)
                    block[t, t] = sing + (gtot - gfree)
                table[np.ix_(interior, interior)] = block
            else:  # box: columns of the discrete inverse
                cell = float(np.prod(self.grid.spacing))
                rhs = np.eye(len(interior)) / cell
                sol = self._lu.solve(rhs)
                sol = (sol + sol.T) / 2.0
                table[np.ix_(interior, interior)] = sol
            table = np.maximum(table, 0.0)
            self._table = table
        return self._table

    def cutoff_table(self, level: Optional[float] = None) -> np.ndarray:
        m = self.cutoff if level is None else level
        if m is None:
            raise ConfigurationError("no cutoff level configured")
        return np.minimum(self.kernel_table, m)

    # -- application --------------------------------------------------------
    def apply_values(self, values: np.ndarray) -> np.ndarray:
        """A f for node-value density f (must vanish on the boundary mask)."""
        values = np.asarray(values, float)
        if not np.all(np.isfinite(values)):
            raise ValueError("green_apply input has non-finite entries")
        if np.any(values[self.grid.boundary_mask] != 0):
            raise ValueError("green_apply input must vanish on the boundary mask")
        out = np.zeros_like(values)
        interior = self.grid.interior
        if self.mode == "sparse_solve":
            out[interior] = self._lu.solve(values[interior])
        else:
            out[interior] = self.kernel_table[np.ix_(interior, interior)] @ (
                values[interior] * self.grid.weights[interior]
            )
        return out

    def apply_masses(self, masses: np.ndarray) -> np.ndarray:
        """A mu for a measure given by node masses: (A mu)(x_i) = sum_j G_ij m_j."""
        masses = np.asarray(masses, float)
        if self.mode == "dense_kernel":
            return self.kernel_table @ masses
        w = self.grid.weights
        dens = np.divide(masses, w, out=np.zeros_like(masses), where=w > 0)
        return self.apply_values(dens)


# ---------------------------------------------------------------------------
# module-level operations
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _cached_operator(domain: Domain, resolution: int) -> GreenOperator:
    return GreenOperator(Grid.build(domain, resolution))


def green_eval(domain: Domain, x, y, resolution: int = 64) -> float:
    """Point evaluation of the Green function G(x, y).

    Closed form for interval/ball/free-space; for boxes a factorized
    Dirichlet-Laplacian solve on a `resolution` grid (first-order accurate).
    """
    x = np.atleast_1d(np.asarray(x, float))
    y = np.atleast_1d(np.asarray(y, float))
    if domain.kind != "free_space":
        if not (domain.contains(x[None, :], strict=False)[0] and domain.contains(y[None, :], strict=False)[0]):
            raise ValueError("green_eval arguments must lie in closure(B)")
        if not (domain.contains(x[None, :])[0] and domain.contains(y[None, :])[0]):
            return 0.0
    if np.array_equal(x, y) and domain.dim >= 2:
        raise SingularDiagonalError("G(x, x) is infinite for d >= 2")
    if domain.kind == "box":
        op = _cached_operator(domain, resolution)
        j = int(op.grid.nearest_node(y[None, :])[0])
        if op.grid.boundary_mask[j]:
            return 0.0
        load = np.zeros(op.grid.n_nodes)
        load[j] = 1.0 / float(np.prod(op.grid.spacing))
        u = op.apply_values(load)
        return float(u[op.grid.nearest_node(x[None, :])[0]])
    ker = kernel_function(domain)
    if domain.dim == 1:
        return float(ker(x[0], y[0]))
    return float(ker(x[None, :], y[None, :])[0])


def green_apply(op: GreenOperator, f):
    """Operator application A f; accepts a Field or a raw node-value array."""
    from .functional import Field  # local import to avoid a cycle

    if isinstance(f, Field):
        return Field(op.grid, op.apply_values(f.values))
    return op.apply_values(np.asarray(f, float))


def green_cell_bounds(op: GreenOperator, partition: Partition, M: float):
    """Node-realized kernel brackets over cell pairs.

    upper[l, m] = max over node pairs of min(G, M); lower[l, m] = min of G.
    Node extrema rather than true extrema: deterministic and refining with h.
    """
    if M <= 0:
        raise ConfigurationError("cutoff level M must be positive")
    table = op.kernel_table
    r = partition.n_cells
    upper = np.zeros((r, r))
    lower = np.zeros((r, r))
    for l in range(r):
        for m in range(l, r):
            block = table[np.ix_(partition.cells[l], partition.cells[m])]
            upper[l, m] = upper[m, l] = min(block.max(), M)
            lower[l, m] = lower[m, l] = block.min()
    return upper, lower


def green_cell_average(op: GreenOperator, partition: Partition) -> np.ndarray:
    """Quadrature-weighted cell-pair average of the kernel (coarse kernel)."""
    table = op.kernel_table
    w = op.grid.weights
    r = partition.n_cells
    out = np.zeros((r, r))
    for l in range(r):
        wl = w[partition.cells[l]]
        for m in range(l, r):
            wm = w[partition.cells[m]]
            block = table[np.ix_(partition.cells[l], partition.cells[m])]
            out[l, m] = out[m, l] = (wl @ block @ wm) / (wl.sum() * wm.sum())
    return out


def mean_exit_time(domain: Domain, x) -> float:
    """E_x[T] = A 1 (x); closed form for interval/ball, grid solve for boxes."""
    if domain.kind == "free_space":
        raise ConfigurationError("mean exit time is infinite on free space")
    x = np.atleast_1d(np.asarray(x, float))
    if not domain.contains(x[None, :], strict=False)[0]:
        raise ValueError("starting point must lie in closure(B)")
    if not domain.contains(x[None, :])[0]:
        return 0.0
    if domain.kind == "interval":
        a, b = domain.bounds[0]
        return float((x[0] - a) * (b - x[0]))
    if domain.kind == "ball":
        s2 = float(np.sum((x - np.asarray(domain.center)) ** 2))
        return (domain.radius**2 - s2) / domain.dim
    op = _cached_operator(domain, 64)
    ones = np.where(op.grid.boundary_mask, 0.0, 1.0)
    u = op.apply_values(ones)
    return float(u[op.grid.nearest_node(x[None, :])[0]])


def kernel_to_csv(op: GreenOperator, path) -> None:
    """Export the dense kernel table with header row i,j,G."""
    table = op.kernel_table
    interior = op.grid.interior
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "G"])
        for i in interior:
            for j in interior:
                w.writerow([i, j, repr(table[i, j])])
