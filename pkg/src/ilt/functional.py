"""Fields, measures, norms, Dirichlet energies and relative entropies.

All quantities are grid quadratures: the gradient is a forward difference on
links with boundary values pinned to zero, which makes the discrete energy
identity  1/2 ||grad A mu||_2^2 = <mu, A mu>  exact because the same stencil
defines the operator A.  Entropies use the 0 log 0 = 0 convention and return
the +inf sentinel (never an exception) on absolute-continuity failures.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import PartitionError, SingularDiagonalError
from .green import Grid, GreenOperator, Partition

__all__ = [
    "Field",
    "TestFamily",
    "DensityMeasure",
    "SimplexWeights",
    "PairMeasure",
    "lp_norm",
    "dirichlet_energy",
    "constraint_norm",
    "relative_entropy",
    "pair_entropy",
    "measure_energy",
    "project_measure",
    "empirical_measure",
    "field_to_csv",
    "field_to_json",
]

PROBABILITY_TOL = 1e-12


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Field:
    """Real values on the grid nodes, zero on the boundary mask."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, float)
        object.__setattr__(self, "values", v)
        if v.shape != (self.grid.n_nodes,):
            raise ValueError(f"field has {v.shape} values for {self.grid.n_nodes} nodes")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        if np.any(v[self.grid.boundary_mask] != 0.0):
            raise ValueError("field must vanish on the boundary mask")

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable) -> "Field":
        v = np.asarray(fn(grid.points), float).reshape(-1)
        v = np.where(grid.boundary_mask, 0.0, v)
        return cls(grid, v)

    @classmethod
    def zeros(cls, grid: Grid) -> "Field":
        return cls(grid, np.zeros(grid.n_nodes))

    def interp(self, x) -> np.ndarray:
        """Linear interpolation at arbitrary points (d = 1 grids only)."""
        if len(self.grid.axes) != 1:
            raise ValueError("interp is implemented for one-dimensional grids")
        return np.interp(np.asarray(x, float).reshape(-1), self.grid.axes[0], self.values)


def _indicator_profile(lo, hi, scale):
    lo = np.asarray(lo, float).reshape(-1)
    hi = np.asarray(hi, float).reshape(-1)

    def profile(x):
        x = np.asarray(x, float)
        if x.ndim == 1 and len(lo) == 1:
            x = x[:, None]
        inside = np.all((x > lo) & (x < hi), axis=-1)
        return scale * inside.astype(float)

    return profile


@dataclass(frozen=True)
class TestFamily:
    """Nonnegative bounded members phi_1..phi_n with interior support.

    `profiles` optionally carry exact off-grid evaluators (used by moment
    quadrature); members without one fall back to linear interpolation.
    """

    members: tuple[Field, ...]
    profiles: tuple[Optional[Callable], ...] = ()

    def __post_init__(self):
        if not self.members:
            raise ValueError("test family needs at least one member")
        grid = self.members[0].grid
        for m in self.members:
            if m.grid is not grid and m.grid != grid:
                raise ValueError("all family members must share one grid")
            if np.any(m.values < 0):
                raise ValueError("family members must be nonnegative")
        if not self.profiles:
            object.__setattr__(self, "profiles", (None,) * len(self.members))
        elif len(self.profiles) != len(self.members):
            raise ValueError("one profile (or None) per member")

    @classmethod
    def indicators(cls, grid: Grid, boxes: Sequence, scales: Optional[Sequence[float]] = None) -> "TestFamily":
        """Members scale_i * 1_{box_i}; boxes are (lo, hi) pairs (or per-axis lists)."""
        scales = [1.0] * len(boxes) if scales is None else list(scales)
        members, profiles = [], []
        for box, s in zip(boxes, scales):
            box = np.atleast_2d(np.asarray(box, float))
            lo, hi = box[:, 0], box[:, 1]
            prof = _indicator_profile(lo, hi, float(s))
            members.append(Field.from_function(grid, prof))
            profiles.append(prof)
        return cls(tuple(members), tuple(profiles))

    @property
    def n(self) -> int:
        return len(self.members)

    @property
    def grid(self) -> Grid:
        return self.members[0].grid

    def supports(self) -> tuple[np.ndarray, ...]:
        return tuple(np.flatnonzero(m.values > 0) for m in self.members)

    def support_union_mask(self) -> np.ndarray:
        mask = np.zeros(self.grid.n_nodes, bool)
        for m in self.members:
            mask |= m.values > 0
        return mask

    def evaluate(self, i: int, x) -> np.ndarray:
        prof = self.profiles[i]
        if prof is not None:
            return np.asarray(prof(x), float)
        return self.members[i].interp(x)

    def scaled(self, c: float) -> "TestFamily":
        members = tuple(Field(m.grid, c * m.values) for m in self.members)
        profiles = tuple(
            (lambda x, _p=p: c * np.asarray(_p(x), float)) if p is not None else None
            for p in self.profiles
        )
        return TestFamily(members, profiles)


# ---------------------------------------------------------------------------
# measures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DensityMeasure:
    """Nonnegative masses per grid node or per alphabet cell.

    `support` is the Grid or Partition the masses live on (None for a bare
    finite alphabet).  `atomic` marks empirical/point-mass measures, whose
    measure energy is undefined in d >= 2.
    """

    masses: np.ndarray
    support: Union[Grid, Partition, None] = None
    atomic: bool = False

    def __post_init__(self):
        m = np.asarray(self.masses, float)
        object.__setattr__(self, "masses", m)
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise ValueError("measure masses must be nonnegative and finite")

    @classmethod
    def probability(cls, masses, support=None, atomic: bool = False) -> "DensityMeasure":
        m = np.asarray(masses, float)
        total = m.sum()
        if total <= 0:
            raise ValueError("cannot normalize a measure with zero total mass")
        if abs(total - 1.0) > PROBABILITY_TOL:
            warnings.warn(f"renormalizing measure with total mass {total!r}", stacklevel=2)
        return cls(m / total, support, atomic)

    @classmethod
    def from_density(cls, field: Field, normalize: bool = False) -> "DensityMeasure":
        m = field.values * field.grid.weights
        return cls.probability(m, field.grid) if normalize else cls(m, field.grid)

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())


@dataclass(frozen=True)
class SimplexWeights:
    """lambda in the unit simplex S_n."""

    values: tuple[float, ...]

    def __post_init__(self):
        v = np.asarray(self.values, float)
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("simplex weights must be nonnegative and finite")
        total = v.sum()
        if total <= 0:
            raise ValueError("simplex weights cannot all vanish")
        if abs(total - 1.0) > PROBABILITY_TOL:
            warnings.warn(f"renormalizing simplex weights with sum {total!r}", stacklevel=2)
            v = v / total
        object.__setattr__(self, "values", tuple(float(t) for t in v))

    def __len__(self):
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values)

    def entropy(self) -> float:
        """I(lambda) = sum lambda_i log lambda_i (entropy against counting measure)."""
        v = self.as_array()
        pos = v > 0
        return float(np.sum(v[pos] * np.log(v[pos])))


@dataclass(frozen=True)
class PairMeasure:
    """Probability measure on a product alphabet, stored as a square table."""

    table: np.ndarray
    support: Union[Grid, Partition, None] = None

    def __post_init__(self):
        t = np.asarray(self.table, float)
        object.__setattr__(self, "table", t)
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise ValueError("pair measure table must be square")
        if np.any(t < 0) or not np.all(np.isfinite(t)):
            raise ValueError("pair measure masses must be nonnegative and finite")
        total = t.sum()
        if abs(total - 1.0) > 1e-9:
            warnings.warn(f"pair measure has total mass {total!r}", stacklevel=2)

    @property
    def left_marginal(self) -> np.ndarray:
        return self.table.sum(axis=1)

    @property
    def right_marginal(self) -> np.ndarray:
        return self.table.sum(axis=0)

    def marginal_gap(self) -> float:
        return float(np.max(np.abs(self.left_marginal - self.right_marginal)))

    def has_equal_marginals(self, tol: float = 1e-10) -> bool:
        return self.marginal_gap() <= tol


# ---------------------------------------------------------------------------
# norms and energies
# ---------------------------------------------------------------------------

def lp_norm(psi: Field, q: float) -> float:
    """Quadrature L^q norm of a field."""
    w = psi.grid.weights
    return float(np.sum(w * np.abs(psi.values) ** q) ** (1.0 / q))


def dirichlet_energy(psi: Field, p: int) -> float:
    """(p/2) ||grad psi||_2^2 with forward differences on links.

    The field is pinned to zero on the boundary mask, so links into the
    boundary contribute; this is the quadratic form of the discrete operator.
    """
    grid = psi.grid
    v = psi.values.reshape(grid.shape)
    total = 0.0
    cell = float(np.prod(grid.spacing))
    for k in range(len(grid.shape)):
        d = np.diff(v, axis=k)
        total += float(np.sum(d * d)) * cell / grid.spacing[k] ** 2
    return 0.5 * p * total


def constraint_norm(psi: Field, family: TestFamily, p: int) -> float:
    """sum_i ( integral (phi_i psi)^{2p} )^{1/p} — the Theta constraint functional.

    Positive homogeneous of degree 2 in psi.
    """
    w = psi.grid.weights
    out = 0.0
    for m in family.members:
        s = float(np.sum(w * (m.values * psi.values) ** (2 * p)))
        out += s ** (1.0 / p)
    return out


def member_norm(psi: Field, member: Field, p: int) -> float:
    """|| phi psi ||_{2p} for a single family member."""
    w = psi.grid.weights
    return float(np.sum(w * (member.values * psi.values) ** (2 * p)) ** (1.0 / (2 * p)))


# ---------------------------------------------------------------------------
# entropies
# ---------------------------------------------------------------------------

def _masses(obj) -> np.ndarray:
    if isinstance(obj, DensityMeasure):
        return obj.masses
    if isinstance(obj, Field):
        return obj.values * obj.grid.weights
    return np.asarray(obj, float)


def relative_entropy(mu, ref) -> float:
    """H(mu | ref) = sum mu log(mu / ref), with 0 log 0 = 0 and +inf sentinel.

    `ref` need not be normalized; H(mu | ref) >= -log ref(X) by Jensen.
    """
    m = _masses(mu)
    r = _masses(ref)
    if m.shape != r.shape:
        raise ValueError("measure and reference live on different index sets")
    pos = m > 0
    if np.any(r[pos] <= 0):
        return float("inf")
    return float(np.sum(m[pos] * np.log(m[pos] / r[pos])))


def pair_entropy(nu: PairMeasure, mu: DensityMeasure, marginal_tol: float = 1e-10) -> float:
    """H(nu | nu_1 x mu) when nu has equal marginals; +inf sentinel otherwise."""
    if not nu.has_equal_marginals(marginal_tol):
        return float("inf")
    bar = nu.left_marginal
    ref = np.outer(bar, _masses(mu))
    t = nu.table
    pos = t > 0
    if np.any(ref[pos] <= 0):
        return float("inf")
    return float(np.sum(t[pos] * np.log(t[pos] / ref[pos])))


# ---------------------------------------------------------------------------
# energies of measures, projections, empirical measures
# ---------------------------------------------------------------------------

def measure_energy(mu: DensityMeasure, op: GreenOperator) -> float:
    """||mu||_E^2 = <mu, A mu> = sum_ij m_i G(x_i, x_j) m_j >= 0."""
    if mu.atomic and op.grid.domain.dim >= 2:
        raise SingularDiagonalError("point masses have infinite energy for d >= 2")
    if not isinstance(mu.support, Grid):
        raise ValueError("measure energy needs a grid-supported measure")
    if mu.support != op.grid:
        raise ValueError("measure and operator grids differ")
    return float(mu.masses @ op.apply_masses(mu.masses))


def field_energy(f: Field, op: GreenOperator) -> float:
    """Energy of the density f dx."""
    return measure_energy(DensityMeasure.from_density(f), op)


def project_measure(mu: DensityMeasure, partition: Partition) -> DensityMeasure:
    """Pushforward of a grid measure onto the partition alphabet (exact masses)."""
    if not isinstance(mu.support, Grid):
        raise ValueError("project_measure expects a grid-supported measure")
    if not partition.covers(mu.masses > 0):
        raise PartitionError("partition does not cover the support of the measure")
    out = np.array([mu.masses[c].sum() for c in partition.cells])
    return DensityMeasure(out, partition)


def empirical_measure(points, grid: Grid) -> DensityMeasure:
    """Atoms of mass 1/k at the grid nodes nearest to the k input points."""
    pts = np.atleast_2d(np.asarray(points, float))
    if pts.size == 0:
        raise ValueError("empirical measure of an empty point list")
    idx = grid.nearest_node(pts)
    masses = np.bincount(idx, minlength=grid.n_nodes).astype(float) / len(idx)
    return DensityMeasure(masses, grid, atomic=True)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def field_to_csv(f: Field, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_index", "value"])
        for i, v in enumerate(f.values):
            w.writerow([i, repr(float(v))])


def field_to_json(f: Field, path) -> None:
    dom = f.grid.domain
    payload = {
        "domain": {"kind": dom.kind, "dim": dom.dim, "bounds": dom.bounds,
                   "center": dom.center, "radius": dom.radius},
        "shape": f.grid.shape,
        "values": [float(v) for v in f.values],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def measure_to_csv(mu: DensityMeasure, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_index", "value"])
        for i, v in enumerate(mu.masses):
            w.writerow([i, repr(float(v))])
