"""Exact small-k moments via the permanental chain formula, and the
moments -> exponential-moments classifier.

The k-th mixed moment of the local-time integrals equals the B^k integral of
Phi_k(y)^p against the product of the member weights phi_i^{2p}, where

    Phi_k(y) = (1/k!) sum over permutations of prod_j G(y_{sigma(j-1)}, y_{sigma(j)})

with y_0 the common starting point.  Phi_k is evaluated by subset dynamic
programming in O(2^k k^2) (brute-force permutation enumeration is kept as an
oracle).  For p = 1 the quadrature tensor sum factorizes through the chain,
so moments are matrix-chain contractions and any k up to ~20 is cheap; for
p >= 2 the tensor grid is enumerated with a node budget, falling back to
importance-sampled Monte Carlo.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.polynomial.legendre import leggauss

from .errors import ConfigurationError, SizeError
from .functional import SimplexWeights, TestFamily
from .green import Domain, kernel_function

__all__ = [
    "QuadratureOptions",
    "MomentValue",
    "MomentEntry",
    "MomentSequence",
    "TauberResult",
    "phi_k",
    "moment_mixed",
    "moment_sum",
    "moment_sequence",
    "ratio_estimate",
    "tauber_theta",
]

DP_CAP = 20
BRUTE_CAP = 9


@dataclass(frozen=True)
class QuadratureOptions:
    order: int = 32               # Gauss-Legendre order per panel and axis
    node_budget: int = 2_000_000  # cap on tensor grid size for p >= 2
    mc_samples: int = 200_000
    mc_batch: int = 50_000
    seed: int = 0
    cutoff: Optional[float] = None


@dataclass(frozen=True)
class MomentValue:
    value: float
    stderr: Optional[float]
    method: str
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class MomentEntry:
    k: int
    lam: Optional[tuple[float, ...]]
    value: float
    stderr: Optional[float]
    method: str


@dataclass(frozen=True)
class MomentSequence:
    """Moment values by k; `normalized` means the k!^p factor is divided out."""

    p: int
    entries: tuple[MomentEntry, ...]
    normalized: bool = True

    def __post_init__(self):
        ks = [e.k for e in self.entries]
        if any(k2 <= k1 for k1, k2 in zip(ks, ks[1:])):
            raise ValueError("entries must have strictly increasing k")

    def rescaled(self, c: float) -> "MomentSequence":
        """Moment sequence of the family scaled by c: values pick up c^{2kp}."""
        entries = tuple(
            MomentEntry(e.k, e.lam, e.value * c ** (2 * e.k * self.p),
                        None if e.stderr is None else e.stderr * c ** (2 * e.k * self.p),
                        e.method)
            for e in self.entries
        )
        return MomentSequence(self.p, entries, self.normalized)


@dataclass(frozen=True)
class TauberResult:
    theta_estimate: float
    verdict: str                  # "finite" | "infinite" | "inconclusive"
    slope: float
    slope_se: float
    intercept: float


# ---------------------------------------------------------------------------
# Phi_k
# ---------------------------------------------------------------------------

def _pair_kernel_matrix(points: np.ndarray, domain: Domain, cutoff: Optional[float]):
    """(B, k+1, k+1) kernel matrices for batches of point tuples (start included)."""
    ker = kernel_function(domain)
    if domain.dim == 1:
        g = ker(points[:, :, None, 0], points[:, None, :, 0])
    else:
        g = ker(points[:, :, None, :], points[:, None, :, :])
    if cutoff is not None:
        g = np.minimum(g, cutoff)
    return g


def _phi_k_dp(gmat: np.ndarray) -> np.ndarray:
    """Batched subset DP over (B, k+1, k+1) kernel matrices; returns (B,)."""
    B, k1, _ = gmat.shape
    k = k1 - 1
    f = {1 << j: {j: gmat[:, 0, j + 1]} for j in range(k)}
    for size in range(2, k + 1):
        for mask in (m for m in range(1 << k) if bin(m).count("1") == size):
            fm = {}
            bits = [j for j in range(k) if mask & (1 << j)]
            for j in bits:
                prev = mask ^ (1 << j)
                acc = np.zeros(B)
                fprev = f[prev]
                for i in bits:
                    if i != j:
                        acc += fprev[i] * gmat[:, i + 1, j + 1]
                fm[j] = acc
            f[mask] = fm
    full = (1 << k) - 1
    total = np.zeros(B)
    for j in range(k):
        total += f[full][j]
    return total / math.factorial(k)


def _phi_k_brute(gmat: np.ndarray) -> float:
    k = gmat.shape[0] - 1
    total = 0.0
    for sigma in itertools.permutations(range(1, k + 1)):
        prod, prev = 1.0, 0
        for j in sigma:
            prod *= gmat[prev, j]
            prev = j
        total += prod
    return total / math.factorial(k)


def phi_k(points, y0, domain: Domain, method: str = "dp",
          cutoff: Optional[float] = None) -> float:
    """The permanental chain sum over one point configuration.

    Returns +inf when points coincide in d >= 2 (the kernel diagonal);
    coincidences in d = 1 evaluate exactly.
    """
    pts = np.asarray(points, float)
    if pts.ndim == 1:
        pts = pts[:, None]
    k = pts.shape[0]
    if method == "dp" and k > DP_CAP:
        raise SizeError(f"dp method capped at k = {DP_CAP}, got {k}")
    if method == "brute" and k > BRUTE_CAP:
        raise SizeError(f"brute method capped at k = {BRUTE_CAP}, got {k}")
    allpts = np.concatenate([np.atleast_1d(np.asarray(y0, float)).reshape(1, -1), pts], axis=0)
    if domain.dim >= 2:
        diff = allpts[:, None, :] - allpts[None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        np.fill_diagonal(dist, 1.0)
        if np.any(dist == 0):
            return float("inf") if cutoff is None else _finite_phi_k(allpts, domain, cutoff, method)
    gmat = _pair_kernel_matrix(allpts[None], domain, cutoff)[0]
    if method == "brute":
        return float(_phi_k_brute(gmat))
    return float(_phi_k_dp(gmat[None])[0])


def _finite_phi_k(allpts, domain, cutoff, method):
    gmat = _pair_kernel_matrix(allpts[None], domain, cutoff)[0]
    gmat = np.minimum(gmat, cutoff)
    return float(_phi_k_brute(gmat) if method == "brute" else _phi_k_dp(gmat[None])[0])


# ---------------------------------------------------------------------------
# quadrature scaffolding (d = 1)
# ---------------------------------------------------------------------------

def _panels(domain: Domain, family: TestFamily, y0: float) -> list[float]:
    a, b = domain.bounds[0]
    cuts = {a, b, float(y0)}
    for m in family.members:
        supp = np.flatnonzero(m.values > 0)
        if len(supp):
            ax = family.grid.axes[0]
            cuts.add(float(ax[supp[0] - 1])) if supp[0] > 0 else cuts.add(a)
            cuts.add(float(ax[min(supp[-1] + 1, len(ax) - 1)]))
    return sorted(c for c in cuts if a <= c <= b)


def _gl_nodes(domain: Domain, family: TestFamily, y0: float, order: int):
    cuts = _panels(domain, family, y0)
    t0, w0 = leggauss(order)
    nodes, wts = [], []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        if hi - lo <= 0:
            continue
        nodes.append((hi - lo) / 2 * t0 + (hi + lo) / 2)
        wts.append((hi - lo) / 2 * w0)
    return np.concatenate(nodes), np.concatenate(wts)


def _group_sizes(k: int, lam, n: int) -> list[int]:
    if lam is None:
        if n != 1:
            raise ConfigurationError("lambda required for families with several members")
        return [k]
    lamv = lam.as_array() if isinstance(lam, SimplexWeights) else np.asarray(lam, float)
    if len(lamv) != n:
        raise ConfigurationError("lambda length must match the family size")
    sizes = lamv * k
    rounded = np.rint(sizes)
    if np.max(np.abs(sizes - rounded)) > 1e-9:
        raise ConfigurationError(
            f"k*lambda must be integral (got {sizes.tolist()}); round the weights explicitly"
        )
    out = rounded.astype(int)
    if out.sum() != k:
        raise ConfigurationError("rounded group sizes do not sum to k")
    return out.tolist()


def _multiset_orderings(sizes: Sequence[int]):
    """Distinct orderings of the multiset {i repeated sizes[i] times}."""
    labels = []
    for i, s in enumerate(sizes):
        labels.extend([i] * s)

    def rec(remaining):
        if not any(remaining):
            yield ()
            return
        for i, r in enumerate(remaining):
            if r:
                nxt = list(remaining)
                nxt[i] -= 1
                for tail in rec(tuple(nxt)):
                    yield (i,) + tail

    return rec(tuple(sizes))


def _chain_moment(weights_at_nodes: list[np.ndarray], order_labels, gq: np.ndarray,
                  g0: np.ndarray) -> float:
    """Single ordered chain contraction: int prod_j G(y_{j-1}, y_j) f_{label_j}(y_j) dy."""
    acc = None
    for lab in order_labels:
        fw = weights_at_nodes[lab]
        acc = g0 * fw if acc is None else (gq.T @ acc) * fw
    return float(np.sum(acc))


# ---------------------------------------------------------------------------
# mixed moments
# ---------------------------------------------------------------------------

def moment_mixed(k: int, lam, family: TestFamily, p: int, y0: float,
                 method: str = "tensor",
                 opts: Optional[QuadratureOptions] = None) -> MomentValue:
    """E[(1/k!^p) prod_i <phi_i^{2p}, ell>^{k lambda_i}] for integral k*lambda_i.

    `tensor` is deterministic quadrature (chain contraction for p = 1, tensor
    grid with batched DP for p >= 2, budget-capped); `monte_carlo` importance
    samples each coordinate from the density proportional to its member
    weight and reports a standard error.
    """
    opts = opts or QuadratureOptions()
    domain = family.grid.domain
    if domain.dim != 1:
        raise ConfigurationError("moment quadrature is implemented for d = 1 domains")
    domain.check_admissible(p)
    sizes = _group_sizes(k, lam, family.n)
    weight_fns = [lambda y, _i=i: family.evaluate(_i, y) ** (2 * p) for i in range(family.n)]

    if method == "tensor":
        return _moment_tensor(k, sizes, weight_fns, family, p, float(y0), opts)
    if method == "monte_carlo":
        return _moment_mc(k, sizes, weight_fns, family, p, float(y0), opts)
    raise ConfigurationError(f"unknown quadrature method {method!r}")


def _moment_tensor(k, sizes, weight_fns, family, p, y0, opts: QuadratureOptions):
    domain = family.grid.domain
    flags: list[str] = []
    if p == 1:
        t, wq = _gl_nodes(domain, family, y0, opts.order)
        ker = kernel_function(domain)
        gq = ker(t[:, None], t[None, :])
        if opts.cutoff is not None:
            gq = np.minimum(gq, opts.cutoff)
        g0 = ker(np.full_like(t, y0), t)
        if opts.cutoff is not None:
            g0 = np.minimum(g0, opts.cutoff)
        weights_at_nodes = [f(t) * wq for f in weight_fns]
        total, count = 0.0, 0
        for ordering in _multiset_orderings(sizes):
            total += _chain_moment(weights_at_nodes, ordering, gq, g0)
            count += 1
        return MomentValue(total / count, None, "tensor", tuple(flags))

    # p >= 2: genuine tensor enumeration with the node budget
    order = opts.order
    npanels = max(1, len(_panels(domain, family, y0)) - 1)
    while order > 2 and (npanels * order) ** k > opts.node_budget:
        order -= 1
    if order < opts.order:
        flags.append("order_reduced")
    if (npanels * order) ** k > opts.node_budget:
        raise SizeError(
            f"tensor quadrature for k={k}, p={p} exceeds the node budget; use monte_carlo"
        )
    t, wq = _gl_nodes(domain, family, y0, order)
    m = len(t)
    slot_weights = []
    for i, s in enumerate(sizes):
        slot_weights.extend([weight_fns[i](t) * wq] * s)
    idx = np.stack(np.meshgrid(*([np.arange(m)] * k), indexing="ij"), axis=-1).reshape(-1, k)
    pts = t[idx][..., None]
    wts = np.ones(len(idx))
    for j in range(k):
        wts *= slot_weights[j][idx[:, j]]
    total = 0.0
    start = np.full((1, 1), y0)
    for s in range(0, len(pts), opts.mc_batch):
        chunk = pts[s:s + opts.mc_batch]
        allpts = np.concatenate([np.broadcast_to(start, (len(chunk), 1, 1)), chunk], axis=1)
        gmat = _pair_kernel_matrix(allpts, domain, opts.cutoff)
        vals = _phi_k_dp(gmat) ** p
        total += float(np.sum(vals * wts[s:s + opts.mc_batch]))
    return MomentValue(total, None, "tensor", tuple(flags))


def _member_sampler(family: TestFamily, i: int, p: int, resolution: int = 4096):
    """Inverse-CDF sampler for the density proportional to phi_i^{2p} (d = 1)."""
    a, b = family.grid.domain.bounds[0]
    xs = np.linspace(a, b, resolution + 1)
    dens = family.evaluate(i, xs) ** (2 * p)
    cell = np.diff(xs)
    mass = 0.5 * (dens[:-1] + dens[1:]) * cell
    z = float(mass.sum())
    if z <= 0:
        raise ConfigurationError(f"member {i} has zero mass; cannot importance sample")
    cdf = np.concatenate([[0.0], np.cumsum(mass)]) / z
    # strictly increasing knots for interpolation
    keep = np.concatenate([[True], np.diff(cdf) > 0])
    return z, cdf[keep], xs[keep]


def _moment_mc(k, sizes, weight_fns, family, p, y0, opts: QuadratureOptions):
    domain = family.grid.domain
    samplers, zs = [], []
    for i, s in enumerate(sizes):
        z, cdf, xs = _member_sampler(family, i, p)
        samplers.append((cdf, xs))
        zs.append(z)
    scale = float(np.prod([z**s for z, s in zip(zs, sizes)]))
    total, total_sq, ndone = 0.0, 0.0, 0
    root = np.random.SeedSequence(opts.seed)
    n_batches = max(1, math.ceil(opts.mc_samples / opts.mc_batch))
    start = np.full((1, 1), y0)
    for seed in root.spawn(n_batches):
        rng = np.random.default_rng(seed)
        nb = min(opts.mc_batch, opts.mc_samples - ndone)
        if nb <= 0:
            break
        cols = []
        for i, s in enumerate(sizes):
            cdf, xs = samplers[i]
            u = rng.uniform(size=(nb, s))
            cols.append(np.interp(u, cdf, xs))
        pts = np.concatenate(cols, axis=1)[..., None]
        allpts = np.concatenate([np.broadcast_to(start, (nb, 1, 1)), pts], axis=1)
        gmat = _pair_kernel_matrix(allpts, domain, opts.cutoff)
        vals = _phi_k_dp(gmat) ** p
        total += float(np.sum(vals))
        total_sq += float(np.sum(vals**2))
        ndone += nb
    mean = total / ndone
    var = max(total_sq / ndone - mean * mean, 0.0) * ndone / max(ndone - 1, 1)
    return MomentValue(scale * mean, scale * math.sqrt(var / ndone), "monte_carlo")


# ---------------------------------------------------------------------------
# the multinomial assembly
# ---------------------------------------------------------------------------

def _compositions(total: int, parts: int):
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def _multinomial(total: int, parts: Sequence[int]) -> int:
    out = math.factorial(total)
    for q in parts:
        out //= math.factorial(q)
    return out


def _members_identical(family: TestFamily) -> bool:
    first = family.members[0].values
    return all(np.array_equal(m.values, first) for m in family.members[1:])


def moment_sum(k: int, family: TestFamily, p: int, y0: float,
               method: str = "tensor",
               opts: Optional[QuadratureOptions] = None) -> MomentValue:
    """E[(1/k!^p)(sum_i <phi_i^{2p}, ell>^{1/p})^{kp}] by exact multinomial assembly.

    Every mixed moment in the expansion carries exponents k*lambda_i =
    (kp*lambda_i)/p; those are integral for every term only when p = 1 or
    n = 1 (or all members coincide, where the sum collapses to n^{kp} times a
    single moment).  Other combinations are rejected rather than rounded.
    """
    n = family.n
    if n == 1:
        mv = moment_mixed(k, (1.0,), family, p, y0, method, opts)
        return MomentValue(mv.value, mv.stderr, mv.method, mv.flags)
    if _members_identical(family):
        sub = TestFamily((family.members[0],), (family.profiles[0],))
        mv = moment_mixed(k, (1.0,), sub, p, y0, method, opts)
        c = float(n ** (k * p))
        return MomentValue(c * mv.value, None if mv.stderr is None else c * mv.stderr,
                           mv.method, mv.flags + ("identical_members_collapse",))
    if p != 1:
        raise ConfigurationError(
            "moment_sum needs integral k*lambda_i for every multinomial term; "
            "that holds only for p = 1, n = 1, or identical members"
        )
    total, var, flags = 0.0, 0.0, set()
    for comp in _compositions(k * p, n):
        coeff = _multinomial(k * p, comp)
        lam = tuple(c / (k * p) for c in comp)
        mv = moment_mixed(k, lam, family, p, y0, method, opts)
        total += coeff * mv.value
        if mv.stderr is not None:
            var += (coeff * mv.stderr) ** 2
        flags.update(mv.flags)
    return MomentValue(total, math.sqrt(var) if var > 0 else None, method, tuple(sorted(flags)))


def moment_sequence(ks: Sequence[int], family: TestFamily, p: int, y0: float,
                    method: str = "tensor",
                    opts: Optional[QuadratureOptions] = None) -> MomentSequence:
    entries = []
    for k in ks:
        mv = moment_sum(k, family, p, y0, method, opts)
        entries.append(MomentEntry(int(k), None, mv.value, mv.stderr, mv.method))
    return MomentSequence(p, tuple(entries), normalized=True)


# ---------------------------------------------------------------------------
# growth-rate extraction and the Tauberian classifier
# ---------------------------------------------------------------------------

def ratio_estimate(seq: MomentSequence) -> float:
    """Estimate p/theta from the last consecutive normalized-moment ratio.

    The normalized moments grow like (p/theta)^{kp}, so the ratio of
    consecutive entries (with unit k spacing) tends to (p/theta)^p.
    """
    entries = [e for e in seq.entries if e.value > 0 and math.isfinite(e.value)]
    if len(entries) < 2:
        raise ValueError("need at least two positive moments")
    a, b = entries[-2], entries[-1]
    if b.k - a.k != 1:
        raise ValueError("ratio estimate needs consecutive k")
    r = b.value / a.value
    if not seq.normalized:
        r *= math.factorial(a.k) ** seq.p / math.factorial(b.k) ** seq.p
    return r ** (1.0 / seq.p)


def tauber_theta(seq: MomentSequence) -> TauberResult:
    """Invert the moment growth m_k ~ k!^p (p/theta)^{kp} for theta.

    Regresses log(normalized m_k) on k; the slope is p log(p/theta).  The
    verdict compares the implied theta to 1 with a two-standard-error margin;
    unusable input (too few, nonpositive, non-finite moments) is classified
    as inconclusive rather than raising.
    """
    p = seq.p
    pts = []
    for e in seq.entries:
        if e.value is None or not math.isfinite(e.value) or e.value <= 0:
            continue
        z = math.log(e.value)
        if not seq.normalized:
            z -= p * math.lgamma(e.k + 1)
        pts.append((e.k, z))
    if len(pts) < 3:
        return TauberResult(float("nan"), "inconclusive", float("nan"), float("nan"), float("nan"))
    karr = np.array([q[0] for q in pts], float)
    zarr = np.array([q[1] for q in pts], float)
    A = np.vstack([np.ones_like(karr), karr]).T
    coef, residuals, *_ = np.linalg.lstsq(A, zarr, rcond=None)
    intercept, slope = float(coef[0]), float(coef[1])
    dof = len(pts) - 2
    rss = float(residuals[0]) if len(residuals) else float(np.sum((zarr - A @ coef) ** 2))
    sxx = float(np.sum((karr - karr.mean()) ** 2))
    se = math.sqrt(max(rss, 0.0) / max(dof, 1) / sxx)
    theta = p * math.exp(-slope / p)
    boundary = p * math.log(p)    # slope at theta = 1
    margin = 2.0 * se
    if slope + margin < boundary:
        verdict = "finite"
    elif slope - margin > boundary:
        verdict = "infinite"
    else:
        verdict = "inconclusive"
    return TauberResult(theta, verdict, slope, se, intercept)
