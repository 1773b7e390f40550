"""Solvers for the variational formulas and their duality/consistency checks.

Quantities solved here, all on the discrete grid/alphabet level:

* theta(phi): inf of the Dirichlet energy (p/2)||grad psi||^2 under the
  constraint sum_i ||phi_i psi||_{2p}^2 = 1.  Damped fixed-point iteration of
  the stationarity map psi <- A(psi^{2p-1} h), with a projected-gradient
  fallback; the exact tail exponent of the stretched exponential moments.
* rho(phi): sup of the Green energy of mixtures sum_i sqrt(lambda_i)
  g_i^{2p-1} phi_i, by alternating maximization; satisfies rho * theta = p.
* gcal(mu): entropic pair-measure functional, minimized by symmetric
  iterative scaling (the optimal pair measure is diag(a) K diag(a)).
* hfrak / big_w: the entropy representation of the moment growth rate,
  solved by block-coordinate descent on the partition alphabet.
* pinsky_l: the sign-test functional whose sign decides finiteness of the
  exponential moments.

None of the minimizers is known to be unique; every solver multi-starts and
reports the best value together with the per-start spread.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, ConvergenceError, DegenerateMemberError
from .functional import (
    DensityMeasure,
    Field,
    PairMeasure,
    SimplexWeights,
    TestFamily,
    constraint_norm,
    dirichlet_energy,
    lp_norm,
    measure_energy,
    member_norm,
)
from .green import Grid, GreenOperator, Partition, green_cell_average

__all__ = [
    "SolverOptions",
    "ThetaSolution",
    "RhoSolution",
    "GcalSolution",
    "HfrakSolution",
    "BigWSolution",
    "PinskySolution",
    "solve_theta",
    "theta_residual",
    "theta_objective",
    "theta_gradient",
    "solve_rho",
    "rho_residual",
    "gcal",
    "gcal_bounds",
    "hfrak",
    "big_w",
    "pinsky_l",
    "minimizer_transport",
]

LAMBDA_FLOOR = 1e-12


@dataclass(frozen=True)
class SolverOptions:
    max_iter: int = 600
    damping: float = 0.5
    value_tol: float = 1e-10
    residual_tol: float = 1e-6
    n_starts: int = 8
    seed: int = 0
    gcal_tol: float = 1e-10
    gcal_max_iter: int = 50_000
    grad_max_iter: int = 400

    def starts(self) -> list[np.random.Generator]:
        root = np.random.SeedSequence(self.seed)
        return [np.random.default_rng(s) for s in root.spawn(max(1, self.n_starts))]


@dataclass(frozen=True)
class ThetaSolution:
    theta: float
    psi: Field
    iterations: int
    residual: float
    converged: bool
    start_values: tuple[float, ...] = ()
    residual_trace: tuple[float, ...] = ()

    @property
    def spread(self) -> float:
        if not self.start_values:
            return 0.0
        return max(self.start_values) - min(self.start_values)


@dataclass(frozen=True)
class RhoSolution:
    rho: float
    weights: SimplexWeights
    g: tuple[Field, ...]
    iterations: int
    residual: float
    converged: bool
    start_values: tuple[float, ...] = ()
    collapsed: tuple[int, ...] = ()


@dataclass(frozen=True)
class GcalSolution:
    value: float
    nu: Optional[PairMeasure]
    marginal_residual: float
    iterations: int
    scaling: Optional[np.ndarray] = None


@dataclass(frozen=True)
class HfrakSolution:
    value: float
    mus: tuple[DensityMeasure, ...]
    iterations: int
    converged: bool


@dataclass(frozen=True)
class BigWSolution:
    value: float
    weights: SimplexWeights
    iterations: int


@dataclass(frozen=True)
class PinskySolution:
    value: float
    psi: Field
    iterations: int
    start_values: tuple[float, ...] = ()

    @property
    def verdict(self) -> str:
        if self.value < 0:
            return "finite"
        if self.value > 0:
            return "infinite"
        return "critical"


# ---------------------------------------------------------------------------
# theta
# ---------------------------------------------------------------------------

def _member_norms(psi: np.ndarray, family: TestFamily, p: int) -> np.ndarray:
    w = family.grid.weights
    return np.array(
        [np.sum(w * (m.values * psi) ** (2 * p)) ** (1.0 / (2 * p)) for m in family.members]
    )


def _el_weight(norms: np.ndarray, family: TestFamily, p: int) -> np.ndarray:
    """h = sum_i ||phi_i psi||_{2p}^{2-2p} phi_i^{2p} from the stationarity system."""
    out = np.zeros(family.grid.n_nodes)
    for ni, m in zip(norms, family.members):
        if ni > 0:
            out += ni ** (2 - 2 * p) * m.values ** (2 * p)
    return out


def _normalize_constraint(psi: np.ndarray, family: TestFamily, p: int) -> np.ndarray:
    c = constraint_norm(Field(family.grid, psi), family, p)
    if c <= 0:
        raise DegenerateMemberError("candidate vanishes on every member support")
    return psi / math.sqrt(c)


def theta_objective(psi: Field, family: TestFamily, p: int) -> float:
    """Scale-invariant quotient (p/2)||grad psi||^2 / sum_i ||phi_i psi||_{2p}^2."""
    return dirichlet_energy(psi, p) / constraint_norm(psi, family, p)


def theta_gradient(psi: Field, family: TestFamily, p: int) -> np.ndarray:
    """Analytic gradient of theta_objective w.r.t. node values (zero on boundary)."""
    grid = psi.grid
    w = grid.weights
    v = psi.values
    energy = dirichlet_energy(psi, p)
    cnorm = constraint_norm(psi, family, p)
    # d energy = p (-1/2 Delta_h psi) * w ; d cnorm = 2 sum_i S_i^{(1-p)/p} phi^{2p} psi^{2p-1} w
    op = _operator_for(grid)
    denergy = p * op.apply_generator(v) * w
    dnorm = np.zeros_like(v)
    for m in family.members:
        s = float(np.sum(w * (m.values * v) ** (2 * p)))
        if s > 0:
            dnorm += s ** ((1.0 - p) / p) * m.values ** (2 * p) * v ** (2 * p - 1)
    dnorm *= 2.0 * w
    return (denergy - (energy / cnorm) * dnorm) / cnorm


_OPERATORS: dict[int, GreenOperator] = {}


def _operator_for(grid: Grid) -> GreenOperator:
    """One factorized operator per grid object (solvers share it)."""
    key = id(grid)
    op = _OPERATORS.get(key)
    if op is None or op.grid is not grid:
        op = GreenOperator(grid)
        _OPERATORS[key] = op
    return op


def _theta_residual_values(psi: np.ndarray, theta: float, family: TestFamily, p: int) -> float:
    op = _operator_for(family.grid)
    w = family.grid.weights
    norms = _member_norms(psi, family, p)
    if np.all(norms == 0):
        return float("inf")
    h = _el_weight(norms, family, p)
    rhs = theta * psi ** (2 * p - 1) * h
    lhs = p * op.apply_generator(psi)   # -(p/2) Delta_h psi
    num = math.sqrt(float(np.sum(w * (lhs - rhs) ** 2)))
    den = math.sqrt(float(np.sum(w * rhs**2)))
    return num / den if den > 0 else float("inf")


def _theta_fixed_point(family, p, rng, opts: SolverOptions):
    grid = family.grid
    op = _operator_for(grid)
    psi = np.zeros(grid.n_nodes)
    psi[grid.interior] = rng.uniform(0.5, 1.5, len(grid.interior))
    psi = _normalize_constraint(psi, family, p)
    theta = dirichlet_energy(Field(grid, psi), p)
    trace = []
    for it in range(1, opts.max_iter + 1):
        norms = _member_norms(psi, family, p)
        h = _el_weight(norms, family, p)
        cand = op.apply_values(psi ** (2 * p - 1) * h)
        np.maximum(cand, 0.0, out=cand)
        cand = _normalize_constraint(cand, family, p)
        psi = _normalize_constraint((1 - opts.damping) * psi + opts.damping * cand, family, p)
        new_theta = dirichlet_energy(Field(grid, psi), p)
        res = _theta_residual_values(psi, new_theta, family, p)
        trace.append(res)
        done = abs(new_theta - theta) <= opts.value_tol * abs(new_theta) and res <= opts.residual_tol
        theta = new_theta
        if done:
            return theta, psi, it, res, True, trace
    return theta, psi, opts.max_iter, trace[-1], False, trace


def _theta_projected_gradient(psi0, family, p, opts: SolverOptions):
    """Backtracking projected gradient on the scale-invariant quotient."""
    grid = family.grid
    psi = _normalize_constraint(np.maximum(psi0, 0.0), family, p)
    f = theta_objective(Field(grid, psi), family, p)
    step = 1.0 / f
    for it in range(1, opts.grad_max_iter + 1):
        g = theta_gradient(Field(grid, psi), family, p)
        gnorm = float(np.max(np.abs(g)))
        if gnorm == 0:
            break
        improved = False
        while step > 1e-18:
            cand = np.maximum(psi - step * g, 0.0)
            cand[grid.boundary_mask] = 0.0
            try:
                cand = _normalize_constraint(cand, family, p)
            except DegenerateMemberError:
                step /= 2
                continue
            fc = theta_objective(Field(grid, cand), family, p)
            if fc < f:
                psi, f = cand, fc
                step *= 1.5
                improved = True
                break
            step /= 2
        res = _theta_residual_values(psi, f, family, p)
        if not improved or res <= opts.residual_tol:
            return f, psi, it, res, res <= opts.residual_tol
    res = _theta_residual_values(psi, f, family, p)
    return f, psi, opts.grad_max_iter, res, res <= opts.residual_tol


def solve_theta(family: TestFamily, p: int, grid: Optional[Grid] = None,
                opts: Optional[SolverOptions] = None) -> ThetaSolution:
    """Minimize the constrained Dirichlet energy; multi-start, best value wins.

    Raises ConvergenceError (carrying the best iterate) if no start meets the
    residual tolerance even after the projected-gradient fallback.
    """
    opts = opts or SolverOptions()
    grid = grid or family.grid
    if grid != family.grid:
        raise ConfigurationError("family and grid disagree")
    grid.domain.check_admissible(p)
    if all(np.all(m.values == 0) for m in family.members):
        raise DegenerateMemberError("every family member is identically zero")
    best = None
    values = []
    for rng in opts.starts():
        theta, psi, its, res, ok, trace = _theta_fixed_point(family, p, rng, opts)
        if not ok:
            theta, psi, extra, res, ok = _theta_projected_gradient(psi, family, p, opts)
            its += extra
            trace = trace + [res]
        values.append(theta)
        sol = ThetaSolution(theta, Field(grid, psi), its, res, ok, residual_trace=tuple(trace))
        if best is None or (sol.converged and not best.converged) or (
            sol.converged == best.converged and sol.theta < best.theta
        ):
            best = sol
    best = replace(best, start_values=tuple(values))
    if not best.converged:
        raise ConvergenceError(
            f"theta solver stalled at residual {best.residual:.3e}", best=best
        )
    return best


def theta_residual(sol: ThetaSolution, family: TestFamily, p: int) -> float:
    """Stationarity defect ||(p/2) Delta psi + theta psi^{2p-1} h|| / ||theta psi^{2p-1} h||."""
    return _theta_residual_values(sol.psi.values, sol.theta, family, p)


# ---------------------------------------------------------------------------
# rho
# ---------------------------------------------------------------------------

def _rho_residual_values(lam, gs, family, p, rho) -> float:
    op = _operator_for(family.grid)
    w = family.grid.weights
    hval = np.zeros(family.grid.n_nodes)
    for li, gi, m in zip(lam, gs, family.members):
        hval += math.sqrt(li) * gi ** (2 * p - 1) * m.values
    u = op.apply_values(hval)
    worst = 0.0
    for li, gi, m in zip(lam, gs, family.members):
        target = m.values * u
        den = math.sqrt(float(np.sum(w * target**2)))
        if den == 0:
            return float("inf")
        num = math.sqrt(float(np.sum(w * (math.sqrt(li) * rho * gi - target) ** 2)))
        worst = max(worst, num / den)
    return worst


def _rho_single(family, p, rng, opts: SolverOptions):
    grid = family.grid
    op = _operator_for(grid)
    w = grid.weights
    n = family.n
    lam = np.full(n, 1.0 / n)
    gs = []
    for m in family.members:
        g = m.values * rng.uniform(0.5, 1.5, grid.n_nodes)
        nrm = lp_norm(Field(grid, g), 2 * p)
        if nrm == 0:
            raise DegenerateMemberError("family member with empty support")
        gs.append(g / nrm)
    rho = -np.inf
    for it in range(1, opts.max_iter + 1):
        hval = np.zeros(grid.n_nodes)
        for li, gi, m in zip(lam, gs, family.members):
            hval += math.sqrt(li) * gi ** (2 * p - 1) * m.values
        u = op.apply_values(hval)
        beta = np.zeros(n)
        new_gs = []
        for i, m in enumerate(family.members):
            gi = np.maximum(m.values * u, 0.0)
            nrm = lp_norm(Field(grid, gi), 2 * p)
            if nrm == 0:
                raise DegenerateMemberError(f"member {i} vanishes against the current mixture")
            gi /= nrm
            new_gs.append(gi)
            beta[i] = float(np.sum(w * gi ** (2 * p - 1) * m.values * u))
        gs = new_gs
        lam = np.maximum(beta**2, LAMBDA_FLOOR)
        lam /= lam.sum()
        hval = np.zeros(grid.n_nodes)
        for li, gi, m in zip(lam, gs, family.members):
            hval += math.sqrt(li) * gi ** (2 * p - 1) * m.values
        new_rho = float(np.sum(w * hval * op.apply_values(hval)))
        if abs(new_rho - rho) <= opts.value_tol * abs(new_rho):
            res = _rho_residual_values(lam, gs, family, p, new_rho)
            if res <= opts.residual_tol:
                return new_rho, lam, gs, it, res, True
        rho = new_rho
    res = _rho_residual_values(lam, gs, family, p, rho)
    return rho, lam, gs, opts.max_iter, res, res <= opts.residual_tol


def solve_rho(family: TestFamily, p: int, grid: Optional[Grid] = None,
              opts: Optional[SolverOptions] = None) -> RhoSolution:
    """Alternating maximization of the mixture Green energy."""
    opts = opts or SolverOptions()
    grid = grid or family.grid
    if grid != family.grid:
        raise ConfigurationError("family and grid disagree")
    grid.domain.check_admissible(p)
    best = None
    values = []
    for rng in opts.starts():
        rho, lam, gs, its, res, ok = _rho_single(family, p, rng, opts)
        values.append(rho)
        sol = RhoSolution(
            rho,
            SimplexWeights(tuple(lam)),
            tuple(Field(grid, g) for g in gs),
            its,
            res,
            ok,
            collapsed=tuple(int(i) for i in np.flatnonzero(lam <= 10 * LAMBDA_FLOOR)),
        )
        if best is None or (sol.converged and not best.converged) or (
            sol.converged == best.converged and sol.rho > best.rho
        ):
            best = sol
    best = replace(best, start_values=tuple(values))
    if not best.converged:
        raise ConvergenceError(f"rho solver stalled at residual {best.residual:.3e}", best=best)
    return best


def rho_residual(sol: RhoSolution, family: TestFamily, p: int) -> float:
    lam = sol.weights.as_array()
    gs = [g.values for g in sol.g]
    return _rho_residual_values(lam, gs, family, p, sol.rho)


# ---------------------------------------------------------------------------
# gcal: entropic pair-measure functional
# ---------------------------------------------------------------------------

def _kernel_matrix(kernel, mu: DensityMeasure) -> np.ndarray:
    if isinstance(kernel, GreenOperator):
        if not isinstance(mu.support, Grid):
            raise ValueError("grid kernel with non-grid measure")
        return kernel.kernel_table
    return np.asarray(kernel, float)


def gcal(mu: DensityMeasure, kernel, opts: Optional[SolverOptions] = None) -> GcalSolution:
    """Minimize H(nu | mu x mu) - <nu, log K> over pair measures with both
    marginals mu, by symmetric iterative scaling.

    The optimum has the form nu = diag(a) K' diag(a) with K' = K * (mu x mu),
    so the value is 2 <mu, log a>.  Returns +inf (no nu) when the kernel
    vanishes so broadly that the marginal constraint cannot be met.
    """
    opts = opts or SolverOptions()
    K = _kernel_matrix(kernel, mu)
    m_full = mu.masses
    if K.shape != (len(m_full), len(m_full)):
        raise ValueError("kernel table and measure sizes differ")
    pos = np.flatnonzero(m_full > 0)
    m = m_full[pos]
    A = K[np.ix_(pos, pos)] * np.outer(m, m)
    if np.any(~np.isfinite(A)):
        raise ValueError("kernel table must be finite (cut off the diagonal first)")
    if np.any((A > 0).sum(axis=1) == 0):
        return GcalSolution(float("inf"), None, float("inf"), 0)
    a = np.ones(len(m))
    res = float("inf")
    for it in range(1, opts.gcal_max_iter + 1):
        Aa = A @ a
        if np.any(Aa <= 0):
            return GcalSolution(float("inf"), None, float("inf"), it)
        a = np.sqrt(a * m / Aa)
        res = float(np.max(np.abs(a * (A @ a) - m)))
        if res <= opts.gcal_tol:
            break
    else:
        raise ConvergenceError(
            f"pair-measure scaling stalled at marginal residual {res:.3e}",
            best=GcalSolution(2.0 * float(np.sum(m * np.log(a))), None, res, opts.gcal_max_iter),
        )
    nu_small = (a[:, None] * a[None, :]) * A
    nu = np.zeros_like(K)
    nu[np.ix_(pos, pos)] = nu_small
    value = 2.0 * float(np.sum(m * np.log(a)))
    scaling = np.zeros(len(m_full))
    scaling[pos] = a
    return GcalSolution(value, PairMeasure(nu, mu.support), res, it, scaling)


def gcal_bounds(u: DensityMeasure, upper_table: np.ndarray, lower_table: np.ndarray,
                opts: Optional[SolverOptions] = None) -> tuple[GcalSolution, GcalSolution]:
    """The functional under the bracketing kernels: returns (upper-kernel value,
    lower-kernel value); the first is the smaller whenever the cutoff dominates."""
    return gcal(u, upper_table, opts), gcal(u, lower_table, opts)


# ---------------------------------------------------------------------------
# hfrak and big_w: the entropy representation
# ---------------------------------------------------------------------------

def _cell_masses(values: np.ndarray, grid: Grid, partition: Partition) -> np.ndarray:
    w = grid.weights
    return np.array([float(np.sum(w[c] * values[c])) for c in partition.cells])


def hfrak(family: TestFamily, lam: Union[SimplexWeights, Sequence[float]], p: int,
          partition: Partition, op: Optional[GreenOperator] = None,
          opts: Optional[SolverOptions] = None,
          seed_psi: Optional[Field] = None,
          seed_mus: Optional[Sequence[np.ndarray]] = None) -> HfrakSolution:
    """-inf over (mu_1..mu_n) of sum_i lambda_i H(mu_i | phi_i^{2p}) + p gcal(mixture).

    Block-coordinate descent on the partition alphabet: the pair-measure
    subproblem is solved by `gcal`, whose scaling vector is the potential for
    the closed-form entropic update mu_i ∝ beta_i a^{-2p}.  When `seed_psi`
    is given (a theta-minimizer candidate) the descent starts from the
    transported measures mu_i ∝ (psi phi_i)^{2p}.
    """
    opts = opts or SolverOptions()
    if not isinstance(lam, SimplexWeights):
        lam = SimplexWeights(tuple(lam))
    lamv = lam.as_array()
    grid = family.grid
    op = op or _operator_for(grid)
    K = green_cell_average(op, partition)
    betas = []
    for m in family.members:
        b = _cell_masses(m.values ** (2 * p), grid, partition)
        if b.sum() <= 0:
            raise DegenerateMemberError("member has no mass on the partition")
        betas.append(b)
    if seed_mus is not None:
        mus = [np.asarray(s, float) / np.sum(s) for s in seed_mus]
    elif seed_psi is not None:
        mus = []
        for m, b in zip(family.members, betas):
            t = _cell_masses((seed_psi.values * m.values) ** (2 * p), grid, partition)
            mus.append(t / t.sum() if t.sum() > 0 else b / b.sum())
    else:
        mus = [b / b.sum() for b in betas]

    def objective(mus):
        mixture = sum(l * m for l, m in zip(lamv, mus))
        sol = gcal(DensityMeasure(mixture, partition), K, opts)
        ent = 0.0
        for li, mi, bi in zip(lamv, mus, betas):
            sel = mi > 0
            if np.any(bi[sel] <= 0):
                return float("inf"), sol
            ent += li * float(np.sum(mi[sel] * np.log(mi[sel] / bi[sel])))
        return ent + p * sol.value, sol

    value, sol = objective(mus)
    best_value, best_mus = value, [m.copy() for m in mus]
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        loga = np.where(sol.scaling > 0, np.log(np.maximum(sol.scaling, 1e-300)), 0.0)
        new_mus = []
        for mi, bi in zip(mus, betas):
            t = bi * np.exp(-2 * p * loga)
            t /= t.sum()
            nm = mi ** (1 - opts.damping) * t ** opts.damping
            nm /= nm.sum()
            new_mus.append(nm)
        mus = new_mus
        new_value, sol = objective(mus)
        if new_value < best_value:
            best_value, best_mus = new_value, [m.copy() for m in mus]
        if abs(new_value - value) <= opts.value_tol * max(1.0, abs(new_value)):
            converged = True
            value = new_value
            break
        value = new_value
    return HfrakSolution(
        -best_value,
        tuple(DensityMeasure(m, partition) for m in best_mus),
        it,
        converged,
    )


def _project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the unit simplex."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    rho_idx = np.flatnonzero(u - css / np.arange(1, len(v) + 1) > 0)[-1]
    tau = css[rho_idx] / (rho_idx + 1)
    return np.maximum(v - tau, 0.0)


def big_w(family: TestFamily, p: int, partition: Partition,
          op: Optional[GreenOperator] = None,
          opts: Optional[SolverOptions] = None,
          seed_psi: Optional[Field] = None) -> BigWSolution:
    """Minimize p I(lambda) - hfrak(phi, lambda) over the simplex.

    Projected gradient with central finite differences; hfrak evaluations are
    warm-started from the previous inner minimizers.
    """
    opts = opts or SolverOptions()
    n = family.n
    op = op or _operator_for(family.grid)
    warm: dict[str, object] = {"mus": None}

    def J(lamv: np.ndarray) -> float:
        lamv = np.maximum(lamv, LAMBDA_FLOOR)
        lamv = lamv / lamv.sum()
        sw = SimplexWeights(tuple(lamv))
        sol = hfrak(family, sw, p, partition, op, opts,
                    seed_psi=seed_psi, seed_mus=warm["mus"])
        warm["mus"] = [m.masses for m in sol.mus]
        return p * sw.entropy() - sol.value

    if n == 1:
        val = J(np.array([1.0]))
        return BigWSolution(-val, SimplexWeights((1.0,)), 1)

    lam = np.full(n, 1.0 / n)
    val = J(lam)
    step = 0.1
    eps = 1e-4
    it = 0
    for it in range(1, opts.grad_max_iter + 1):
        grad = np.zeros(n)
        for i in range(n):
            e = np.zeros(n)
            e[i] = eps
            grad[i] = (J(_project_simplex(lam + e)) - J(_project_simplex(lam - e))) / (2 * eps)
        grad -= grad.mean()   # tangent component on the simplex
        gnorm = float(np.max(np.abs(grad)))
        if gnorm < 1e-10:
            break
        moved = False
        while step > 1e-12:
            cand = _project_simplex(lam - step * grad)
            cv = J(cand)
            if cv < val - 1e-14:
                lam, val = cand, cv
                step *= 1.6
                moved = True
                break
            step /= 2
        if not moved or (gnorm * step < 1e-10):
            break
    return BigWSolution(-val, SimplexWeights(tuple(lam)), it)


# ---------------------------------------------------------------------------
# the sign test
# ---------------------------------------------------------------------------

def pinsky_l(family: TestFamily, p: int, grid: Optional[Grid] = None,
             opts: Optional[SolverOptions] = None) -> PinskySolution:
    """sup { sum_i ||phi_i psi||_{2p}^2 - (p/2)||grad psi||^2 : ||psi||_{2p} = 1 }.

    Projected gradient ascent with renormalization; the sign of the value is
    the finiteness verdict of the exponential moments.
    """
    opts = opts or SolverOptions()
    grid = grid or family.grid
    grid.domain.check_admissible(p)
    op = _operator_for(grid)
    w = grid.weights

    def normalize(v):
        nrm = lp_norm(Field(grid, v), 2 * p)
        if nrm == 0:
            raise DegenerateMemberError("candidate identically zero")
        return v / nrm

    def value_grad(v):
        f = Field(grid, v)
        val = constraint_norm(f, family, p) - dirichlet_energy(f, p)
        g = np.zeros_like(v)
        for m in family.members:
            s = float(np.sum(w * (m.values * v) ** (2 * p)))
            if s > 0:
                g += s ** ((1.0 - p) / p) * m.values ** (2 * p) * v ** (2 * p - 1)
        g = 2.0 * g * w - p * op.apply_generator(v) * w
        return val, g

    best_val, best_psi, best_it = -np.inf, None, 0
    values = []
    for rng in opts.starts():
        psi = np.zeros(grid.n_nodes)
        psi[grid.interior] = rng.uniform(0.5, 1.5, len(grid.interior))
        psi = normalize(psi)
        val, _ = value_grad(psi)
        step = 0.5
        it = 0
        for it in range(1, opts.grad_max_iter + 1):
            _, g = value_grad(psi)
            moved = False
            while step > 1e-16:
                cand = np.maximum(psi + step * g, 0.0)
                cand[grid.boundary_mask] = 0.0
                cand = normalize(cand)
                cv, _ = value_grad(cand)
                if cv > val + 1e-15 * abs(val):
                    psi, val = cand, cv
                    step *= 1.5
                    moved = True
                    break
                step /= 2
            if not moved:
                break
        values.append(val)
        if val > best_val:
            best_val, best_psi, best_it = val, psi, it
    return PinskySolution(best_val, Field(grid, best_psi), best_it, tuple(values))


# ---------------------------------------------------------------------------
# transport of minimizers between the formulations
# ---------------------------------------------------------------------------

def minimizer_transport(psi: Field, family: TestFamily, p: int):
    """Map a theta-minimizer candidate to (lambda, g_i, mu_i).

    lambda_i = ||psi phi_i||_{2p}^2, g_i = psi phi_i / ||psi phi_i||_{2p},
    mu_i has density psi^{2p} phi_i^{2p} / lambda_i^p.
    """
    grid = psi.grid
    lam, gs, mus = [], [], []
    for i, m in enumerate(family.members):
        nrm = member_norm(psi, m, p)
        if nrm == 0:
            raise DegenerateMemberError(f"||psi phi_{i}|| = 0: member degenerate on the minimizer")
        lam.append(nrm**2)
        gs.append(Field(grid, psi.values * m.values / nrm))
        density = (psi.values * m.values) ** (2 * p) / nrm ** (2 * p)
        mus.append(DensityMeasure(density * grid.weights, grid))
    return SimplexWeights(tuple(lam)), gs, mus
