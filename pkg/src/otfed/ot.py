"""Discrete optimal transport between neuron sets.

Two solvers share one plan type: an exact transportation-LP solve (used as
the ground-truth route and for small instances) and a log-domain Sinkhorn
iteration (the fast entropic route the simulator defaults to). Plans are
post-processed with the column/row normalizations the alignment procedures
need.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import ConfigError, MarginalError, SolverError
from .linalg import Matrix, Vector, frobenius_dot

# marginal feasibility tolerance for finished plans
TOL_MARGINAL = 1e-6
# cell guard for the LP route; larger instances must use sinkhorn mode
MAX_EXACT_CELLS = 256


def uniform_marginal(n: int) -> Vector:
    """Uniform distribution over n atoms."""
    if n < 1:
        raise MarginalError(f"marginal needs at least one atom, got {n}")
    return np.full(n, 1.0 / n)


@dataclass(frozen=True)
class OtConfig:
    """Solver settings.

    epsilon = None resolves to 0.05 * mean(cost) at solve time; an explicit
    value is used as-is. max_iters / convergence_tol only apply to the
    sinkhorn mode. Degenerate neuron-alignment instances converge at an
    O(1/k) rate, so the default budget favours speed and relies on the
    final polytope rounding for marginal feasibility; raise max_iters when
    the entropic objective itself must be tight.
    """

    mode: str = "sinkhorn"
    epsilon: float | None = None
    max_iters: int = 300
    convergence_tol: float = 1e-6

    def __post_init__(self):
        if self.mode not in ("exact", "sinkhorn"):
            raise ConfigError(f"unknown OT mode {self.mode!r}")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.convergence_tol > 0:
            raise ConfigError(
                f"convergence_tol must be positive, got {self.convergence_tol}"
            )

    def resolve_epsilon(self, cost: Matrix) -> float:
        if self.epsilon is not None:
            return self.epsilon
        base = float(np.mean(np.abs(cost)))
        # zero cost: every feasible plan is optimal, scale is arbitrary
        return 0.05 * base if base > 0 else 1.0


@dataclass(frozen=True)
class TransportPlan:
    """A coupling between a source and a target neuron set.

    `col_violation` is the worst absolute column-sum deviation left after the
    final row rescale (zero for the exact solver up to LP tolerance).
    """

    plan: Matrix
    row_marginal: Vector
    col_marginal: Vector
    col_violation: float = 0.0
    iterations: int = 0
    converged: bool = True

    @property
    def shape(self) -> tuple[int, int]:
        return self.plan.shape

    def objective(self, cost: Matrix) -> float:
        return frobenius_dot(cost, self.plan)

    def validate(self, tol: float = TOL_MARGINAL) -> None:
        """Assert nonnegativity and marginal feasibility within `tol`."""
        p = self.plan
        if p.ndim != 2:
            raise MarginalError(f"plan must be 2-D, got ndim={p.ndim}")
        if np.min(p) < -tol:
            raise MarginalError(f"plan has negative mass {np.min(p):g}")
        row_err = float(np.max(np.abs(p.sum(axis=1) - self.row_marginal)))
        col_err = float(np.max(np.abs(p.sum(axis=0) - self.col_marginal)))
        if row_err > tol:
            raise MarginalError(f"row marginal violation {row_err:g} exceeds {tol:g}")
        if col_err > tol:
            raise MarginalError(f"column marginal violation {col_err:g} exceeds {tol:g}")


def _check_instance(cost: Matrix, mu: Vector, nu: Vector) -> None:
    if cost.ndim != 2:
        raise MarginalError(f"cost must be 2-D, got ndim={cost.ndim}")
    n, m = cost.shape
    if mu.shape != (n,) or nu.shape != (m,):
        raise MarginalError(
            f"marginal sizes {mu.shape}/{nu.shape} do not match cost {cost.shape}"
        )
    if np.min(mu) < 0 or np.min(nu) < 0:
        raise MarginalError("marginals must be nonnegative")
    if abs(float(mu.sum()) - 1.0) > 1e-9 or abs(float(nu.sum()) - 1.0) > 1e-9:
        raise MarginalError(
            f"marginals must sum to 1 within 1e-9, got {mu.sum()!r} and {nu.sum()!r}"
        )
    if not np.isfinite(cost).all():
        raise SolverError("cost matrix contains non-finite entries")


def solve_exact(
    cost: Matrix, mu: Vector, nu: Vector, max_cells: int = MAX_EXACT_CELLS
) -> TransportPlan:
    """Exact transportation LP: min <C, T> over couplings of (mu, nu).

    Solved with the HiGHS LP backend; the vertex solution is deterministic
    for identical inputs. Instances above `max_cells` plan entries are
    refused (use sinkhorn mode instead).
    """
    _check_instance(cost, mu, nu)
    n, m = cost.shape
    if n * m > max_cells:
        raise SolverError(
            f"exact solver limited to {max_cells} plan cells, got {n}x{m}; "
            "use sinkhorn mode for larger instances"
        )
    # equality constraints: n row sums then m column sums (one is redundant,
    # HiGHS handles the degeneracy)
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate([mu, nu])
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise SolverError(f"exact transport LP failed: {res.message}")
    plan = np.maximum(res.x.reshape(n, m), 0.0)
    out = TransportPlan(
        plan=plan,
        row_marginal=mu,
        col_marginal=nu,
        col_violation=float(np.max(np.abs(plan.sum(axis=0) - nu))),
        iterations=0,
        converged=True,
    )
    out.validate()
    return out


def solve_sinkhorn(cost: Matrix, mu: Vector, nu: Vector, cfg: OtConfig) -> TransportPlan:
    """Entropic transport via Sinkhorn iterations in the log domain.

    Dual potentials are updated with log-sum-exp so small epsilon stays
    stable. Iteration stops once the row-marginal violation (columns are
    exact right after the column update) drops below cfg.convergence_tol or
    at max_iters; either way the plan is then rounded onto the transport
    polytope (two capped diagonal scalings plus a rank-one correction), so
    both marginals hold to machine precision even when the iteration was
    cut short. Degenerate instances with near-duplicate rows plateau
    slightly above very tight tolerances (the dual has an almost-flat
    direction), which is why the default tolerance is a loose 1e-6.
    Identical inputs and config produce bit-identical plans.
    """
    if cfg.mode != "sinkhorn":
        raise ConfigError(f"solve_sinkhorn called with mode {cfg.mode!r}")
    _check_instance(cost, mu, nu)
    eps = cfg.resolve_epsilon(cost)
    log_mu = np.log(mu) if np.min(mu) > 0 else None
    log_nu = np.log(nu) if np.min(nu) > 0 else None
    if log_mu is None or log_nu is None:
        raise MarginalError("sinkhorn requires strictly positive marginals")

    f = np.zeros(cost.shape[0])
    g = np.zeros(cost.shape[1])
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        scaled = (f[:, None] + g[None, :] - cost) / eps
        f = f + eps * (log_mu - _logsumexp(scaled, axis=1))
        scaled = (f[:, None] + g[None, :] - cost) / eps
        g = g + eps * (log_nu - _logsumexp(scaled, axis=0))
        if not (np.isfinite(f).all() and np.isfinite(g).all()):
            raise SolverError(
                f"sinkhorn potentials diverged at iteration {it}; "
                f"epsilon={eps:g} is too small for this cost scale, increase it"
            )
        plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
        row_violation = float(np.max(np.abs(plan.sum(axis=1) - mu)))
        if row_violation < cfg.convergence_tol:
            converged = True
            break

    plan = _round_to_polytope(np.exp((f[:, None] + g[None, :] - cost) / eps), mu, nu)
    col_violation = float(np.max(np.abs(plan.sum(axis=0) - nu)))
    return TransportPlan(
        plan=plan,
        row_marginal=mu,
        col_marginal=nu,
        col_violation=col_violation,
        iterations=it,
        converged=converged,
    )


def _round_to_polytope(plan: Matrix, mu: Vector, nu: Vector) -> Matrix:
    """Project a nonnegative matrix onto the couplings of (mu, nu).

    Scale rows down to at most their row marginal, then columns likewise;
    the remaining row and column deficits have equal total mass, so a
    rank-one outer-product correction restores both marginals exactly.
    """
    row_scale = np.minimum(mu / np.maximum(plan.sum(axis=1), 1e-300), 1.0)
    plan = plan * row_scale[:, None]
    col_scale = np.minimum(nu / np.maximum(plan.sum(axis=0), 1e-300), 1.0)
    plan = plan * col_scale[None, :]
    err_r = mu - plan.sum(axis=1)
    err_c = nu - plan.sum(axis=0)
    missing = float(err_r.sum())
    if missing > 0:
        plan = plan + np.outer(err_r, err_c) / missing
    return plan


def solve(cost: Matrix, mu: Vector, nu: Vector, cfg: OtConfig) -> TransportPlan:
    """Dispatch to the solver selected by cfg.mode."""
    if cfg.mode == "exact":
        return solve_exact(cost, mu, nu)
    return solve_sinkhorn(cost, mu, nu, cfg)


def _logsumexp(a: Matrix, axis: int) -> Vector:
    peak = np.max(a, axis=axis, keepdims=True)
    out = peak.squeeze(axis) + np.log(np.sum(np.exp(a - peak), axis=axis))
    return out


def _plan_matrix(plan) -> Matrix:
    return plan.plan if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)


def column_normalize(plan) -> Matrix:
    """Rescale so every column sums to 1 (each target neuron's incoming mass).

    Accepts a TransportPlan or a bare matrix. A column with no mass means a
    target neuron was never matched and is an error.
    """
    p = _plan_matrix(plan)
    sums = p.sum(axis=0)
    bad = np.flatnonzero(sums <= 0.0)
    if bad.size:
        raise MarginalError(f"zero column in plan: target neuron {int(bad[0])} receives no mass")
    return p / sums[None, :]


def row_normalize(plan) -> Matrix:
    """Rescale so every row sums to 1 (each source neuron's outgoing mass)."""
    p = _plan_matrix(plan)
    sums = p.sum(axis=1)
    bad = np.flatnonzero(sums <= 0.0)
    if bad.size:
        raise MarginalError(f"zero row in plan: source neuron {int(bad[0])} sends no mass")
    return p / sums[:, None]


def identity_plan(n: int) -> TransportPlan:
    """The diagonal coupling of two aligned n-atom uniform marginals."""
    mu = uniform_marginal(n)
    return TransportPlan(
        plan=np.diag(mu).copy(),
        row_marginal=mu,
        col_marginal=mu.copy(),
        col_violation=0.0,
        iterations=0,
        converged=True,
    )
