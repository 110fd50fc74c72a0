"""Velocity-tracking control: cost, projected gradient descent, optimality checks.

The reduced problem is

    min_{f in ball}  J(f) = 1/2 int ||m[f] - m_d||_2^2 dt + lambda/2 int ||f||_2^2 dt,

with the admissible set concretized as the closed L2(0,T;H) ball of radius R
(closed-form projection: radial rescaling).  The discrete cost uses the
right-endpoint rule for the tracking term (the initial state does not depend
on f) and the left-endpoint rule for the control term (those are the samples
the scheme consumes); with these endpoints the adjoint-based gradient

    grad J(f)(t_n) = q(t_n) + lambda f(t_n)

is exactly the duality image of the discrete tracking derivative, so its
finite-difference defect comes only from the O(dt) gap between the difference
scheme and the true tangent of the nonlinear stepping map.

First-order optimality is certified two ways: the variational inequality
residual min_v (v - f*, q + lambda f*) over an admissible probe bank, and the
finite-increment condition evaluated along f_rho = f + rho (u - f) with the
intermediate adjoint built from the coefficient pair (m[f], m[f_rho]).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .fields import (
    SpectralField,
    Trajectory,
    check_aligned,
    inner_product,
    random_trajectory,
    time_l2_inner,
    time_l2_norm,
)
from .operators import OperatorParams
from .state_solver import StateRun, solve_state
from .adjoint_solver import AdjointRun, solve_adjoint, solve_adjoint_noc


class LineSearchFailure(RuntimeError):
    """Armijo backtracking exhausted its budget without sufficient decrease."""


@dataclass(frozen=True)
class ControlProblem:
    """All data of one tracking problem on a fixed grid and time axis."""

    params: OperatorParams
    lam: float
    m0: SpectralField
    target: Trajectory
    radius: float
    picard_tol: float = 1e-11
    picard_max_iters: int = 200

    def __post_init__(self) -> None:
        if self.lam <= 0:
            raise ValueError("lambda must be > 0")
        if self.radius <= 0:
            raise ValueError("radius must be > 0")
        if self.m0.grid != self.target.grid:
            raise ValueError("target and initial condition live on different grids")

    @property
    def t_end(self) -> float:
        return self.target.t_end

    @property
    def nt(self) -> int:
        return self.target.nt

    def solve(self, f: Trajectory) -> StateRun:
        check_aligned(f, self.target)
        return solve_state(
            self.m0, f, self.params, picard_tol=self.picard_tol, max_iters=self.picard_max_iters
        )


def cost(f: Trajectory, m: Trajectory, target: Trajectory, lam: float) -> float:
    """Discrete tracking cost; tracking right-endpoint, control left-endpoint."""
    check_aligned(f, m)
    check_aligned(m, target)
    dt, nt = m.dt, m.nt
    track = 0.0
    for n in range(1, nt + 1):
        e = m[n] - target[n]
        track += dt * inner_product(e, e)
    ctrl = 0.0
    for n in range(nt):
        ctrl += dt * inner_product(f[n], f[n])
    return 0.5 * track + 0.5 * lam * ctrl


def gradient(q_noc: Trajectory, f: Trajectory, lam: float) -> Trajectory:
    """Pointwise-in-time cost gradient q(t) + lambda f(t)."""
    check_aligned(q_noc, f)
    return Trajectory(f.grid, f.t_end, tuple(q + lam * fn for q, fn in zip(q_noc.samples, f.samples)))


def project_admissible(f: Trajectory, radius: float) -> Trajectory:
    """Projection onto the L2(0,T;H) ball: rescale when outside, else identity.

    Idempotent and nonexpansive.
    """
    if radius <= 0:
        raise ValueError("radius must be > 0")
    nrm = time_l2_norm(f)
    if nrm <= radius:
        return f
    return f * (radius / nrm)


class TraceRow(NamedTuple):
    iteration: int
    cost: float
    grad_norm: float
    step: float
    vi_residual: float


@dataclass
class OptimizeTrace:
    rows: list[TraceRow] = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    message: str = ""


class OptimizeResult(NamedTuple):
    control: Trajectory
    state: StateRun
    trace: OptimizeTrace


def optimize(
    problem: ControlProblem,
    f_init: Trajectory,
    *,
    max_iters: int = 100,
    tol: float = 1e-8,
    armijo_c: float = 1e-4,
    shrink: float = 0.5,
    max_backtracks: int = 60,
) -> OptimizeResult:
    """Projected gradient descent with Armijo backtracking on the true cost.

    The trial step starts at 1/lambda (warm-started from twice the previous
    accepted step on later iterations); accepted steps never increase J.
    Terminates when the projected-gradient norm
    ||f - P(f - (1/lambda) g)|| * lambda falls below tol, or at max_iters.
    """
    f = project_admissible(f_init, problem.radius)
    run = problem.solve(f)
    J = cost(f, run.solution, problem.target, problem.lam)
    s_ref = 1.0 / problem.lam
    s_prev = s_ref
    trace = OptimizeTrace()

    for it in range(max_iters + 1):
        adj = solve_adjoint_noc(run, problem.target, picard_tol=problem.picard_tol, max_iters=problem.picard_max_iters)
        g = gradient(adj.solution, f, problem.lam)
        probe = project_admissible(f - s_ref * g, problem.radius)
        pg = time_l2_norm(f - probe) / s_ref
        vi_probe = time_l2_inner(probe - f, g)
        if pg <= tol:
            trace.rows.append(TraceRow(it, J, pg, 0.0, vi_probe))
            trace.converged = True
            trace.iterations = it
            trace.message = f"projected gradient norm {pg:.3e} <= tol at iteration {it}"
            return OptimizeResult(f, run, trace)
        if it == max_iters:
            trace.rows.append(TraceRow(it, J, pg, 0.0, vi_probe))
            trace.iterations = it
            trace.message = f"max_iters reached with projected gradient norm {pg:.3e}"
            return OptimizeResult(f, run, trace)

        s = s_ref if it == 0 else min(s_ref, 2.0 * s_prev)
        accepted = False
        for _ in range(max_backtracks):
            cand = project_admissible(f - s * g, problem.radius)
            run_c = problem.solve(cand)
            J_c = cost(cand, run_c.solution, problem.target, problem.lam)
            decrease = time_l2_inner(g, f - cand)
            if J_c <= J - armijo_c * decrease:
                accepted = True
                break
            s *= shrink
        if not accepted:
            raise LineSearchFailure(
                f"no sufficient decrease after {max_backtracks} backtracks at iteration {it}"
            )
        trace.rows.append(TraceRow(it, J, pg, s, vi_probe))
        f, run, J, s_prev = cand, run_c, J_c, s

    raise AssertionError("unreachable")


def make_probe_bank(
    f_star: Trajectory,
    radius: float,
    count: int,
    rng: np.random.Generator,
    *,
    grad: Trajectory | None = None,
    step: float = 1.0,
) -> list[Trajectory]:
    """Admissible probe bank: random interior points plus +-R-normalized
    extreme directions, optionally with the projected descent probe."""
    grid, t_end, nt = f_star.grid, f_star.t_end, f_star.nt
    probes: list[Trajectory] = []
    if grad is not None:
        probes.append(project_admissible(f_star - step * grad, radius))
    while len(probes) < count:
        u = random_trajectory(grid, t_end, nt, rng, l2=1.0)
        nrm = time_l2_norm(u)
        if nrm == 0.0:
            continue
        kind = len(probes) % 3
        if kind == 0:
            probes.append(project_admissible(u * (radius * rng.uniform(0.1, 0.9) / nrm), radius))
        elif kind == 1:
            probes.append(u * (radius / nrm))
        else:
            probes.append(u * (-radius / nrm))
    return probes[:count]


def vi_residual(
    f_star: Trajectory,
    q_noc: Trajectory,
    lam: float,
    probes: Sequence[Trajectory],
) -> float:
    """min over probes of int (v - f*, q + lambda f*) dt; nonnegative (up to
    tolerance) exactly when f* is stationary for the iteration's gradient map."""
    g = gradient(q_noc, f_star, lam)
    return min(time_l2_inner(v - f_star, g) for v in probes)


def gradient_scale(problem: ControlProblem) -> float:
    """A-priori magnitude of q + lambda f over the admissible set.

    lambda R bounds the penalty part; the adjoint part is bounded through its
    energy estimate with the worst tracking source m - m_d replaced by the
    problem data (target plus the reachable-state level K^(1/2)):
    ||q||_{L2(0,T;H)} <= sqrt(T e^T int ||h||^2).  Deliberately independent of
    the candidate point, so VI/IOC tolerances do not collapse at an optimum.
    """
    T = problem.t_end
    dt, nt = problem.target.dt, problem.target.nt
    int_md = dt * sum(inner_product(problem.target[n], problem.target[n]) for n in range(nt))
    # sup_t ||m||^2 <= (||m0||^2 + int ||f||^2) e^T <= (||m0||^2 + R^2) e^T
    k_state = (inner_product(problem.m0, problem.m0) + problem.radius**2) * math.exp(T)
    int_h = 2.0 * T * k_state + 2.0 * int_md
    return problem.lam * problem.radius + math.sqrt(T * math.exp(T) * int_h)


def vi_scale(f_star: Trajectory, probes: Sequence[Trajectory], problem: ControlProblem) -> float:
    """Reference magnitude for VI/IOC tolerances: the probe spread times the
    a-priori gradient scale."""
    spread = max(time_l2_norm(v - f_star) for v in probes)
    return max(spread * gradient_scale(problem), 1e-30)


class IOCPoint(NamedTuple):
    rho: float
    residual: float
    q_distance: float
    adjoint_margin: float


def ioc_residual(
    f_tilde: Trajectory,
    u_probe: Trajectory,
    rho: float,
    problem: ControlProblem,
    *,
    base_run: StateRun | None = None,
) -> float:
    """Finite-increment optimality residual along f_rho = f + rho (u - f):

        int (u - f, q_rho + lambda f) dt
          + rho/2 int ||(m_rho - m)/rho||^2 dt
          + rho lambda / 2 int ||u - f||^2 dt,

    where q_rho solves the intermediate adjoint with coefficients (m, m_rho)
    and source m - m_d.  Nonnegative (up to discretization and optimizer
    tolerance) at an optimum, for every admissible u and 0 < rho < 1.
    """
    return _ioc_point(f_tilde, u_probe, rho, problem, base_run=base_run, q_base=None).residual


def ioc_ladder(
    f_tilde: Trajectory,
    u_probe: Trajectory,
    rhos: Sequence[float],
    problem: ControlProblem,
    *,
    base_run: StateRun | None = None,
) -> list[IOCPoint]:
    """IOC residuals over a rho ladder, with ||q_rho - q|| against the
    collapsed optimality adjoint (decreasing as rho -> 0)."""
    if base_run is None:
        base_run = problem.solve(f_tilde)
    q_base = solve_adjoint_noc(base_run, problem.target, picard_tol=problem.picard_tol)
    return [
        _ioc_point(f_tilde, u_probe, rho, problem, base_run=base_run, q_base=q_base)
        for rho in rhos
    ]


def _ioc_point(
    f_tilde: Trajectory,
    u_probe: Trajectory,
    rho: float,
    problem: ControlProblem,
    *,
    base_run: StateRun | None,
    q_base: AdjointRun | None,
) -> IOCPoint:
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    check_aligned(f_tilde, u_probe)
    if base_run is None:
        base_run = problem.solve(f_tilde)
    du = u_probe - f_tilde
    f_rho = f_tilde + rho * du
    run_rho = problem.solve(f_rho)
    h = base_run.solution - problem.target
    q_rho = solve_adjoint(
        (base_run.solution, run_rho.solution),
        h,
        0.0,
        problem.params,
        picard_tol=problem.picard_tol,
        max_iters=problem.picard_max_iters,
        state_K=(base_run.report.energy_bound_K, run_rho.report.energy_bound_K),
    )
    dt, nt = f_tilde.dt, f_tilde.nt
    term1 = 0.0
    for n in range(nt):
        term1 += dt * inner_product(du[n], q_rho.solution[n] + problem.lam * f_tilde[n])
    z = (run_rho.solution - base_run.solution) * (1.0 / rho)
    term2 = 0.0
    for n in range(1, nt + 1):
        term2 += dt * inner_product(z[n], z[n])
    term2 *= 0.5 * rho
    term3 = 0.5 * rho * problem.lam * sum(dt * inner_product(du[n], du[n]) for n in range(nt))
    residual = term1 + term2 + term3

    q_dist = math.nan
    if q_base is not None:
        diff = q_rho.solution - q_base.solution
        q_dist = math.sqrt(max(diff.dt * sum(inner_product(diff[n], diff[n]) for n in range(diff.nt)), 0.0))
    return IOCPoint(rho, residual, q_dist, q_rho.report.energy_margin)
