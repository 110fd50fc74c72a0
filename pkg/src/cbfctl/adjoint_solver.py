"""Backward-in-time adjoint systems, built by transposing the difference scheme.

The difference scheme advances  S_n v_{n+1} = v_n + dt g_n  with
S_n = I + dt (mu A + alpha + L_n) and frozen slab coefficients (m1_n, m2_n).
The discrete adjoint is *defined* as its algebraic transpose: with terminal
value q_N = 0,

    S_n^T q_n = q_{n+1} + dt h_{n+1},        n = N-1, ..., 0,

which by summation by parts gives the exact discrete duality

    dt sum_{n=0}^{N-1} (g_n, q_n)  =  dt sum_{n=1}^{N} (h_n, v_n)

to solver tolerance at any dt (the identity the cost gradient rests on).
Because S_n^T = I + dt(mu A + alpha + L_n^T) with L_n^T the transposed pair
operator, the same recursion read backward is a consistent O(dt)
discretization of the continuous adjoint PDE

    -dq/dt + mu A q - B(m1, q) + P[sum_j grad((m2)_j) q_j] + alpha q
        + (beta/2) P{(|m1|^2+|m2|^2) q}
        + (beta/2) P{((m1+m2).q)(m1+m2)}  =  P h,      q(T) = 0.

Cube-regularized variant: a term delta P{|q|^2 q} is added with the frozen
coefficient |p_old|^2 of the previous backward step, keeping every step a
linear solve.  The solve runs in reversed time (p(t) = q(T - t)) as a plain
forward loop.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .fields import (
    Grid,
    SpectralField,
    Trajectory,
    check_aligned,
    inner_product,
    norms,
    random_field,
)
from .operators import (
    OperatorParams,
    PairStencil,
    apply_C,
    l4_norm4,
    speed_squared,
    weighted_l2_sq,
)
from .state_solver import StateRun, _dinv, _l2, picard_solve, solve_difference


def time_reverse(traj: Trajectory) -> Trajectory:
    """Sample i -> sample nt - i; an involution."""
    return Trajectory(traj.grid, traj.t_end, tuple(reversed(traj.samples)))


def step_adjoint(
    p_n: SpectralField,
    m1_rev: SpectralField,
    m2_rev: SpectralField,
    h_n: SpectralField,
    dt: float,
    delta: float,
    params: OperatorParams,
    *,
    picard_tol: float = 1e-11,
    max_iters: int = 200,
    step: int | None = None,
) -> SpectralField:
    """One reversed-time adjoint step.

    m1_rev, m2_rev are the coefficient fields at the step's *target* reversed
    time (the transposed slab operator), h_n the reversed source at the old
    time.  For delta = 0 the step operator is exactly the transpose of the
    difference step on that slab; delta > 0 adds delta P{|p_n|^2 p_{n+1}}.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if delta < 0:
        raise ValueError("delta must be >= 0")
    grid = p_n.grid
    stencil = PairStencil(m1_rev, m2_rev, params)
    extra = delta * speed_squared(p_n) if delta > 0 else None

    def napply(x: SpectralField) -> SpectralField:
        return stencil.apply_transpose(x, extra_weight=extra)

    rhs = SpectralField(grid, p_n.coeffs + dt * h_n.coeffs)
    x, _ = picard_solve(grid, _dinv(grid, params, dt), rhs, napply, dt, picard_tol, max_iters, step)
    return x


@dataclass
class AdjointReport:
    times: np.ndarray
    q_l2: np.ndarray
    q_v: np.ndarray
    q_l4: np.ndarray
    energy_K: float = math.nan
    energy_margin: float = math.nan
    kappa: float = math.nan
    duality_delta_form: float = math.nan
    duality_limit_form: float = math.nan
    picard_iters_max: int = 0


@dataclass
class AdjointRun:
    """A solved backward run q^delta with its inputs and report.

    solution[nt] is exactly zero (terminal condition); solution[0] is the last
    computed backward step, reported without interpolation.
    """

    params: OperatorParams
    delta: float
    coeffs: tuple[Trajectory, Trajectory]
    rhs: Trajectory
    solution: Trajectory
    report: AdjointReport
    state_K: tuple[float, float] | None = None

    @property
    def grid(self) -> Grid:
        return self.solution.grid

    @property
    def dt(self) -> float:
        return self.solution.dt


def solve_adjoint(
    coeffs: tuple[Trajectory, Trajectory],
    h: Trajectory,
    delta: float,
    params: OperatorParams,
    *,
    kappa: float | None = None,
    picard_tol: float = 1e-11,
    max_iters: int = 200,
    state_K: tuple[float, float] | None = None,
) -> AdjointRun:
    """Backward solve of the (regularized) adjoint system via time reversal.

    The report carries the margin of the adjoint energy bound

        sup_t ||q||^2 + 2 mu (1-kappa) int ||q||_V^2 + 2 delta int ||q||_4^4
          + (beta - 1/(2 mu kappa)) int [ |||m1| q||^2 + |||m2| q||^2 ]
            <=  e^T int ||h||^2  =: K,

    with left-endpoint integrals (NaN if the coefficient hypothesis fails).
    """
    m1, m2 = coeffs
    check_aligned(m1, m2)
    check_aligned(m1, h)
    if delta < 0:
        raise ValueError("delta must be >= 0")
    if kappa is None:
        kappa = params.kappa_star()

    grid, dt, nt = m1.grid, m1.dt, m1.nt
    m1r, m2r, hr = time_reverse(m1), time_reverse(m2), time_reverse(h)
    dinv = _dinv(grid, params, dt)

    p = SpectralField(grid, np.zeros((grid.d,) + grid.shape, dtype=np.complex128))
    rev_samples = [p]
    iters_max = 0
    for j in range(nt):
        stencil = PairStencil(m1r[j + 1], m2r[j + 1], params)
        extra = delta * speed_squared(p) if delta > 0 else None

        def napply(x: SpectralField, _s=stencil, _e=extra) -> SpectralField:
            return _s.apply_transpose(x, extra_weight=_e)

        rhs = SpectralField(grid, p.coeffs + dt * hr[j].coeffs)
        p, its = picard_solve(grid, dinv, rhs, napply, dt, picard_tol, max_iters, step=j)
        iters_max = max(iters_max, its)
        rev_samples.append(p)

    solution = time_reverse(Trajectory(grid, m1.t_end, tuple(rev_samples)))
    q_norms = [norms(s) for s in solution.samples]
    report = AdjointReport(
        times=solution.times,
        q_l2=np.array([nm.l2 for nm in q_norms]),
        q_v=np.array([nm.v for nm in q_norms]),
        q_l4=np.array([nm.l4 for nm in q_norms]),
        kappa=kappa,
        picard_iters_max=iters_max,
    )
    run = AdjointRun(
        params=params,
        delta=delta,
        coeffs=coeffs,
        rhs=h,
        solution=solution,
        report=report,
        state_K=state_K,
    )
    report.energy_K, report.energy_margin = _adjoint_energy(run, kappa)
    return run


def _adjoint_energy(run: AdjointRun, kappa: float) -> tuple[float, float]:
    params = run.params
    m1, m2, h, q = run.coeffs[0], run.coeffs[1], run.rhs, run.solution
    dt, nt, T = q.dt, q.nt, q.t_end
    K = math.exp(T) * dt * sum(inner_product(h[n], h[n]) for n in range(nt))
    if not params.hypothesis_holds(kappa):
        warnings.warn("coefficient hypothesis fails; adjoint energy margin undefined", RuntimeWarning)
        return K, math.nan
    r = run.report
    sup_q2 = float(np.max(r.q_l2**2))
    int_qv = dt * float(np.sum(r.q_v[:-1] ** 2))
    int_q4 = dt * float(np.sum(r.q_l4[:-1] ** 4))
    int_w = 0.0
    for n in range(nt):
        w1 = speed_squared(m1[n])
        w2 = speed_squared(m2[n])
        int_w += dt * (weighted_l2_sq(w1, q[n]) + weighted_l2_sq(w2, q[n]))
    coeff = params.beta - 1.0 / (2.0 * params.mu * kappa)
    lhs = sup_q2 + 2.0 * params.mu * (1.0 - kappa) * int_qv + 2.0 * run.delta * int_q4 + coeff * int_w
    return K, K - lhs


class DualityReport(NamedTuple):
    delta_form: float
    limit_form: float
    scale: float


def duality_residual(
    adj: AdjointRun,
    run1: StateRun,
    run2: StateRun,
    *,
    difference: Trajectory | None = None,
) -> DualityReport:
    """Discrete residuals of the duality identities.

    delta_form pairs the adjoint with the paired difference solution v:

        | dt sum_{n<N} (f1_n - f2_n, q_n)
          + delta dt sum_{n<N} <C(q_n), v_n>  -  dt sum_{n=1..N} (h_n, v_n) |.

    The linear pairings use the endpoints the transpose construction makes
    exact, so at delta = 0 the residual is solver-tolerance small; at
    delta > 0 the cubic term is discretized at left endpoints and the
    residual is O(dt).  limit_form replaces v by the sampled m1 - m2 and
    drops the delta term (O(dt) always).
    """
    if adj.coeffs[0] is not run1.solution or adj.coeffs[1] is not run2.solution:
        raise ValueError("adjoint was not built from the coefficient trajectories of these runs")
    v = difference if difference is not None else solve_difference(run1, run2).trajectory
    check_aligned(v, adj.solution)
    q, h = adj.solution, adj.rhs
    dt, nt = q.dt, q.nt

    lhs = rhs = cubic = 0.0
    scale = 0.0
    for n in range(nt):
        gn = run1.forcing[n] - run2.forcing[n]
        lhs += dt * inner_product(gn, q[n])
        scale += dt * _l2(gn) * _l2(q[n])
        if adj.delta > 0:
            cubic += adj.delta * dt * inner_product(apply_C(q[n]), v[n])
    limit = lhs
    for n in range(1, nt + 1):
        rhs += dt * inner_product(h[n], v[n])
        limit -= dt * inner_product(h[n], run1.solution[n] - run2.solution[n])
        scale += dt * _l2(h[n]) * _l2(v[n])
    report = DualityReport(
        delta_form=abs(lhs + cubic - rhs),
        limit_form=abs(limit),
        scale=max(scale + abs(cubic), 1e-300),
    )
    adj.report.duality_delta_form = report.delta_form
    adj.report.duality_limit_form = report.limit_form
    return report


class DerivativeBound(NamedTuple):
    margin: float
    sampled_norm: float
    bound: float
    k_hat: float
    delta_term: float


def derivative_bound_check(
    adj: AdjointRun,
    *,
    n_probes: int = 64,
    rng: np.random.Generator | None = None,
) -> DerivativeBound:
    """Sampled check of the time-derivative dual-norm estimate

        || dq/dt ||_{V' + L^{4/3}}  <=  K_hat + delta^{1/4} (K/2)^{3/4}.

    The dual norm is approximated from below by a fixed bank of random test
    fields with smooth time profiles, so a nonnegative margin is expected but
    the check is approximate by construction (warning, not failure).  K_hat
    uses the a-priori constants of the coefficient runs when available and
    otherwise their directly computed L4-in-time norms.
    """
    params, q, h = adj.params, adj.solution, adj.rhs
    kappa = adj.report.kappa
    dt, nt, T = q.dt, q.nt, q.t_end
    K = adj.report.energy_K
    coeff4 = params.beta - 1.0 / (2.0 * params.mu * kappa)
    if coeff4 <= 0 or not (0 < kappa < 1):
        warnings.warn("coefficient hypothesis fails; derivative bound undefined", RuntimeWarning)
        return DerivativeBound(math.nan, math.nan, math.nan, math.nan, math.nan)

    int_h2 = dt * sum(inner_product(h[n], h[n]) for n in range(nt))
    if adj.state_K is not None:
        amps = [(Ki / (2.0 * params.beta)) ** 0.25 for Ki in adj.state_K]
    else:
        amps = [
            (dt * sum(l4_norm4(m[n]) for n in range(nt))) ** 0.25
            for m in adj.coeffs
        ]
    k_hat = (
        math.sqrt(params.mu * K / (2.0 * (1.0 - kappa)))
        + math.sqrt(params.alpha * K / 2.0)
        + 2.0 * math.sqrt(K / coeff4)
        + math.sqrt(int_h2)
        + 1.5 * params.beta * math.sqrt(K / coeff4) * (amps[0] + amps[1])
    )
    delta_term = adj.delta ** 0.25 * (K / 2.0) ** 0.75
    bound = k_hat + delta_term

    if rng is None:
        rng = np.random.default_rng(0)
    grid = q.grid
    sampled = 0.0
    for _ in range(n_probes):
        phi = random_field(grid, rng, l2=1.0)
        freq = rng.uniform(0.5, 3.0) * math.pi / T
        phase = rng.uniform(0.0, 2.0 * math.pi)
        prof = np.cos(freq * q.times + phase)
        pairing = sum(
            float(prof[n]) * inner_product(q[n + 1] - q[n], phi) for n in range(nt)
        )
        nm = norms(phi)
        l2v = math.sqrt(dt * float(np.sum(prof[:-1] ** 2))) * nm.v
        l4l4 = (dt * float(np.sum(np.abs(prof[:-1]) ** 4))) ** 0.25 * nm.l4
        denom = max(l2v, l4l4)
        if denom > 0:
            sampled = max(sampled, abs(pairing) / denom)
    return DerivativeBound(bound - sampled, sampled, bound, k_hat, delta_term)


def solve_adjoint_noc(
    state: StateRun,
    m_d: Trajectory,
    params: OperatorParams | None = None,
    *,
    kappa: float | None = None,
    picard_tol: float = 1e-11,
    max_iters: int = 200,
) -> AdjointRun:
    """Optimality adjoint at a candidate state: coefficients collapse to
    (m, m), delta = 0, source h = m - m_d."""
    if params is None:
        params = state.params
    h = state.solution - m_d
    K = state.report.energy_bound_K
    return solve_adjoint(
        (state.solution, state.solution),
        h,
        0.0,
        params,
        kappa=kappa,
        picard_tol=picard_tol,
        max_iters=max_iters,
        state_K=(K, K),
    )


def delta_sweep(
    coeffs: tuple[Trajectory, Trajectory],
    h: Trajectory,
    deltas: Sequence[float],
    params: OperatorParams,
    *,
    kappa: float | None = None,
    picard_tol: float = 1e-11,
    max_iters: int = 200,
) -> tuple[AdjointRun, list[tuple[float, float]]]:
    """Distance ||q^delta - q^0||_{L2(0,T;H)} over a delta ladder.

    Returns the delta = 0 run and (delta, distance) pairs in the given order;
    the distances decrease monotonically as delta -> 0.
    """
    base = solve_adjoint(coeffs, h, 0.0, params, kappa=kappa, picard_tol=picard_tol, max_iters=max_iters)
    out = []
    for delta in deltas:
        run = solve_adjoint(coeffs, h, float(delta), params, kappa=kappa, picard_tol=picard_tol, max_iters=max_iters)
        diff = run.solution - base.solution
        dist = math.sqrt(max(diff.dt * sum(inner_product(diff[n], diff[n]) for n in range(diff.nt)), 0.0))
        out.append((float(delta), dist))
    return base, out
