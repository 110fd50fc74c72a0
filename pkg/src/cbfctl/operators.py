"""Spatial operators of the damped Navier-Stokes system and their transposes.

All nonlinear terms are evaluated pseudo-spectrally on the padded 2n grid
(see fields.Grid), so the classical identities hold to round-off rather than
to discretization accuracy:

* b(p, q, q) = 0 and b(p, q, r) = -b(p, r, q)  for retained, projected fields,
* <A u, u> = ||grad u||_2^2,
* <C(p), p> = ||p||_4^4  with  C(p) = P(|p|^2 p),
* <C(p) - C(q), p - q> >= 1/4 ||p - q||_4^4   (cubic monotonicity).

The difference system for v = m1 - m2 applies the linear-in-v operator

    L(v) = B(m1, v) + B(v, m2)
         + (beta/2) P{ (|m1|^2 + |m2|^2) v }
         + (beta/2) P{ ((m1 + m2) . v) (m1 + m2) },

and the backward-in-time systems apply its algebraic transpose

    L^T(q) = -B(m1, q) + P{ sum_j grad((m2)_j) q_j }  + same Forchheimer part,

the Forchheimer part being self-adjoint.  PairStencil below evaluates both
from one set of frozen coefficient transforms; it is the inner kernel of the
time steppers, and the exactness of apply/apply_transpose as mutual
transposes is what the discrete duality identity rests on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import Grid, SpectralField, _check_same_grid, inner_product, norms


@dataclass(frozen=True)
class OperatorParams:
    """Coefficients of the damped system: viscosity mu, linear drag alpha,
    cubic drag beta, all strictly positive (alpha >= 1e-12)."""

    mu: float
    alpha: float
    beta: float

    def __post_init__(self) -> None:
        if self.mu <= 0:
            raise ValueError("mu must be > 0")
        if self.alpha < 1e-12:
            raise ValueError("alpha must be >= 1e-12")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")

    def hypothesis_holds(self, kappa: float) -> bool:
        """2*beta*mu > 1/kappa for the supplied kappa in (0, 1)."""
        return 0.0 < kappa < 1.0 and 2.0 * self.beta * self.mu > 1.0 / kappa

    def hypothesis_feasible(self) -> bool:
        """Some admissible kappa exists; equivalent to 2*beta*mu > 1."""
        return 2.0 * self.beta * self.mu > 1.0

    def kappa_star(self) -> float:
        """Default kappa: midpoint of (1/(2 beta mu), 1), clamped to (0, 1)."""
        k = 0.5 * (1.0 / (2.0 * self.beta * self.mu) + 1.0)
        return min(max(k, 1e-9), 1.0 - 1e-9)

    def wellposed(self) -> bool:
        """Weaker condition 2*beta*mu >= 1 used by the a-priori estimate."""
        return 2.0 * self.beta * self.mu >= 1.0


def apply_A(u: SpectralField) -> SpectralField:
    """Stokes operator: coefficientwise multiplication by |k|^2."""
    return SpectralField(u.grid, u.grid.k_sq * u.coeffs)


def a_dual_norm(u: SpectralField) -> float:
    """Dual (V') norm of A u, evaluated spectrally; equals the V norm of u."""
    g = u.grid
    au = g.k_sq * u.coeffs
    sq = np.sum(np.abs(au) ** 2, axis=0) / g.k_sq_safe
    return float(np.sqrt(np.sum(sq) * g.volume))


def b_dual_norm(u: SpectralField) -> float:
    """Dual (V') norm of the projected self-convection B(u) = P (u.grad) u."""
    g = u.grid
    bu = apply_B(u, u).coeffs
    sq = np.sum(np.abs(bu) ** 2, axis=0) / g.k_sq_safe
    return float(np.sqrt(np.sum(sq) * g.volume))


def trilinear_b(p: SpectralField, q: SpectralField, r: SpectralField) -> float:
    """b(p, q, r) = integral of (p . grad) q . r, exact quadrature."""
    _check_same_grid(p, q)
    _check_same_grid(p, r)
    g = p.grid
    pv = g.to_physical(p.coeffs)
    gq = g.grad_physical(q.coeffs)
    rv = g.to_physical(r.coeffs)
    conv = np.einsum("i...,ij...->j...", pv, gq)
    return float(np.sum(conv * rv) * g.quad_weight)


def apply_B(p: SpectralField, q: SpectralField) -> SpectralField:
    """Projected convection B(p, q) = P (p . grad) q."""
    _check_same_grid(p, q)
    g = p.grid
    pv = g.to_physical(p.coeffs)
    gq = g.grad_physical(q.coeffs)
    conv = np.einsum("i...,ij...->j...", pv, gq)
    return SpectralField(g, g.project_coeffs(g.from_physical(conv)))


def apply_C(p: SpectralField) -> SpectralField:
    """Cubic damping C(p) = P(|p|^2 p); padded grid keeps it alias-free."""
    g = p.grid
    pv = g.to_physical(p.coeffs)
    mag2 = np.sum(pv**2, axis=0)
    return SpectralField(g, g.project_coeffs(g.from_physical(mag2 * pv)))


def monotonicity_gap(p: SpectralField, q: SpectralField) -> float:
    """<C(p) - C(q), p - q> - 1/4 ||p - q||_4^4, nonnegative up to round-off."""
    _check_same_grid(p, q)
    g = p.grid
    pv = g.to_physical(p.coeffs)
    qv = g.to_physical(q.coeffs)
    dv = pv - qv
    cubic = np.sum(pv**2, axis=0) * pv - np.sum(qv**2, axis=0) * qv
    pairing = float(np.sum(cubic * dv) * g.quad_weight)
    d4 = float(np.sum(np.sum(dv**2, axis=0) ** 2) * g.quad_weight)
    return pairing - 0.25 * d4


def adjoint_convection(m1: SpectralField, m2: SpectralField, q: SpectralField) -> SpectralField:
    """Transposed convection of the difference system.

    Returns -B(m1, q) + P{ sum_j grad((m2)_j) q_j }; for every test field w

        <adjoint_convection(m1, m2, q), w> = b(m1, w, q) + b(w, m2, q),

    i.e. the transpose of  v -> B(m1, v) + B(v, m2).
    """
    _check_same_grid(m1, q)
    _check_same_grid(m2, q)
    g = q.grid
    m1v = g.to_physical(m1.coeffs)
    gq = g.grad_physical(q.coeffs)
    qv = g.to_physical(q.coeffs)
    gm2 = g.grad_physical(m2.coeffs)
    out = -np.einsum("i...,ij...->j...", m1v, gq) + np.einsum("ij...,j...->i...", gm2, qv)
    return SpectralField(g, g.project_coeffs(g.from_physical(out)))


def adjoint_forchheimer(m1: SpectralField, m2: SpectralField, q: SpectralField, beta: float) -> SpectralField:
    """Self-adjoint Forchheimer coupling shared by the difference and adjoint
    systems:

        (beta/2) P{ (|m1|^2 + |m2|^2) q } + (beta/2) P{ ((m1+m2) . q) (m1+m2) }.

    At m1 = m2 = m it collapses to beta P{|m|^2 q} + 2 beta P{(m . q) m}, and
    applied to m1 - m2 it reproduces beta (C(m1) - C(m2)) identically.
    """
    _check_same_grid(m1, q)
    _check_same_grid(m2, q)
    g = q.grid
    m1v = g.to_physical(m1.coeffs)
    m2v = g.to_physical(m2.coeffs)
    qv = g.to_physical(q.coeffs)
    w = np.sum(m1v**2, axis=0) + np.sum(m2v**2, axis=0)
    s = m1v + m2v
    out = 0.5 * beta * (w * qv + np.sum(s * qv, axis=0) * s)
    return SpectralField(g, g.project_coeffs(g.from_physical(out)))


class PairStencil:
    """Frozen-coefficient spatial operator of the difference/adjoint systems
    on one time slab, with the coefficient transforms shared between calls.

    apply() and apply_transpose() are exact algebraic transposes of each other
    on the retained divergence-free space (the quadrature pairing of each term
    is symmetric/alternating by construction).
    """

    def __init__(self, m1: SpectralField, m2: SpectralField, params: OperatorParams):
        _check_same_grid(m1, m2)
        g = m1.grid
        self.grid = g
        self.beta = params.beta
        self._m1v = g.to_physical(m1.coeffs)
        self._gm2 = g.grad_physical(m2.coeffs)
        m2v = g.to_physical(m2.coeffs)
        self._w = np.sum(self._m1v**2, axis=0) + np.sum(m2v**2, axis=0)
        self._s = self._m1v + m2v

    def _forch(self, qv: np.ndarray) -> np.ndarray:
        return 0.5 * self.beta * (self._w * qv + np.sum(self._s * qv, axis=0) * self._s)

    def apply(self, v: SpectralField, extra_weight: np.ndarray | None = None) -> SpectralField:
        """B(m1, v) + B(v, m2) + Forchheimer(v) [+ extra_weight * v pointwise]."""
        g = self.grid
        vv = g.to_physical(v.coeffs)
        gv = g.grad_physical(v.coeffs)
        out = np.einsum("i...,ij...->j...", self._m1v, gv)
        out += np.einsum("i...,ij...->j...", vv, self._gm2)
        out += self._forch(vv)
        if extra_weight is not None:
            out += extra_weight * vv
        return SpectralField(g, g.project_coeffs(g.from_physical(out)))

    def apply_transpose(self, q: SpectralField, extra_weight: np.ndarray | None = None) -> SpectralField:
        """-B(m1, q) + P{sum_j grad((m2)_j) q_j} + Forchheimer(q) [+ weight]."""
        g = self.grid
        qv = g.to_physical(q.coeffs)
        gq = g.grad_physical(q.coeffs)
        out = -np.einsum("i...,ij...->j...", self._m1v, gq)
        out += np.einsum("ij...,j...->i...", self._gm2, qv)
        out += self._forch(qv)
        if extra_weight is not None:
            out += extra_weight * qv
        return SpectralField(g, g.project_coeffs(g.from_physical(out)))


class StateStencil:
    """Frozen-coefficient implicit part of one state step:
    x -> B(m_ref, x) + beta P{|m_ref|^2 x}."""

    def __init__(self, m_ref: SpectralField, params: OperatorParams):
        g = m_ref.grid
        self.grid = g
        self.beta = params.beta
        self._mv = g.to_physical(m_ref.coeffs)
        self._w = np.sum(self._mv**2, axis=0)

    def apply(self, x: SpectralField) -> SpectralField:
        g = self.grid
        gx = g.grad_physical(x.coeffs)
        xv = g.to_physical(x.coeffs)
        out = np.einsum("i...,ij...->j...", self._mv, gx) + self.beta * self._w * xv
        return SpectralField(g, g.project_coeffs(g.from_physical(out)))

    def mixed_forchheimer(self, x: SpectralField) -> float:
        """integral |m_ref|^2 |x|^2, the step's actual cubic dissipation."""
        g = self.grid
        xv = g.to_physical(x.coeffs)
        return float(np.sum(self._w * np.sum(xv**2, axis=0)) * g.quad_weight)


def weighted_l2_sq(w_phys: np.ndarray, u: SpectralField) -> float:
    """integral w(x) |u(x)|^2 dx for a scalar padded-grid weight w >= 0."""
    g = u.grid
    uv = g.to_physical(u.coeffs)
    return float(np.sum(w_phys * np.sum(uv**2, axis=0)) * g.quad_weight)


def speed_squared(u: SpectralField) -> np.ndarray:
    """|u(x)|^2 on the padded grid (weight factory for weighted_l2_sq)."""
    g = u.grid
    uv = g.to_physical(u.coeffs)
    return np.sum(uv**2, axis=0)


def l4_norm4(u: SpectralField) -> float:
    """||u||_4^4 without going through norms() (saves two transforms)."""
    g = u.grid
    uv = g.to_physical(u.coeffs)
    return float(np.sum(np.sum(uv**2, axis=0) ** 2) * g.quad_weight)


__all__ = [
    "OperatorParams",
    "apply_A",
    "a_dual_norm",
    "b_dual_norm",
    "trilinear_b",
    "apply_B",
    "apply_C",
    "monotonicity_gap",
    "adjoint_convection",
    "adjoint_forchheimer",
    "PairStencil",
    "StateStencil",
    "weighted_l2_sq",
    "speed_squared",
    "l4_norm4",
    "inner_product",
    "norms",
    "Grid",
    "SpectralField",
]
