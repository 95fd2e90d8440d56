"""Preconditioned Riemannian nonlinear CG on the fixed-rank manifold.

One iteration: Riemannian gradient of the quadratic objective, one
application of the preconditioner inverse, a modified Hestenes-Stiefel /
Dai-Yuan beta with a descent safeguard, an exact-line-search initial step
on the tangent space, and Armijo backtracking through the metric
projection retraction (whose weighted QRs are reused across trial steps).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import equations as eqs
from . import geometry as geo
from .precond import IdentityPrecond
from .trace import SolveTrace

_BETA_DEN_GUARD = 1e-14


class LineSearchError(RuntimeError):
    pass


class SpdLossError(RuntimeError):
    """Raised when a curvature term that must be positive is not."""


@dataclass
class RnlcgOptions:
    rank: int
    max_iters: int = 500
    tol: float = 1e-6
    armijo_slope: float = 1e-4
    armijo_shrink: float = 0.5
    max_backtracks: int = 25
    check_every: int = 1
    seed: int = 0
    stag_grad_tol: float = 1e-13

    def __post_init__(self):
        if not (0.0 < self.armijo_slope < 1.0 and 0.0 < self.armijo_shrink < 1.0):
            raise ValueError("Armijo parameters must lie in (0, 1)")


def search_direction(g, h, prev=None):
    """Combine the preconditioned gradient with the transported history.

    ``prev`` is None on the first iteration, else a tuple
    ``(T_xi, T_h, prev_g_xi)`` of the previous direction and
    preconditioned gradient transported to the current point, and
    ``<g_{k-1}, xi_{k-1}>``.  Returns ``(xi, beta, reset)``.
    """
    g_h = geo.inner(g, h)
    if prev is None:
        return h.scaled(-1.0), 0.0, False
    T_xi, T_h, prev_g_xi = prev
    den = geo.inner(g, T_xi) - prev_g_xi
    num_hs = g_h - geo.inner(g, T_h)
    if abs(den) < _BETA_DEN_GUARD * max(abs(num_hs), abs(g_h), 1e-300):
        beta = 0.0
    else:
        beta = max(0.0, min(num_hs / den, g_h / den))
    if beta == 0.0:
        return h.scaled(-1.0), 0.0, False
    xi = h.scaled(-1.0).plus(T_xi, beta).retangentialize()
    if geo.inner(h, xi) >= 0.0:
        return h.scaled(-1.0), beta, True
    return xi, beta, False


def initial_step(op, g, xi):
    """Exact minimizer of ``t -> f(X + t xi)`` along the tangent line.

    The denominator ``<A xi, xi>`` is evaluated through the rank-2r
    factored embedding of xi; it must be positive for an SPD operator.
    """
    zeta = xi.embed()
    den = geo.factored_inner(op.apply(zeta), zeta)
    if den <= 0.0:
        raise SpdLossError(f"nonpositive curvature <A xi, xi> = {den:.3e}")
    return -geo.inner(g, xi) / den


def armijo_backtrack(op, F, X, xi, alpha_bar, g, f0, opts):
    """First ``alpha = alpha_bar * shrink^j`` passing the Armijo test.

    Returns ``(alpha, X_new, f_new, R_new, backtracks)``; the weighted QR
    factors of the retraction are computed once and shared by all trials.
    """
    slope_term = opts.armijo_slope * geo.inner(g, xi)
    if slope_term >= 0.0:
        raise LineSearchError("search direction is not a descent direction")
    retr = geo.LineSearchRetraction(X, xi)
    alpha = alpha_bar
    for j in range(opts.max_backtracks + 1):
        X_t = retr.at(alpha)
        f_t, R_t = eqs.evaluate(op, X_t, F)
        if f_t <= f0 + alpha * slope_term:
            return alpha, X_t, f_t, R_t, j
        alpha *= opts.armijo_shrink
    raise LineSearchError(
        f"Armijo backtracking exhausted after {opts.max_backtracks} reductions"
    )


class RnlcgState:
    """Single-step driver for (preconditioned) R-NLCG.

    Holds the current point plus its objective, factored residual,
    Riemannian gradient and preconditioned gradient; ``step()`` advances
    one accepted iteration.  The rank-adaptive outer loop drives this
    directly; ``rnlcg_solve`` wraps it with stopping tests and a trace.
    """

    def __init__(self, op, F, opts, metric=None, precond=None, X0=None, rng=None):
        self.op = op
        self.F = F
        self.opts = opts
        self.metric = metric if metric is not None else geo.KroneckerMetric.identity(op.m, op.n)
        self.precond = precond if precond is not None else IdentityPrecond()
        rng = rng if rng is not None else np.random.default_rng(opts.seed)
        if X0 is None:
            X0 = geo.random_point(op.m, op.n, opts.rank, self.metric, rng)
        self.norm_F = geo.factored_norm(F)
        if self.norm_F == 0.0:
            raise ValueError("zero right-hand side")
        self.X = X0
        self._prepare(*eqs.evaluate(op, X0, F))
        self._xi_prev = None
        self._h_prev = None
        self._prev_g_xi = 0.0
        self.last_beta = 0.0
        self.last_alpha = 0.0
        self.last_backtracks = 0
        self.last_reset = False

    def _prepare(self, f, R):
        self.f = f
        self.R = R
        self.g = geo.riemannian_gradient(self.X, R)
        self.h = self.precond.apply_inv_tangent(self.g)
        self.grad_energy = geo.inner(self.g, self.h)
        if self.grad_energy < 0.0:
            raise SpdLossError(
                f"<g, P^-1 g> = {self.grad_energy:.3e} < 0: preconditioner not SPD"
            )

    def res_rel(self):
        """Exact relative Frobenius residual at the current point."""
        return geo.factored_norm(self.R) / self.norm_F

    def stagnated(self):
        return np.sqrt(max(self.grad_energy, 0.0)) <= self.opts.stag_grad_tol * self.norm_F

    def step(self):
        """One accepted R-NLCG iteration; updates the state in place."""
        prev = None
        if self._xi_prev is not None:
            prev = (
                geo.transport(self.X, self._xi_prev),
                geo.transport(self.X, self._h_prev),
                self._prev_g_xi,
            )
        xi, beta, reset = search_direction(self.g, self.h, prev)
        alpha_bar = initial_step(self.op, self.g, xi)
        alpha, X_new, f_new, R_new, n_back = armijo_backtrack(
            self.op, self.F, self.X, xi, alpha_bar, self.g, self.f, self.opts
        )
        self._xi_prev = xi
        self._h_prev = self.h
        self._prev_g_xi = geo.inner(self.g, xi)
        self.X = X_new
        self._prepare(f_new, R_new)
        self.last_beta = beta
        self.last_alpha = alpha
        self.last_backtracks = n_back
        self.last_reset = reset
        return self

    def reset_history(self):
        """Forget the CG memory (used after rank changes)."""
        self._xi_prev = None
        self._h_prev = None
        self._prev_g_xi = 0.0


def rnlcg_solve(op, F, opts: RnlcgOptions, metric=None, precond=None, X0=None):
    """Run Algorithm-style fixed-rank R-NLCG until tolerance or budget.

    Returns ``(X, trace, status)`` with status in
    {"converged", "max_iter", "line_search_failure", "stagnated"}.
    """
    trace = SolveTrace()
    t0 = time.perf_counter()
    state = RnlcgState(op, F, opts, metric=metric, precond=precond, X0=X0)
    k = 0
    res = state.res_rel()
    trace.append(
        iter=0, f=state.f, res_rel=res, res_kind="exact", rank=state.X.r,
        beta=0.0, alpha=0.0, backtracks=0, time_s=time.perf_counter() - t0, event="",
    )
    while True:
        if res <= opts.tol:
            status = "converged"
            trace.tag_last("converged")
            break
        if k >= opts.max_iters:
            status = "max_iter"
            trace.tag_last("max_iter")
            break
        if state.stagnated():
            status = "stagnated"
            trace.tag_last("stagnated")
            break
        try:
            state.step()
        except LineSearchError:
            status = "line_search_failure"
            trace.tag_last("line_search_failure")
            break
        k += 1
        fresh = (k % opts.check_every == 0) or k >= opts.max_iters
        if fresh:
            res = state.res_rel()
        trace.append(
            iter=k, f=state.f,
            res_rel=res if fresh else "", res_kind="exact" if fresh else "",
            rank=state.X.r, beta=state.last_beta, alpha=state.last_alpha,
            backtracks=state.last_backtracks,
            time_s=time.perf_counter() - t0,
            event="reset_rgd" if state.last_reset else "",
        )
    return state.X, trace, status
