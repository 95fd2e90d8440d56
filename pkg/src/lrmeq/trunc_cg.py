"""Truncated conjugate gradient in factored low-rank arithmetic.

Baseline for benchmark comparisons: standard PCG recurrences on the
matrix equation, with every iterate kept in factored form and
recompressed.  Truncation roles: the iterate X_k uses a relative
tolerance, the residual R_k and direction P_k a mixed absolute-relative
criterion, and Q_k = A P_k is never truncated.  Every truncation logs
the discarded tail norm.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numkit
from .geometry import FactoredMatrix, factored_inner, factored_norm
from .trace import SolveTrace

_STAG_WINDOW = 25
_STAG_FACTOR = 0.98


@dataclass
class TruncationPolicy:
    """Truncation tolerances derived from the target residual ``tol``."""

    eps_rel_x: float
    eps_rel_r: float
    eps_abs_r: float
    rank_cap: int | None = None

    @classmethod
    def from_tol(cls, tol, rank_cap=None):
        return cls(
            eps_rel_x=0.0025 * tol,
            eps_rel_r=0.1 * tol,
            eps_abs_r=0.001 * tol,
            rank_cap=rank_cap,
        )

    def __post_init__(self):
        for v in (self.eps_rel_x, self.eps_rel_r, self.eps_abs_r):
            if v < 0:
                raise ValueError("tolerances must be nonnegative")


def truncate_factored(Z: FactoredMatrix, eps_rel, eps_abs=0.0, norm_ref=1.0, rank_cap=None):
    """QR-then-SVD recompression of a factored matrix.

    Keeps the smallest rank whose discarded tail satisfies
    ``tail <= max(eps_abs * norm_ref, eps_rel * ||Z||_F)``; a rank cap,
    when set, is applied afterwards.  Returns ``(Z', discarded_tail)``.
    """
    m, n = Z.shape
    if Z.k == 0:
        return Z, 0.0
    Ql, Rl = numkit.qr_thin(Z.left)
    Qr, Rr = numkit.qr_thin(Z.right)
    u, s, v = numkit.svd_thin(Rl @ Rr.T)
    norm_z = float(np.linalg.norm(s))
    thresh = max(eps_abs * norm_ref, eps_rel * norm_z)
    tails = np.sqrt(np.cumsum(s[::-1] ** 2))[::-1]  # tails[k] = ||s[k:]||
    keep = int(np.searchsorted(-tails, -thresh))    # smallest k with tails[k] <= thresh
    keep = max(keep, 1) if norm_z > 0 else 0
    if rank_cap is not None:
        keep = min(keep, rank_cap)
    discarded = float(np.linalg.norm(s[keep:]))
    out = FactoredMatrix(Ql @ (u[:, :keep] * s[:keep]), Qr @ v[:, :keep])
    return out, discarded


def truncated_cg_solve(op, F, precond, policy: TruncationPolicy, tol, max_iter):
    """Preconditioned CG with low-rank truncation; returns ``(X, trace, status)``.

    ``precond`` must provide ``apply_inv_ambient`` on factored matrices.
    Status is one of converged / max_iter / stagnated / cg_breakdown.
    """
    trace = SolveTrace(extra_columns=("rank_x", "rank_r", "rank_p"))
    t0 = time.perf_counter()
    m, n = op.m, op.n
    norm_F = factored_norm(F)
    if norm_F == 0.0:
        X = FactoredMatrix.zero(m, n)
        trace.append(
            iter=0, f=0.0, res_rel=0.0, res_kind="exact", rank=0,
            beta=0.0, alpha=0.0, backtracks=0, time_s=0.0, event="converged",
            rank_x=0, rank_r=0, rank_p=0,
        )
        return X, trace, "converged"

    def trunc_x(Z):
        return truncate_factored(Z, policy.eps_rel_x, 0.0, 1.0, policy.rank_cap)

    def trunc_r(Z):
        return truncate_factored(
            Z, policy.eps_rel_r, policy.eps_abs_r, norm_F, policy.rank_cap
        )

    X = FactoredMatrix.zero(m, n)
    R = F                                  # residual of the *equation*: F - A X
    Z = precond.apply_inv_ambient(R)
    P = Z
    res = factored_norm(R) / norm_F
    res_hist = [res]
    trace.append(
        iter=0, f=0.0, res_rel=res, res_kind="exact", rank=X.k,
        beta=0.0, alpha=0.0, backtracks=0, time_s=time.perf_counter() - t0,
        event="", rank_x=X.k, rank_r=R.k, rank_p=P.k,
    )
    status = "max_iter"
    for k in range(1, max_iter + 1):
        Q = op.apply(P)                    # never truncated
        pq = factored_inner(P, Q)
        if pq <= 0.0:
            status = "cg_breakdown"
            trace.tag_last("cg_breakdown")
            break
        omega = factored_inner(P, R) / pq
        X, _ = trunc_x(X.hstack(P.scaled(omega)))
        R, _ = trunc_r(R.hstack(Q.scaled(-omega)))
        res = factored_norm(R) / norm_F
        res_hist.append(res)
        Z = precond.apply_inv_ambient(R)
        # direction conjugation is robust to truncation drift (equals the
        # usual <R,Z> ratio in exact arithmetic)
        beta = -factored_inner(Z, Q) / pq
        P, _ = trunc_r(Z.hstack(P.scaled(beta)))
        trace.append(
            iter=k, f="", res_rel=res, res_kind="exact", rank=X.k,
            beta=beta, alpha=omega, backtracks=0,
            time_s=time.perf_counter() - t0, event="",
            rank_x=X.k, rank_r=R.k, rank_p=P.k,
        )
        if res <= tol:
            status = "converged"
            trace.tag_last("converged")
            break
        if len(res_hist) > 2 * _STAG_WINDOW:
            recent = min(res_hist[-_STAG_WINDOW:])
            before = min(res_hist[: -_STAG_WINDOW])
            if recent >= _STAG_FACTOR * before:
                status = "stagnated"
                trace.tag_last("stagnated")
                break
    return X, trace, status
