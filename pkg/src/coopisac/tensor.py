"""Vandermonde-structured CP decomposition of R x N x M echo tensors.

The delay factor ``C`` is Vandermonde, so spatial smoothing along the
subcarrier mode exposes a shift invariance that an ESPRIT-style eigenvalue
problem resolves in closed form. An unconstrained ALS solver is kept as a
reference baseline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import fft, ifft, next_fast_len
from scipy.sparse.linalg import LinearOperator

RANK_FLOOR = 1e-12
COLLISION_TOL = 1e-9
RSVD_ITERS = 16


class UniquenessError(ValueError):
    """No smoothing split satisfies the identifiability conditions."""


class RankDeficiencyError(np.linalg.LinAlgError):
    pass


class DegeneracyError(np.linalg.LinAlgError):
    """Two recovered delay generators coincide; paths cannot be separated."""


@dataclass(frozen=True)
class SmoothingPlan:
    l1: int
    l2: int
    m: int
    n: int
    r: int
    k: int  # number of targets; the tensor rank is k + 1

    def __post_init__(self):
        p = self.k + 1
        if self.l1 + self.l2 != self.m + 1 or min(self.l1, self.l2) < 1:
            raise UniquenessError(f"l1 + l2 must equal M + 1 = {self.m + 1}")
        if (self.l1 - 1) * self.n < p:
            raise UniquenessError(f"(l1-1)*N = {(self.l1 - 1) * self.n} < K+1 = {p}")
        if self.l2 * self.r < p:
            raise UniquenessError(f"l2*R = {self.l2 * self.r} < K+1 = {p}")

    @property
    def rank(self) -> int:
        return self.k + 1


@dataclass(frozen=True, eq=False)
class FactorEstimate:
    a_hat: np.ndarray        # R x P
    b_hat: np.ndarray        # N x P
    c_hat: np.ndarray        # M x P
    generators: np.ndarray   # P, unit modulus
    singular_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    converged: bool = True
    n_iters: int = 0
    fit_history: tuple[float, ...] = ()

    @property
    def n_paths(self) -> int:
        return self.generators.size


def plan_smoothing(M: int, N: int, R: int, K: int) -> SmoothingPlan:
    """Balanced split ``l1 = ceil((M+1)/2)`` when identifiable, otherwise the
    feasible split maximizing ``min((l1-1)N, l2 R)``."""
    p = K + 1

    def ok(l1):
        l2 = M + 1 - l1
        return l2 >= 1 and (l1 - 1) * N >= p and l2 * R >= p

    l1 = math.ceil((M + 1) / 2)
    if not ok(l1):
        feasible = [c for c in range(1, M + 1) if ok(c)]
        if not feasible:
            raise UniquenessError(
                f"no smoothing split of M={M} satisfies (l1-1)*{N} >= {p} and l2*{R} >= {p}")
        l1 = max(feasible, key=lambda c: (min((c - 1) * N, (M + 1 - c) * R), -c))
    return SmoothingPlan(l1, M + 1 - l1, M, N, R, K)


def _as_array(tensor) -> np.ndarray:
    return np.asarray(getattr(tensor, "data", tensor))


def smooth(tensor, plan: SmoothingPlan) -> np.ndarray:
    """Dense smoothed matrix of shape ``(l1*N, l2*R)``.

    Row ``i*N + n`` and column ``l*R + r`` hold ``Y[r, n, i + l]``.
    """
    Y = _as_array(tensor)
    T = Y.transpose(2, 1, 0)  # M x N x R
    W = np.lib.stride_tricks.sliding_window_view(T, plan.l1, axis=0)  # l2 x N x R x l1
    return W.transpose(3, 1, 0, 2).reshape(plan.l1 * plan.n, plan.l2 * plan.r)


class SmoothingOperator(LinearOperator):
    """Matrix-free smoothed matrix; products are subcarrier correlations done by FFT."""

    def __init__(self, tensor, plan: SmoothingPlan):
        Y = _as_array(tensor)
        self.plan = plan
        T = Y.transpose(2, 1, 0)
        self._p = next_fast_len(plan.m)
        self._ft = fft(T, self._p, axis=0)                            # P x N x R
        self._ftc = fft(T.conj(), self._p, axis=0).transpose(0, 2, 1)  # P x R x N
        super().__init__(dtype=np.complex128, shape=(plan.l1 * plan.n, plan.l2 * plan.r))

    def _matmat(self, X):
        pl = self.plan
        V = np.asarray(X).reshape(pl.l2, pl.r, -1)[::-1]
        out = ifft(self._ft @ fft(V, self._p, axis=0), axis=0)
        return out[pl.l2 - 1:pl.l2 - 1 + pl.l1].reshape(pl.l1 * pl.n, -1)

    def _rmatmat(self, X):
        pl = self.plan
        U = np.asarray(X).reshape(pl.l1, pl.n, -1)[::-1]
        out = ifft(self._ftc @ fft(U, self._p, axis=0), axis=0)
        return out[pl.l1 - 1:pl.l1 - 1 + pl.l2].reshape(pl.l2 * pl.r, -1)

    def _matvec(self, x):
        return self._matmat(np.asarray(x).reshape(-1, 1)).ravel()

    def _rmatvec(self, x):
        return self._rmatmat(np.asarray(x).reshape(-1, 1)).ravel()


def smoothing_operator(tensor, plan: SmoothingPlan) -> SmoothingOperator:
    return SmoothingOperator(tensor, plan)


def randomized_svd(op: LinearOperator, rank: int, oversample: int = 10, n_iter: int = RSVD_ITERS,
                   seed: int = 0):
    """Truncated SVD by subspace iteration; returns ``U, s, V`` with ``op ~ U diag(s) V^H``."""
    rng = np.random.default_rng(seed)
    k = min(rank + oversample, min(op.shape))
    omega = rng.standard_normal((op.shape[1], k)) + 1j * rng.standard_normal((op.shape[1], k))
    Q, _ = np.linalg.qr(op.matmat(omega))
    for _ in range(n_iter):
        Z, _ = np.linalg.qr(op.rmatmat(Q))
        Q, _ = np.linalg.qr(op.matmat(Z))
    B = op.rmatmat(Q).conj().T
    Ub, s, Vh = np.linalg.svd(B, full_matrices=False)
    return (Q @ Ub)[:, :rank], s[:rank], Vh[:rank].conj().T


def recover_factors(y_s, plan: SmoothingPlan, K: int | None = None, N: int | None = None,
                    R: int | None = None, M: int | None = None, *,
                    rank_floor: float = RANK_FLOOR,
                    collision_tol: float = COLLISION_TOL) -> FactorEstimate:
    """Closed-form factor recovery from a smoothed matrix (dense or operator).

    Columns of the returned factors share one path ordering.
    """
    K = plan.k if K is None else K
    N, R, M = N or plan.n, R or plan.r, M or plan.m
    P, l1, l2 = K + 1, plan.l1, plan.l2
    if isinstance(y_s, np.ndarray):
        U, s, Vh = np.linalg.svd(y_s, full_matrices=False)
        U, s, V = U[:, :P], s[:P], Vh[:P].conj().T
    else:
        U, s, V = randomized_svd(y_s, P)
    if s[0] == 0 or s[P - 1] / s[0] < rank_floor:
        raise RankDeficiencyError(
            f"sigma_{P}/sigma_1 = {s[P - 1] / s[0] if s[0] else 0.0:.3e} below {rank_floor:g}")

    U1, U2 = U[:(l1 - 1) * N], U[N:l1 * N]
    psi = np.linalg.lstsq(U1, U2, rcond=None)[0]
    z_raw, Mhat = np.linalg.eig(psi)
    z = z_raw / np.abs(z_raw)
    if P > 1:
        gaps = np.abs(z[:, None] - z[None, :]) + np.eye(P) * 10
        if gaps.min() < collision_tol:
            raise DegeneracyError(f"delay generators collide (gap {gaps.min():.2e})")

    C = z[None, :] ** np.arange(M)[:, None]
    UM = (U @ Mhat).reshape(l1, N, P)
    B = np.einsum("ik,ink->nk", C[:l1].conj(), UM) / l1
    T = np.linalg.inv(Mhat).T
    VS = (V.conj() @ (s[:, None] * T)).reshape(l2, R, P)
    A = np.einsum("lk,lrk->rk", C[:l2].conj(), VS) / l2
    return FactorEstimate(A, B, C, z, s)


def estimate_factors(tensor, K: int, dense: bool | None = None) -> FactorEstimate:
    """Plan, smooth and recover; uses the dense SVD for small problems."""
    Y = _as_array(tensor)
    R, N, M = Y.shape
    plan = plan_smoothing(M, N, R, K)
    if dense is None:
        dense = plan.l1 * plan.n * plan.l2 * plan.r <= 200_000
    y_s = smooth(Y, plan) if dense else smoothing_operator(Y, plan)
    return recover_factors(y_s, plan)


def khatri_rao(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product, row index ``i*rows(Y) + j``."""
    return (X[:, None, :] * Y[None, :, :]).reshape(-1, X.shape[1])


def cp_reconstruct(est: FactorEstimate) -> np.ndarray:
    return np.einsum("rk,nk,mk->rnm", est.a_hat, est.b_hat, est.c_hat)


def generators_from_columns(C: np.ndarray) -> np.ndarray:
    """Unit-modulus lag-one phase estimate of each column's geometric ratio."""
    z = np.sum(C[1:] * C[:-1].conj(), axis=0)
    return z / np.where(np.abs(z) > 0, np.abs(z), 1.0)


def als_recover(tensor, K: int, max_iters: int = 500, tol: float = 1e-8, seed: int = 0) -> FactorEstimate:
    """Unconstrained complex CP-ALS with random Gaussian initialization.

    Stops when the relative change of the residual norm falls below ``tol``;
    ``converged`` is False if ``max_iters`` is reached first. Generators are
    estimated afterwards from the delay factor columns.
    """
    X = _as_array(tensor)
    R, N, M = X.shape
    P = K + 1
    if P > min(N * M, R * M, R * N):
        raise ValueError("rank exceeds the unfolding dimensions")
    rng = np.random.default_rng(seed)

    def crandn(*shape):
        return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)

    A, B, C = crandn(R, P), crandn(N, P), crandn(M, P)
    xnorm = np.linalg.norm(X)
    history: list[float] = []
    best = (np.inf, A, B, C)
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        XC = X @ C.conj()                                   # R x N x P
        A = np.linalg.solve((np.conj((B.conj().T @ B) * (C.conj().T @ C))).T,
                            np.einsum("rnk,nk->rk", XC, B.conj()).T).T
        B = np.linalg.solve((np.conj((A.conj().T @ A) * (C.conj().T @ C))).T,
                            np.einsum("rnk,rk->nk", XC, A.conj()).T).T
        XB = np.einsum("rnm,nk->rmk", X, B.conj())          # R x M x P
        C = np.linalg.solve((np.conj((A.conj().T @ A) * (B.conj().T @ B))).T,
                            np.einsum("rmk,rk->mk", XB, A.conj()).T).T
        res = np.linalg.norm(X - np.einsum("rk,nk,mk->rnm", A, B, C)) / xnorm
        history.append(float(res))
        if res < best[0]:
            best = (res, A, B, C)
        if len(history) > 1 and abs(history[-2] - res) < tol * max(history[-2], 1e-300):
            converged = True
            break
        if res < 1e-14:
            converged = True
            break
    _, A, B, C = best
    # move scale so that c starts with 1, like a Vandermonde column
    scale = np.where(np.abs(C[0]) > 0, C[0], 1.0)
    C = C / scale
    B = B * scale
    return FactorEstimate(A, B, C, generators_from_columns(C), converged=converged,
                          n_iters=it, fit_history=tuple(history))
