"""Dense low-rank kernels: truncated SVD, pseudoinverse solves, energy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "TruncatedSvd",
    "truncated_svd",
    "min_norm_lstsq",
    "pinv",
    "frobenius_norm",
    "lowrank_frobenius",
    "energy_retained",
    "geometric_decay_eta",
    "DENSE_LIMIT",
    "OVERSAMPLE",
    "POWER_ITERS",
]

DENSE_LIMIT = 512
OVERSAMPLE = 10
POWER_ITERS = 4


@dataclass(frozen=True, eq=False)
class TruncatedSvd:
    """Rank-``r`` factors with ``W ~= U @ diag(S) @ V.T``.

    Attributes
    ----------
    U : (m, r) ndarray
        Left singular vectors, orthonormal columns.
    S : (r,) ndarray
        Singular values, non-increasing.
    V : (n, r) ndarray
        Right singular vectors, orthonormal columns.
    tail_energy : float
        Sum of squared discarded singular values. Exact on the dense path,
        ``||W||_F^2 - sum(S**2)`` on the randomized path.
    requested_rank : int
        Rank asked for before clamping to ``min(m, n)``.
    total_energy : float
        ``||W||_F^2``.
    method : str
        ``"dense"`` or ``"randomized"``.
    """

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray
    tail_energy: float
    requested_rank: int
    total_energy: float
    method: str

    @property
    def r(self) -> int:
        return self.S.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.U.shape[0], self.V.shape[0]

    @property
    def clamped(self) -> bool:
        return self.r < self.requested_rank

    @property
    def eta(self) -> float:
        """Fraction of squared Frobenius norm kept by the top ``r`` triplets."""
        if self.total_energy == 0.0:
            return 1.0
        return float(np.clip(1.0 - self.tail_energy / self.total_energy, 0.0, 1.0))

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T

    def truncate(self, r: int) -> "TruncatedSvd":
        if r >= self.r:
            return self
        dropped = float(np.sum(self.S[r:] ** 2))
        return TruncatedSvd(
            self.U[:, :r], self.S[:r], self.V[:, :r],
            self.tail_energy + dropped, self.requested_rank, self.total_energy, self.method,
        )


def _fix_signs(U, V):
    # largest-magnitude entry of each U column made non-negative
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs, V * signs


def _randomized(W, r, seed):
    m, n = W.shape
    k = min(r + OVERSAMPLE, m, n)
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((n, k))
    Q, _ = np.linalg.qr(W @ omega)
    for _ in range(POWER_ITERS):
        Z, _ = np.linalg.qr(W.T @ Q)
        Q, _ = np.linalg.qr(W @ Z)
    Ub, S, Vt = np.linalg.svd(Q.T @ W, full_matrices=False)
    return Q @ Ub[:, :r], S[:r], Vt[:r].T


def truncated_svd(W, r: int, seed: int = 0) -> TruncatedSvd:
    """Best rank-``r`` approximation factors of ``W``.

    Uses an exact dense SVD when ``min(m, n) <= DENSE_LIMIT`` and a seeded
    randomized range finder (oversampling 10, 4 power iterations) above
    that. ``r`` is clamped to ``min(m, n)``. The result depends only on
    ``(W, r, seed)``.
    """
    if r < 1:
        raise ValueError(f"rank must be >= 1, got {r}")
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise ValueError("matrix has non-finite entries")
    m, n = W.shape
    k = min(r, m, n)
    total = float(np.sum(W * W))
    if min(m, n) <= DENSE_LIMIT:
        U, S, Vt = np.linalg.svd(W, full_matrices=False)
        tail = float(np.sum(S[k:] ** 2))
        U, S, V = U[:, :k], S[:k], Vt[:k].T
        method = "dense"
    else:
        U, S, V = _randomized(W, k, seed)
        tail = max(total - float(np.sum(S ** 2)), 0.0)
        method = "randomized"
    U, V = _fix_signs(U, V)
    return TruncatedSvd(U, S, V, tail, r, total, method)


def pinv(A) -> np.ndarray:
    """Moore-Penrose pseudoinverse with an F32-scaled cutoff.

    Singular values below ``max(m, n) * s_max * 2**-23`` count as zero.
    """
    A = np.asarray(A, dtype=np.float64)
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s.size == 0:
        return np.zeros(A.T.shape)
    cutoff = max(A.shape) * s[0] * 2.0 ** -23
    keep = s > cutoff
    return (Vt[keep].T / s[keep]) @ U[:, keep].T


def min_norm_lstsq(A, B) -> np.ndarray:
    """Minimum-norm ``P`` minimizing ``||P @ A - B||_F``.

    ``A`` is (m, r) and ``B`` is (m', r); returns ``B @ pinv(A)`` of shape
    (m', m). Rank-deficient ``A`` is handled by the pseudoinverse cutoff.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValueError(f"column counts differ: A {A.shape}, B {B.shape}")
    return B @ pinv(A)


def frobenius_norm(W) -> float:
    W = np.asarray(W, dtype=np.float64)
    return float(np.sqrt(np.sum(W * W)))


def lowrank_frobenius(left, right) -> float:
    """``||left @ right||_F`` without forming the product.

    Reduces both factors by QR so only an (k, k) core is materialized.
    """
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.shape[1] == 0:
        return 0.0
    _, Rl = np.linalg.qr(left)
    _, Rr = np.linalg.qr(right.T)
    return frobenius_norm(Rl @ Rr.T)


def energy_retained(sigma, r: int) -> float:
    """Share of ``sum(sigma**2)`` carried by the first ``r`` values."""
    s2 = np.asarray(sigma, dtype=np.float64) ** 2
    total = float(np.sum(s2))
    if total == 0.0:
        raise ValueError("all-zero spectrum has no energy")
    if r < 0:
        raise ValueError(f"rank must be >= 0, got {r}")
    if r >= s2.size:
        return 1.0
    return float(np.sum(s2[:r]) / total)


def geometric_decay_eta(rho: float, r: int) -> float:
    """``1 - rho**r``, the retained energy for a spectrum decaying like ``rho**i``."""
    if not 0.0 < rho < 1.0:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    if r < 1:
        raise ValueError(f"rank must be >= 1, got {r}")
    return float(-np.expm1(r * np.log(rho)))
