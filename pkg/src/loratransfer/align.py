"""Least-squares alignment of source singular bases onto target bases."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import TruncatedSvd, frobenius_norm

__all__ = ["AlignmentMap", "AlignmentError", "align_subspaces"]

ORTHO_TOL = 1e-3


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AlignmentMap:
    """Aligned bases for one base weight.

    ``U_aligned = P_U @ svd_s.U`` and ``V_aligned = P_V @ svd_s.V`` where
    ``P_U``, ``P_V`` are the minimum-norm least-squares maps carrying the
    source bases onto the target bases. Both land in target dimensions.
    """

    base_key: str
    svd_s: TruncatedSvd
    svd_t: TruncatedSvd
    U_aligned: np.ndarray
    V_aligned: np.ndarray
    residual_U: float
    residual_V: float
    rank_clamped: bool = False

    @property
    def r(self) -> int:
        return self.U_aligned.shape[1]

    @property
    def source_shape(self) -> tuple[int, int]:
        return self.svd_s.shape

    @property
    def target_shape(self) -> tuple[int, int]:
        return self.U_aligned.shape[0], self.V_aligned.shape[0]

    @property
    def dims_match(self) -> bool:
        return self.source_shape == self.target_shape


def align_subspaces(svd_s: TruncatedSvd, svd_t: TruncatedSvd, base_key: str = "",
                    strict: bool = False) -> AlignmentMap:
    """Align the source singular bases onto the target ones.

    The least-squares problem ``min_P ||P U_s - U_t||_F`` has the
    minimum-norm solution ``P = U_t pinv(U_s)``; since ``U_s`` has
    orthonormal columns ``pinv(U_s) = U_s.T`` and the aligned basis is
    ``U_t (U_s.T U_s)``, which equals ``U_t`` up to rounding. Same for V.

    If the two factorizations kept different ranks both are cut to the
    smaller one and ``rank_clamped`` is set. With ``strict=True`` the
    aligned bases are checked for orthonormality.
    """
    r = min(svd_s.r, svd_t.r)
    clamped = svd_s.r != svd_t.r
    svd_s, svd_t = svd_s.truncate(r), svd_t.truncate(r)
    if svd_s.r != svd_t.r:
        raise AlignmentError(f"{base_key}: rank mismatch {svd_s.r} vs {svd_t.r} after clamping")

    U_al = svd_t.U @ (svd_s.U.T @ svd_s.U)
    V_al = svd_t.V @ (svd_s.V.T @ svd_s.V)
    if strict:
        for name, Q in (("U", U_al), ("V", V_al)):
            dev = np.max(np.abs(Q.T @ Q - np.eye(r))) if r else 0.0
            if dev > ORTHO_TOL:
                raise AlignmentError(f"{base_key}: aligned {name} deviates from orthonormal by {dev:.2e}")
    return AlignmentMap(
        base_key, svd_s, svd_t, U_al, V_al,
        frobenius_norm(U_al - svd_t.U), frobenius_norm(V_al - svd_t.V), clamped,
    )
