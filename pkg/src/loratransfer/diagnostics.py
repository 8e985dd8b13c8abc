"""Spectral diagnostics: energy curves, decay fits and rank trade-offs."""

from __future__ import annotations

import csv
import os
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .linalg import energy_retained, truncated_svd

__all__ = [
    "SpectrumReport",
    "spectrum_report",
    "fit_decay_rate",
    "tradeoff_table",
    "geometric_matrix",
    "write_rows_csv",
    "DENSE_SPECTRUM_LIMIT",
]

DENSE_SPECTRUM_LIMIT = 4096


@dataclass
class SpectrumReport:
    base_key: str
    sigma: np.ndarray
    eta_curve: list[tuple[int, float]]
    fitted_rho: float
    frobenius_sq: float
    tail_bound: list[tuple[int, float]] = field(default_factory=list)
    exact: bool = True

    def rows(self) -> list[dict]:
        bounds = dict(self.tail_bound)
        return [
            {"base_key": self.base_key, "r": r, "eta": eta,
             "tail_bound": bounds[r], "fitted_rho": self.fitted_rho}
            for r, eta in self.eta_curve
        ]

    def to_dict(self) -> dict:
        return {
            "base_key": self.base_key,
            "fitted_rho": self.fitted_rho,
            "frobenius_sq": self.frobenius_sq,
            "exact": self.exact,
            "eta_curve": [[r, e] for r, e in self.eta_curve],
            "tail_bound": [[r, b] for r, b in self.tail_bound],
        }


def fit_decay_rate(sigma, keep: float = 0.8) -> float:
    """Fit ``sigma_i**2 ~ sigma_1**2 * rho**i`` by log-linear least squares.

    Only the leading ``keep`` share of indices is used, and values at or
    below the float64 noise floor are dropped first.
    """
    s = np.asarray(sigma, dtype=np.float64)
    if s.size == 0 or s[0] <= 0:
        return float("nan")
    floor = s[0] * s.size * np.finfo(np.float64).eps
    s = s[s > floor]
    s = s[: max(2, int(np.ceil(keep * s.size)))]
    if s.size < 2:
        return float("nan")
    slope = np.polyfit(np.arange(s.size, dtype=np.float64), np.log(s ** 2), 1)[0]
    return float(np.exp(slope))


def spectrum_report(W, ranks, base_key: str = "", seed: int = 0) -> SpectrumReport:
    """Energy retained at each rank in ``ranks`` plus a fitted decay rate.

    The spectrum is exact when ``min(m, n) <= 4096``; above that the top
    ``max(ranks)`` values come from a truncated SVD and the tail from the
    Frobenius norm.
    """
    W = np.asarray(W, dtype=np.float64)
    total = float(np.sum(W * W))
    if total == 0.0:
        raise ValueError("zero matrix has no spectrum")
    ranks = sorted({int(r) for r in ranks})
    if min(W.shape) <= DENSE_SPECTRUM_LIMIT:
        sigma = np.linalg.svd(W, compute_uv=False)
        curve = [(r, energy_retained(sigma, r)) for r in ranks]
        exact = True
    else:
        svd = truncated_svd(W, max(ranks), seed)
        sigma = svd.S
        cum = np.concatenate([[0.0], np.cumsum(sigma ** 2)])
        curve = [(r, min(1.0, float(cum[min(r, sigma.size)] / total))) for r in ranks]
        exact = False
    bounds = [(r, float(np.sqrt(max(0.0, 1.0 - eta) * total))) for r, eta in curve]
    return SpectrumReport(base_key, sigma, curve, fit_decay_rate(sigma), total, bounds, exact)


def geometric_matrix(m: int, n: int, rho: float, seed: int = 0, scale: float = 1.0) -> np.ndarray:
    """Random (m, n) matrix with singular values ``scale * rho**(i/2)``."""
    rng = np.random.default_rng(seed)
    k = min(m, n)
    U, _ = np.linalg.qr(rng.standard_normal((m, k)))
    V, _ = np.linalg.qr(rng.standard_normal((n, k)))
    s = scale * rho ** (np.arange(k) / 2.0)
    return (U * s) @ V.T


def _median_time(fn, repeats):
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def tradeoff_table(dims, ranks, measure: bool = True, repeats: int = 5,
                   rho: float = 0.94, seed: int = 0, W=None) -> list[dict]:
    """Predicted and measured cost of rank-``r`` truncation per rank.

    ``predicted_time_ratio`` is ``r / min(m, n)`` (``O(rmn)`` against a full
    SVD's ``O(mn min(m, n))``) and ``predicted_memory_ratio`` is
    ``r (m + n) / (m n)``. With ``measure`` a synthetic matrix of the given
    dims is decomposed and the median wall-clock of ``repeats`` runs is
    reported along with the energy it retains.
    """
    m, n = dims
    if m < 1 or n < 1:
        raise ValueError(f"dims must be positive, got {dims}")
    if measure and W is None:
        W = geometric_matrix(m, n, rho, seed)
    rows = []
    for r in ranks:
        mem = r * (m + n) / (m * n)
        row = {
            "r": r,
            "predicted_time_ratio": min(r, m, n) / min(m, n),
            "predicted_memory_ratio": mem,
            "savings": mem < 1.0,
            "measured_time": None,
            "eta": None,
        }
        if measure:
            row["measured_time"] = _median_time(lambda: truncated_svd(W, r, seed), repeats)
            row["eta"] = truncated_svd(W, r, seed).eta
        rows.append(row)
    return rows


def write_rows_csv(rows, path: str | os.PathLike) -> None:
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
