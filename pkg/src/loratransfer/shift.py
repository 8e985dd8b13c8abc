"""Projection of LoRA updates into aligned target subspaces.

Given the aligned bases of one base weight, a source update
``dW = scale * B @ A`` is carried to the target as::

    dW_t = U_al @ (L.T @ dW @ R) @ V_al.T

When source and target weights share a shape the coordinate bases ``L, R``
are the aligned bases themselves, which is the plain orthogonal projection
``U_al U_al.T dW V_al V_al.T``. When shapes differ that product does not
type-check, so coordinates are taken in the source bases ``U_s, V_s``
instead. Factor-wise projection uses the same bases, so projecting ``B``
and ``A`` separately always agrees with projecting ``B @ A``.
"""

from __future__ import annotations

import enum
import logging
import os
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .align import AlignmentMap, align_subspaces
from .linalg import TruncatedSvd, frobenius_norm, lowrank_frobenius, truncated_svd
from .tensor_store import DType, Side, Tensor, TensorStore, resolve_base_key

__all__ = [
    "DEFAULT_MODULES",
    "Mode",
    "Baseline",
    "Status",
    "TransferConfig",
    "LoraFactorPair",
    "TransferredAdapter",
    "KeyReport",
    "TransferReport",
    "NoTransferableKeys",
    "SvdCache",
    "project_full_update",
    "project_factor",
    "refactor_update",
    "interpolate_resize",
    "transfer_adapter",
]

log = logging.getLogger(__name__)

DEFAULT_MODULES = ("q_proj", "v_proj", "k_proj", "o_proj", "gate_proj", "up_proj", "down_proj")
THREADS_ENV = "CROSSLORA_THREADS"


class Mode(enum.Enum):
    FACTOR_PRESERVING = "factor"
    REFACTORED = "refactor"


class Baseline(enum.Enum):
    NONE = "none"
    INTERPOLATE = "interpolate"


class Status(enum.Enum):
    TRANSFERRED = "transferred"
    SKIPPED_MISSING_SOURCE = "skipped_missing_source"
    SKIPPED_MISSING_TARGET = "skipped_missing_target"
    SKIPPED_UNRESOLVABLE = "skipped_unresolvable"
    SKIPPED_NOT_TARGETED = "skipped_not_targeted"
    ERROR = "error"


class NoTransferableKeys(RuntimeError):
    """No adapter key could be transferred; ``report`` says why."""

    def __init__(self, report: "TransferReport"):
        counts = ", ".join(f"{k}={v}" for k, v in report.counts().items() if v)
        super().__init__(f"no adapter key was transferred ({counts or 'adapter is empty'})")
        self.report = report


@dataclass(frozen=True)
class TransferConfig:
    rank_r: int = 320
    out_alpha: float = 64
    target_modules: tuple[str, ...] = DEFAULT_MODULES
    mode: Mode = Mode.FACTOR_PRESERVING
    baseline: Baseline = Baseline.NONE
    seed: int = 0
    out_dtype: DType = DType.F16
    # alpha the source adapter was trained with; None reads adapter
    # metadata "lora_alpha" and falls back to the adapter rank (scale 1)
    source_alpha: float | None = None
    threads: int | None = None

    def __post_init__(self):
        if self.rank_r < 1:
            raise ValueError(f"rank_r must be >= 1, got {self.rank_r}")
        if not self.target_modules:
            raise ValueError("target_modules must not be empty")
        if self.out_alpha <= 0:
            raise ValueError(f"out_alpha must be positive, got {self.out_alpha}")
        object.__setattr__(self, "target_modules", tuple(self.target_modules))
        if float(self.out_alpha).is_integer():
            object.__setattr__(self, "out_alpha", int(self.out_alpha))

    def to_dict(self) -> dict[str, Any]:
        return {
            "rank_r": self.rank_r,
            "out_alpha": self.out_alpha,
            "target_modules": list(self.target_modules),
            "mode": self.mode.value,
            "baseline": self.baseline.value,
            "seed": self.seed,
            "out_dtype": self.out_dtype.value,
            "source_alpha": self.source_alpha,
        }


@dataclass(frozen=True, eq=False)
class LoraFactorPair:
    """One adapted weight: effective update ``(alpha / r_lora) * B @ A``."""

    base_key: str
    B: np.ndarray
    A: np.ndarray
    alpha: float
    name_A: str = ""
    name_B: str = ""

    def __post_init__(self):
        if self.B.ndim != 2 or self.A.ndim != 2 or self.B.shape[1] != self.A.shape[0]:
            raise ValueError(
                f"{self.base_key}: factor shapes B {self.B.shape} and A {self.A.shape} do not chain"
            )

    @property
    def r_lora(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.r_lora

    def delta(self) -> np.ndarray:
        return self.scale * (self.B @ self.A)


@dataclass
class TransferredAdapter:
    entries: dict[str, LoraFactorPair]
    out_rank: int
    out_alpha: float
    dtype: DType = DType.F16
    target_modules: tuple[str, ...] = DEFAULT_MODULES

    def to_store(self, metadata: dict[str, str] | None = None) -> TensorStore:
        tensors = []
        for pair in self.entries.values():
            tensors.append(Tensor.from_array(pair.name_A, pair.A, self.dtype))
            tensors.append(Tensor.from_array(pair.name_B, pair.B, self.dtype))
        return TensorStore.from_tensors(tensors, metadata)

    def adapter_config(self) -> dict[str, Any]:
        """PEFT-style adapter configuration for the emitted factors."""
        cfg: dict[str, Any] = {
            "r": self.out_rank,
            "lora_alpha": self.out_alpha,
            "target_modules": list(self.target_modules),
            "lora_dropout": 0.0,
            "bias": "none",
            "peft_type": "LORA",
        }
        pattern = {
            p.base_key.rsplit(".weight", 1)[0]: p.r_lora
            for p in self.entries.values() if p.r_lora != self.out_rank
        }
        if pattern:
            cfg["rank_pattern"] = pattern
        return cfg


@dataclass
class KeyReport:
    base_key: str
    status: Status
    eta_source: float | None = None
    eta_target: float | None = None
    residual_U: float | None = None
    residual_V: float | None = None
    projection_residual: float | None = None
    source_norm: float | None = None
    target_norm: float | None = None
    source_shape: list[int] | None = None
    target_shape: list[int] | None = None
    rank: int | None = None
    rank_clamped: bool = False
    note: str = ""

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["status"] = self.status.value
        return d


@dataclass
class TransferReport:
    per_key: list[KeyReport]
    config: dict[str, Any]
    wall_clock_seconds: float = 0.0
    notes: list[str] = field(default_factory=list)

    def counts(self) -> dict[str, int]:
        out = {s.value: 0 for s in Status}
        for k in self.per_key:
            out[k.status.value] += 1
        return out

    @property
    def transferred(self) -> int:
        return self.counts()[Status.TRANSFERRED.value]

    @property
    def skipped(self) -> int:
        return sum(v for k, v in self.counts().items() if k.startswith("skipped"))

    @property
    def errors(self) -> int:
        return self.counts()[Status.ERROR.value]

    def to_dict(self, wall_clock: bool = True) -> dict[str, Any]:
        aggregate: dict[str, Any] = {
            "keys": len(self.per_key),
            "transferred": self.transferred,
            "skipped": self.skipped,
            "errors": self.errors,
            "counts": self.counts(),
        }
        if wall_clock:
            aggregate["wall_clock_seconds"] = self.wall_clock_seconds
        return {
            "config": self.config,
            "aggregate": aggregate,
            "notes": list(self.notes),
            "per_key": [k.to_dict() for k in self.per_key],
        }


# ---------------------------------------------------------------------------
# projection kernels


def _coordinate_bases(amap: AlignmentMap):
    if amap.dims_match:
        return amap.U_aligned, amap.V_aligned
    return amap.svd_s.U, amap.svd_s.V


def project_full_update(dW, amap: AlignmentMap) -> np.ndarray:
    """Carry a dense source update into the target space.

    Output has the target weight's shape. With matching shapes this is the
    orthogonal projection onto the aligned row and column spaces.
    """
    dW = np.asarray(dW, dtype=np.float64)
    if dW.shape != amap.source_shape:
        raise ValueError(f"{amap.base_key}: update shape {dW.shape} != source weight {amap.source_shape}")
    L, R = _coordinate_bases(amap)
    core = L.T @ dW @ R
    return amap.U_aligned @ core @ amap.V_aligned.T


def project_factor(factor, side: Side, amap: AlignmentMap) -> np.ndarray:
    """Project one LoRA factor.

    ``Side.LEFT`` takes ``B`` of shape (m, r_lora) to (m', r_lora);
    ``Side.RIGHT`` takes ``A`` of shape (r_lora, n) to (r_lora, n').
    """
    factor = np.asarray(factor, dtype=np.float64)
    L, R = _coordinate_bases(amap)
    m, n = amap.source_shape
    if side is Side.LEFT:
        if factor.ndim != 2 or factor.shape[0] != m:
            raise ValueError(f"{amap.base_key}: left factor needs {m} rows, got {factor.shape}")
        return amap.U_aligned @ (L.T @ factor)
    if factor.ndim != 2 or factor.shape[1] != n:
        raise ValueError(f"{amap.base_key}: right factor needs {n} columns, got {factor.shape}")
    return (factor @ R) @ amap.V_aligned.T


def _refactor_core(core, amap: AlignmentMap, out_alpha: float, **names) -> LoraFactorPair:
    r = amap.r
    A_t = (r / out_alpha) * (core @ amap.V_aligned.T)
    return LoraFactorPair(amap.base_key, amap.U_aligned.copy(), A_t, out_alpha, **names)


def refactor_update(dW_t, amap: AlignmentMap, out_alpha: float) -> LoraFactorPair:
    """Re-express a projected update as rank-``r`` LoRA factors.

    ``B = U_aligned`` and ``A = (r / out_alpha) * C @ V_aligned.T`` so that
    standard LoRA scaling ``out_alpha / r`` reproduces ``dW_t``.
    """
    dW_t = np.asarray(dW_t, dtype=np.float64)
    if dW_t.shape != amap.target_shape:
        raise ValueError(f"{amap.base_key}: update shape {dW_t.shape} != target {amap.target_shape}")
    core = amap.U_aligned.T @ dW_t @ amap.V_aligned
    return _refactor_core(core, amap, out_alpha)


def interpolate_resize(factor, side: Side, target_dim: int) -> np.ndarray:
    """Resample the model-facing axis of a factor to ``target_dim``.

    Rows of a left factor or columns of a right factor are treated as
    samples on [0, 1] and linearly interpolated, end points aligned. The
    adapter-rank axis is untouched.
    """
    if target_dim < 1:
        raise ValueError(f"target_dim must be >= 1, got {target_dim}")
    factor = np.asarray(factor, dtype=np.float64)
    X = factor if side is Side.LEFT else factor.T
    n = X.shape[0]
    if n == target_dim:
        return factor.copy()
    if n == 1 or target_dim == 1:
        pos = np.zeros(target_dim)
    else:
        pos = np.arange(target_dim) * ((n - 1) / (target_dim - 1))
    lo = np.minimum(np.floor(pos).astype(np.intp), n - 1)
    hi = np.minimum(lo + 1, n - 1)
    w = (pos - lo)[:, None]
    out = (1.0 - w) * X[lo] + w * X[hi]
    return out if side is Side.LEFT else out.T


# ---------------------------------------------------------------------------
# orchestration


class SvdCache:
    """At-most-once truncated SVDs keyed by (store identity, key, rank, seed)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._items: dict[tuple, Future] = {}

    def get(self, store: TensorStore, key: str, rank: int, seed: int) -> TruncatedSvd:
        ident = (id(store), key, rank, seed)
        with self._lock:
            fut = self._items.get(ident)
            owner = fut is None
            if owner:
                fut = self._items[ident] = Future()
        if owner:
            try:
                fut.set_result(truncated_svd(store[key].matrix(), rank, seed))
            except BaseException as exc:
                fut.set_exception(exc)
        return fut.result()

    def __len__(self) -> int:
        return len(self._items)


def _worker_count(cfg: TransferConfig) -> int:
    n = cfg.threads or os.cpu_count() or 1
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            log.warning("ignoring non-integer %s=%r", THREADS_ENV, cap)
    return max(1, n)


def _source_alpha(adapter: TensorStore, cfg: TransferConfig, r_lora: int) -> float:
    if cfg.source_alpha is not None:
        return float(cfg.source_alpha)
    meta = adapter.metadata or {}
    if "lora_alpha" in meta:
        return float(meta["lora_alpha"])
    return float(r_lora)


def _roundtrip(x: np.ndarray, dtype: DType) -> np.ndarray:
    return Tensor.from_array("_", x, dtype).numpy().astype(np.float64)


def _transfer_key(base_key, names, source, target, adapter, cfg, cache):
    report = KeyReport(base_key, Status.TRANSFERRED)
    B = adapter[names[Side.LEFT]].matrix()
    A = adapter[names[Side.RIGHT]].matrix()
    W_s, W_t = source[base_key], target[base_key]
    if W_s.ndim != 2 or W_t.ndim != 2:
        report.status, report.note = Status.ERROR, "base weight is not a matrix"
        return report, None
    m, n = W_s.shape
    m_t, n_t = W_t.shape
    report.source_shape, report.target_shape = [m, n], [m_t, n_t]
    if B.shape[0] != m or A.shape[1] != n or B.shape[1] != A.shape[0]:
        report.status = Status.ERROR
        report.note = f"factor shapes B {list(B.shape)}, A {list(A.shape)} do not fit weight {[m, n]}"
        return report, None

    r_lora = A.shape[0]
    scale_s = _source_alpha(adapter, cfg, r_lora) / r_lora
    name_kw = dict(name_A=names[Side.RIGHT], name_B=names[Side.LEFT])

    if cfg.baseline is Baseline.INTERPOLATE:
        B_t = interpolate_resize(B, Side.LEFT, m_t)
        A_t = interpolate_resize(A, Side.RIGHT, n_t)
        coreL, coreR = B_t * scale_s, A_t
        amap = None
    else:
        svd_s = cache.get(source, base_key, cfg.rank_r, cfg.seed)
        svd_t = cache.get(target, base_key, cfg.rank_r, cfg.seed)
        amap = align_subspaces(svd_s, svd_t, base_key)
        report.eta_source, report.eta_target = svd_s.eta, svd_t.eta
        report.residual_U, report.residual_V = amap.residual_U, amap.residual_V
        report.rank = amap.r
        report.rank_clamped = amap.rank_clamped or svd_s.clamped or svd_t.clamped
        if report.rank_clamped:
            report.note = f"truncation rank clamped from {cfg.rank_r} to {amap.r}"
        coreL = project_factor(B, Side.LEFT, amap) * scale_s
        coreR = project_factor(A, Side.RIGHT, amap)

    if cfg.mode is Mode.REFACTORED and amap is not None:
        L, R = _coordinate_bases(amap)
        core = scale_s * ((L.T @ B) @ (A @ R))
        pair = _refactor_core(core, amap, cfg.out_alpha, **name_kw)
    else:
        # keep the source rank; fold scale_s / scale_out into B
        scale_out = cfg.out_alpha / r_lora
        pair = LoraFactorPair(base_key, coreL / scale_out, coreR, cfg.out_alpha, **name_kw)

    pair = LoraFactorPair(base_key, _roundtrip(pair.B, cfg.out_dtype),
                          _roundtrip(pair.A, cfg.out_dtype), pair.alpha, **name_kw)

    report.source_norm = scale_s * lowrank_frobenius(B, A)
    report.target_norm = pair.scale * lowrank_frobenius(pair.B, pair.A)
    if (m, n) == (m_t, n_t):
        if report.source_norm == 0.0:
            report.projection_residual = 0.0
        else:
            diff = lowrank_frobenius(np.hstack([scale_s * B, -pair.scale * pair.B]),
                                     np.vstack([A, pair.A]))
            report.projection_residual = diff / report.source_norm
    log.info("%s: %s -> %s, ||dW_t||/||dW_s||=%.4g", base_key, report.source_shape,
             report.target_shape, report.target_norm / report.source_norm if report.source_norm else 0.0)
    return report, pair


def transfer_adapter(source: TensorStore, target: TensorStore, adapter: TensorStore,
                     cfg: TransferConfig | None = None, cache: SvdCache | None = None):
    """Transfer every LoRA pair in ``adapter`` from ``source`` onto ``target``.

    Keys whose base weight is missing from either store are skipped and
    counted. Returns ``(TransferredAdapter, TransferReport)``; raises
    :class:`NoTransferableKeys` (carrying the report) when nothing could be
    transferred.
    """
    cfg = cfg or TransferConfig()
    if cache is None:
        cache = SvdCache()
    t0 = time.perf_counter()

    groups: dict[str, dict[Side, str]] = {}
    modules: dict[str, str] = {}
    reports: dict[str, KeyReport] = {}
    for name in adapter:
        key = resolve_base_key(name)
        if key is None:
            reports[name] = KeyReport(name, Status.SKIPPED_UNRESOLVABLE, note="not a lora_A/lora_B name")
            continue
        groups.setdefault(key.base_key, {})[key.side] = name
        modules[key.base_key] = key.module_tag

    work = []
    for base_key, names in groups.items():
        if modules[base_key] not in cfg.target_modules:
            reports[base_key] = KeyReport(base_key, Status.SKIPPED_NOT_TARGETED,
                                          note=f"module {modules[base_key]!r} not targeted")
        elif len(names) != 2:
            have = next(iter(names)).value
            reports[base_key] = KeyReport(base_key, Status.ERROR, note=f"unpaired factor: only the {have} factor present")
        elif base_key not in source:
            reports[base_key] = KeyReport(base_key, Status.SKIPPED_MISSING_SOURCE)
        elif base_key not in target:
            reports[base_key] = KeyReport(base_key, Status.SKIPPED_MISSING_TARGET)
        else:
            work.append((base_key, names))

    pairs: dict[str, LoraFactorPair] = {}
    n_workers = min(_worker_count(cfg), max(1, len(work)))

    def run(item):
        return _transfer_key(item[0], item[1], source, target, adapter, cfg, cache)

    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            results = list(pool.map(run, work))
    else:
        results = [run(item) for item in work]
    for (base_key, _), (rep, pair) in zip(work, results):
        reports[base_key] = rep
        if pair is not None:
            pairs[base_key] = pair

    notes = []
    if any(r.source_shape and r.source_shape != r.target_shape for r in reports.values()):
        notes.append("shape mismatch: cores taken in source singular coordinates and rebuilt in aligned target bases")
    report = TransferReport([reports[k] for k in sorted(reports)], cfg.to_dict(), notes=notes)
    pairs = dict(sorted(pairs.items()))
    if cfg.mode is Mode.REFACTORED and cfg.baseline is Baseline.NONE:
        out_rank = max((p.r_lora for p in pairs.values()), default=cfg.rank_r)
    else:
        out_rank = max((p.r_lora for p in pairs.values()), default=0)
    result = TransferredAdapter(pairs, out_rank, cfg.out_alpha, cfg.out_dtype,
                                tuple(m for m in cfg.target_modules))
    report.wall_clock_seconds = time.perf_counter() - t0
    log.info("transferred %d of %d keys in %.2fs", report.transferred, len(report.per_key),
             report.wall_clock_seconds)
    if report.transferred == 0:
        raise NoTransferableKeys(report)
    return result, report
