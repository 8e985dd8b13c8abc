"""Reading and writing single-file tensor checkpoints.

The on-disk layout is the common ``.safetensors`` one: an unsigned 64-bit
little-endian header length, a UTF-8 JSON header, then a flat byte buffer
holding every tensor row-major and little-endian.

Writing is deterministic: tensors are laid out in lexicographic name order
and the header is serialized with sorted keys and no whitespace, so equal
stores always produce identical bytes.
"""

from __future__ import annotations

import enum
import json
import math
import os
import re
import struct
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

__all__ = [
    "DType",
    "Tensor",
    "TensorStore",
    "TensorFileError",
    "LoraKey",
    "Side",
    "read_tensor_file",
    "write_tensor_file",
    "cast_tensor",
    "resolve_base_key",
]

F16_MAX = 65504.0
_HEADER_LIMIT = 100 * 1024 * 1024


class TensorFileError(ValueError):
    """Raised for malformed checkpoint files and invalid tensors."""


class DType(enum.Enum):
    F16 = "F16"
    BF16 = "BF16"
    F32 = "F32"

    @property
    def itemsize(self) -> int:
        return 4 if self is DType.F32 else 2

    @property
    def storage(self) -> np.dtype:
        # BF16 has no numpy dtype; it is carried as raw 16-bit words.
        return np.dtype({"F16": "<f2", "BF16": "<u2", "F32": "<f4"}[self.value])


@dataclass(frozen=True)
class Tensor:
    """A named dense tensor held as its raw little-endian bytes."""

    name: str
    dtype: DType
    shape: tuple[int, ...]
    data: bytes = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if any(d < 0 for d in self.shape):
            raise TensorFileError(f"{self.name!r}: negative dimension in {self.shape}")
        expected = math.prod(self.shape) * self.dtype.itemsize
        if len(self.data) != expected:
            raise TensorFileError(
                f"{self.name!r}: {len(self.data)} data bytes, expected {expected} "
                f"for {self.dtype.value} {list(self.shape)}"
            )

    @classmethod
    def from_array(cls, name: str, array, dtype: DType | None = None) -> "Tensor":
        """Build a tensor from a numpy array, converting to ``dtype`` if given.

        Without ``dtype`` a float16 array is stored as F16 and anything else
        as F32.
        """
        array = np.asarray(array)
        if dtype is None:
            dtype = DType.F16 if array.dtype == np.float16 else DType.F32
        words = _encode(np.asarray(array, dtype=np.float64)
                        if array.dtype not in (np.float16, np.float32) else array, dtype)
        return cls(name, dtype, array.shape, words.tobytes())

    @property
    def nbytes(self) -> int:
        return len(self.data)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def numpy(self) -> np.ndarray:
        """Values as float32 (BF16 is widened), shaped, read-only."""
        raw = np.frombuffer(self.data, dtype=self.dtype.storage).reshape(self.shape)
        if self.dtype is DType.BF16:
            return (raw.astype(np.uint32) << 16).view(np.float32)
        return raw.astype(np.float32, copy=False)

    def matrix(self) -> np.ndarray:
        """Values as a float64 2-D array; rejects other ranks."""
        if self.ndim != 2:
            raise TensorFileError(f"{self.name!r}: expected a matrix, got shape {list(self.shape)}")
        return self.numpy().astype(np.float64)


@dataclass(frozen=True)
class TensorStore(Mapping):
    """Immutable name -> Tensor map with optional string metadata.

    Iteration is in lexicographic name order.
    """

    entries: dict[str, Tensor] = field(default_factory=dict)
    metadata: dict[str, str] | None = None

    def __post_init__(self):
        for key, t in self.entries.items():
            if key != t.name:
                raise TensorFileError(f"entry key {key!r} does not match tensor name {t.name!r}")
        object.__setattr__(self, "entries", dict(sorted(self.entries.items())))
        if self.metadata is not None:
            for k, v in self.metadata.items():
                if not isinstance(k, str) or not isinstance(v, str):
                    raise TensorFileError("metadata keys and values must be strings")
            object.__setattr__(self, "metadata", dict(sorted(self.metadata.items())))

    @classmethod
    def from_tensors(cls, tensors, metadata: Mapping[str, str] | None = None) -> "TensorStore":
        entries = {}
        for t in tensors:
            if t.name in entries:
                raise TensorFileError(f"duplicate tensor name {t.name!r}")
            entries[t.name] = t
        return cls(entries, dict(metadata) if metadata is not None else None)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], dtype: DType | None = None,
                    metadata: Mapping[str, str] | None = None) -> "TensorStore":
        return cls.from_tensors(
            (Tensor.from_array(k, v, dtype) for k, v in arrays.items()), metadata
        )

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __hash__(self):
        return id(self)


# ---------------------------------------------------------------------------
# dtype conversion


def _f32_to_bf16_words(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    bits = x.view(np.uint32).astype(np.uint64)
    rounded = ((bits + 0x7FFF + ((bits >> 16) & 1)) >> 16).astype(np.uint16)
    # values that round past the largest finite bf16 saturate to it
    finite_in = np.isfinite(x)
    overflow = finite_in & ((rounded & 0x7F80) == 0x7F80)
    rounded[overflow] = np.where(x[overflow] > 0, 0x7F7F, 0xFF7F).astype(np.uint16)
    nan = np.isnan(x)
    rounded[nan] = 0x7FC0
    return rounded


def _encode(values: np.ndarray, dtype: DType) -> np.ndarray:
    if dtype is DType.F16:
        v = np.asarray(values)
        if v.dtype != np.float16:
            v = np.clip(v.astype(np.float64), -F16_MAX, F16_MAX).astype("<f2")
        return np.ascontiguousarray(v, dtype="<f2")
    if dtype is DType.BF16:
        v32 = np.asarray(values, dtype=np.float64)
        with np.errstate(over="ignore"):
            v32 = v32.astype(np.float32)
        return np.ascontiguousarray(_f32_to_bf16_words(v32), dtype="<u2")
    return np.ascontiguousarray(values, dtype="<f4")


def cast_tensor(t: Tensor, target: DType) -> Tensor:
    """Convert ``t`` to ``target`` with round-to-nearest-even.

    Values beyond the F16 range saturate to +-65504 instead of becoming
    infinite. Shape and name are kept.
    """
    if t.dtype is target:
        return t
    words = _encode(t.numpy(), target)
    return Tensor(t.name, target, t.shape, words.tobytes())


# ---------------------------------------------------------------------------
# file IO


def write_tensor_file(store: TensorStore, path: str | os.PathLike) -> None:
    """Serialize ``store`` to ``path``; equal stores give identical bytes."""
    header: dict[str, object] = {}
    if store.metadata is not None:
        header["__metadata__"] = store.metadata
    cursor = 0
    for name, t in store.items():
        if not name:
            raise TensorFileError("tensor with zero-length name")
        header[name] = {
            "dtype": t.dtype.value,
            "shape": list(t.shape),
            "data_offsets": [cursor, cursor + t.nbytes],
        }
        cursor += t.nbytes
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    raw = blob.encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for t in store.values():
            f.write(t.data)


def read_tensor_file(path: str | os.PathLike) -> TensorStore:
    """Load every tensor and the metadata block from ``path``."""
    with open(path, "rb") as f:
        buf = f.read()
    return parse_tensor_bytes(buf)


def parse_tensor_bytes(buf: bytes) -> TensorStore:
    if len(buf) < 8:
        raise TensorFileError(f"file is {len(buf)} bytes, too short for the 8-byte header length")
    (n,) = struct.unpack_from("<Q", buf, 0)
    if n > _HEADER_LIMIT or 8 + n > len(buf):
        raise TensorFileError(f"header length {n} at byte 0 exceeds file size {len(buf)}")
    try:
        header = json.loads(buf[8:8 + n].decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise TensorFileError(f"header is not UTF-8 (byte {8 + exc.start})") from exc
    except json.JSONDecodeError as exc:
        raise TensorFileError(f"header is not JSON (byte {8 + exc.pos})") from exc
    if not isinstance(header, dict):
        raise TensorFileError("header must be a JSON object")

    data = memoryview(buf)[8 + n:]
    metadata = header.pop("__metadata__", None)
    if metadata is not None and (
        not isinstance(metadata, dict)
        or not all(isinstance(v, str) for v in metadata.values())
    ):
        raise TensorFileError("__metadata__ must map strings to strings")

    spans = []
    tensors = []
    for name, info in header.items():
        try:
            dtype = DType(info["dtype"])
        except (KeyError, TypeError, ValueError):
            raise TensorFileError(f"{name!r}: unknown dtype {info.get('dtype') if isinstance(info, dict) else info!r}") from None
        try:
            shape = [int(d) for d in info["shape"]]
            begin, end = (int(o) for o in info["data_offsets"])
        except (KeyError, TypeError, ValueError):
            raise TensorFileError(f"{name!r}: missing or malformed shape/data_offsets") from None
        if begin < 0 or end < begin or end > len(data):
            raise TensorFileError(
                f"{name!r}: data_offsets [{begin}, {end}] outside buffer of {len(data)} bytes"
            )
        spans.append((begin, end, name))
        tensors.append(Tensor(name, dtype, tuple(shape), bytes(data[begin:end])))

    spans.sort()
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise TensorFileError(f"{n1!r}: data_offsets [{b1}, {e1}] overlap {n0!r} [{b0}, {e0}]")
    return TensorStore.from_tensors(tensors, metadata)


# ---------------------------------------------------------------------------
# LoRA parameter names


class Side(enum.Enum):
    LEFT = "left"    # lora_B, (m x r)
    RIGHT = "right"  # lora_A, (r x n)


@dataclass(frozen=True)
class LoraKey:
    raw: str
    base_key: str
    side: Side
    module_tag: str


_LORA_RE = re.compile(r"^(?:base_model\.model\.)?(?P<stem>.+)\.lora_(?P<ab>[AB])\.weight$")


def resolve_base_key(lora_param_name: str) -> LoraKey | None:
    """Map a LoRA factor name to the base weight it adapts.

    >>> resolve_base_key("base_model.model.model.layers.0.self_attn.q_proj.lora_A.weight").base_key
    'model.layers.0.self_attn.q_proj.weight'

    Names that are not ``lora_A``/``lora_B`` factors give ``None``.
    """
    m = _LORA_RE.match(lora_param_name)
    if m is None:
        return None
    stem = m.group("stem")
    side = Side.RIGHT if m.group("ab") == "A" else Side.LEFT
    return LoraKey(lora_param_name, stem + ".weight", side, stem.rsplit(".", 1)[-1])
