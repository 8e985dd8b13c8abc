"""Seeded synthetic base models and LoRA adapters for desk-scale runs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_store import DType, Tensor, TensorStore

__all__ = ["SynthSpec", "generate_model_pair", "generate_lora", "weight_names", "lora_names"]

ATTN = ("q_proj", "k_proj", "v_proj", "o_proj")
MLP = ("gate_proj", "up_proj", "down_proj")
ADAPTER_PREFIX = "base_model.model."


@dataclass(frozen=True)
class SynthSpec:
    layers: int = 2
    hidden_s: int = 64
    hidden_t: int = 64
    intermediate_s: int = 128
    intermediate_t: int = 128
    spectrum_rho: float = 0.94
    subspace_overlap: float = 1.0
    lora_rank: int = 8
    seed: int = 0
    vocab: int = 32
    dtype: DType = DType.F32

    def __post_init__(self):
        sizes = (self.hidden_s, self.hidden_t, self.intermediate_s, self.intermediate_t)
        if min(sizes) < self.lora_rank:
            raise ValueError(f"all sizes must be >= lora_rank {self.lora_rank}, got {sizes}")
        if not 0.0 <= self.subspace_overlap <= 1.0:
            raise ValueError(f"subspace_overlap must be in [0, 1], got {self.subspace_overlap}")
        if not 0.0 < self.spectrum_rho < 1.0:
            raise ValueError(f"spectrum_rho must be in (0, 1), got {self.spectrum_rho}")
        if self.layers < 1:
            raise ValueError("need at least one layer")

    def shape(self, module: str, side: str) -> tuple[int, int]:
        h = self.hidden_s if side == "s" else self.hidden_t
        i = self.intermediate_s if side == "s" else self.intermediate_t
        if module in ATTN:
            return h, h
        if module == "down_proj":
            return h, i
        return i, h


def weight_names(layer: int) -> dict[str, str]:
    names = {m: f"model.layers.{layer}.self_attn.{m}.weight" for m in ATTN}
    names.update({m: f"model.layers.{layer}.mlp.{m}.weight" for m in MLP})
    return names


def lora_names(base_key: str, prefix: str = ADAPTER_PREFIX) -> tuple[str, str]:
    """``(lora_A name, lora_B name)`` for a base weight key."""
    stem = base_key[: -len(".weight")]
    return f"{prefix}{stem}.lora_A.weight", f"{prefix}{stem}.lora_B.weight"


def _frames(rng_shared, rng_t, dim_s, dim_t, k_s, k_t, overlap):
    Z = rng_shared.standard_normal((max(dim_s, dim_t), max(k_s, k_t)))
    Zs = Z[:dim_s, :k_s]
    Zt = Z[:dim_t, :k_t]
    if overlap < 1.0:
        Zt = overlap * Zt + np.sqrt(1.0 - overlap ** 2) * rng_t.standard_normal(Zt.shape)
    return np.linalg.qr(Zs)[0], np.linalg.qr(Zt)[0]


def generate_model_pair(spec: SynthSpec) -> tuple[TensorStore, TensorStore]:
    """Source and target base models with geometric singular spectra.

    Each projection weight has singular values ``rho**(i/2)``. The dominant
    singular directions of source and target are correlated by
    ``subspace_overlap``; at overlap 1 with equal sizes both stores are
    identical.
    """
    src, tgt = [], []
    for layer in range(spec.layers):
        for j, (module, key) in enumerate(sorted(weight_names(layer).items())):
            (ms, ns), (mt, nt) = spec.shape(module, "s"), spec.shape(module, "t")
            ks, kt = min(ms, ns), min(mt, nt)
            seeds = np.random.SeedSequence([spec.seed, layer, j]).spawn(4)
            shared_u, shared_v, own_u, own_v = (np.random.default_rng(s) for s in seeds)
            Us, Ut = _frames(shared_u, own_u, ms, mt, ks, kt, spec.subspace_overlap)
            Vs, Vt = _frames(shared_v, own_v, ns, nt, ks, kt, spec.subspace_overlap)
            Ss = spec.spectrum_rho ** (np.arange(ks) / 2.0)
            St = spec.spectrum_rho ** (np.arange(kt) / 2.0)
            src.append(Tensor.from_array(key, (Us * Ss) @ Vs.T, spec.dtype))
            tgt.append(Tensor.from_array(key, (Ut * St) @ Vt.T, spec.dtype))
        for out, h in ((src, spec.hidden_s), (tgt, spec.hidden_t)):
            out.append(Tensor.from_array(f"model.layers.{layer}.input_layernorm.weight",
                                         np.ones(h), spec.dtype))
    for h, out in ((spec.hidden_s, src), (spec.hidden_t, tgt)):
        emb = np.random.default_rng([spec.seed, 10_000]).standard_normal((spec.vocab, h)) * 0.02
        out.append(Tensor.from_array("model.embed_tokens.weight", emb, spec.dtype))
    return TensorStore.from_tensors(src), TensorStore.from_tensors(tgt)


def _frame(rng, basis, k):
    # k orthonormal columns inside span(basis)
    return basis @ np.linalg.qr(rng.standard_normal((basis.shape[1], k)))[0]


def generate_lora(base: TensorStore, modules, lora_rank: int, in_subspace_fraction: float,
                  seed: int = 0, *, subspace_rank: int = 32, alpha: float | None = None,
                  prefix: str = ADAPTER_PREFIX, dtype: DType = DType.F32) -> TensorStore:
    """LoRA factors for every 2-D weight of ``base`` whose module is listed.

    ``in_subspace_fraction`` is the share of each update's squared
    Frobenius norm lying inside the base weight's top-``subspace_rank``
    singular subspaces (both row and column side); the remainder lies in
    the orthogonal complements. Each factor therefore puts
    ``sqrt(in_subspace_fraction)`` of its energy inside.
    """
    if not 0.0 <= in_subspace_fraction <= 1.0:
        raise ValueError(f"in_subspace_fraction must be in [0, 1], got {in_subspace_fraction}")
    modules = set(modules)
    present = {k.rsplit(".", 2)[-2] for k in base if base[k].ndim == 2}
    missing = modules - present
    if missing:
        raise KeyError(f"modules not found in base: {sorted(missing)}")
    alpha = float(2 * lora_rank if alpha is None else alpha)
    # per-factor amplitude; the product's inside share is g**4
    g = in_subspace_fraction ** 0.25
    arrays = {}
    for idx, (key, t) in enumerate(base.items()):
        if t.ndim != 2 or key.rsplit(".", 2)[-2] not in modules:
            continue
        W = t.matrix()
        m, n = W.shape
        r0 = min(subspace_rank, m, n)
        if r0 < lora_rank or min(m, n) - r0 < lora_rank:
            raise ValueError(f"{key}: shape {W.shape} leaves no room for rank {lora_rank} "
                             f"inside and outside a rank-{r0} subspace")
        U, _, Vt = np.linalg.svd(W)
        V = Vt.T
        rng = np.random.default_rng([seed, idx])
        B = g * _frame(rng, U[:, :r0], lora_rank) + np.sqrt(1 - g * g) * _frame(rng, U[:, r0:], lora_rank)
        A = g * _frame(rng, V[:, :r0], lora_rank) + np.sqrt(1 - g * g) * _frame(rng, V[:, r0:], lora_rank)
        B = B * (0.05 * (1.0 + rng.random(lora_rank)))
        name_A, name_B = lora_names(key, prefix)
        arrays[name_A] = A.T
        arrays[name_B] = B
    meta = {"lora_alpha": f"{alpha:g}", "r": str(lora_rank)}
    return TensorStore.from_arrays(arrays, dtype, meta)
