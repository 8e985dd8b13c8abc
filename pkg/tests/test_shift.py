import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.interpolate import interp1d

from conftest import effective_updates, rel_fro
from loratransfer import (
    DType,
    Mode,
    NoTransferableKeys,
    Status,
    SynthSpec,
    Tensor,
    TransferConfig,
    align_subspaces,
    generate_lora,
    generate_model_pair,
    interpolate_resize,
    project_factor,
    project_full_update,
    refactor_update,
    transfer_adapter,
    truncated_svd,
    write_tensor_file,
)
from loratransfer.shift import Baseline, SvdCache
from loratransfer.synth import lora_names
from loratransfer.tensor_store import Side, TensorStore

QPROJ = "model.layers.0.self_attn.q_proj.weight"


def amap_for(shape_s, shape_t, r, seed, same=False):
    rng = np.random.default_rng(seed)
    W_s = rng.standard_normal(shape_s)
    W_t = W_s if same else rng.standard_normal(shape_t)
    return align_subspaces(truncated_svd(W_s, r), truncated_svd(W_t, r)), W_s


def dense_projection(dW, amap):
    Pu = amap.U_aligned @ amap.U_aligned.T
    Pv = amap.V_aligned @ amap.V_aligned.T
    return Pu @ dW @ Pv


# --- full update projection -------------------------------------------------


def test_in_subspace_update_preserved():
    amap, _ = amap_for((24, 18), None, 6, 0, same=True)
    C = np.random.default_rng(1).standard_normal((6, 6))
    dW = amap.svd_s.U @ C @ amap.svd_s.V.T
    out = project_full_update(dW, amap)
    assert rel_fro(out, dW) <= 1e-4


def test_discarded_directions_annihilated():
    rng = np.random.default_rng(2)
    W = rng.standard_normal((24, 18))
    U, _, Vt = np.linalg.svd(W)
    amap = align_subspaces(truncated_svd(W, 6), truncated_svd(W, 6))
    dW = U[:, 6:10] @ rng.standard_normal((4, 4)) @ Vt[8:12]
    out = project_full_update(dW, amap)
    assert np.linalg.norm(out) <= 1e-4 * np.linalg.norm(dW)


def test_dims_match_against_dense_projector():
    amap, _ = amap_for((20, 16), (20, 16), 5, 3)
    dW = np.random.default_rng(4).standard_normal((20, 16))
    out = project_full_update(dW, amap)
    oracle = dense_projection(dW, amap)
    assert abs(np.linalg.norm(dW - out) - np.linalg.norm(dW - oracle)) <= 1e-6
    np.testing.assert_allclose(out, oracle, atol=1e-10)


def test_shape_checks():
    amap, _ = amap_for((8, 6), (8, 6), 2, 5)
    with pytest.raises(ValueError):
        project_full_update(np.ones((6, 8)), amap)
    with pytest.raises(ValueError):
        project_factor(np.ones((7, 2)), Side.LEFT, amap)
    with pytest.raises(ValueError):
        project_factor(np.ones((2, 7)), Side.RIGHT, amap)


# --- factor projection ------------------------------------------------------


def test_left_factor_in_subspace_preserved():
    amap, _ = amap_for((16, 12), None, 5, 6, same=True)
    B = amap.svd_s.U[:, :3]
    np.testing.assert_allclose(project_factor(B, Side.LEFT, amap), B, atol=1e-4)


def test_left_factor_orthogonal_annihilated():
    rng = np.random.default_rng(7)
    W = rng.standard_normal((16, 12))
    U = np.linalg.svd(W)[0]
    amap = align_subspaces(truncated_svd(W, 5), truncated_svd(W, 5))
    B = U[:, 5:8]
    assert np.linalg.norm(project_factor(B, Side.LEFT, amap)) <= 1e-10


def test_mismatch_factor_path_equals_full_path():
    amap, _ = amap_for((6, 5), (8, 7), 3, 8)
    rng = np.random.default_rng(9)
    B, A = rng.standard_normal((6, 2)), rng.standard_normal((2, 5))
    Bt = project_factor(B, Side.LEFT, amap)
    At = project_factor(A, Side.RIGHT, amap)
    assert Bt.shape == (8, 2) and At.shape == (2, 7)
    np.testing.assert_allclose(Bt @ At, project_full_update(B @ A, amap), atol=1e-5)


# --- invariants -------------------------------------------------------------

shapes = st.tuples(st.integers(4, 24), st.integers(4, 24))


@settings(max_examples=40, deadline=None)
@given(shapes, shapes, st.integers(1, 6), st.integers(0, 2**32 - 1), st.booleans())
def test_linear_contractive_consistent(shape_s, shape_t, r, seed, match):
    if match:
        shape_t = shape_s
    amap, _ = amap_for(shape_s, shape_t, r, seed)
    rng = np.random.default_rng(seed + 1)
    d1, d2 = rng.standard_normal(shape_s), rng.standard_normal(shape_s)
    a, b = rng.standard_normal(2)
    lhs = project_full_update(a * d1 + b * d2, amap)
    rhs = a * project_full_update(d1, amap) + b * project_full_update(d2, amap)
    assert np.max(np.abs(lhs - rhs)) <= 1e-5
    out = project_full_update(d1, amap)
    assert np.linalg.norm(out) <= np.linalg.norm(d1) + 1e-5
    if match:
        assert np.max(np.abs(project_full_update(out, amap) - out)) <= 1e-5
    B = rng.standard_normal((shape_s[0], 3))
    A = rng.standard_normal((3, shape_s[1]))
    factored = project_factor(B, Side.LEFT, amap) @ project_factor(A, Side.RIGHT, amap)
    assert np.max(np.abs(factored - project_full_update(B @ A, amap))) <= 1e-5


def test_error_identity_self_transfer():
    # ||dW - P(dW)||^2 equals the energy of dW outside the rank-r subspaces
    rng = np.random.default_rng(10)
    W = rng.standard_normal((30, 22))
    U, _, Vt = np.linalg.svd(W)
    r = 7
    amap = align_subspaces(truncated_svd(W, r), truncated_svd(W, r))
    dW = rng.standard_normal((30, 4)) @ rng.standard_normal((4, 22))
    out = project_full_update(dW, amap)
    coords = U.T @ dW @ Vt.T
    outside = np.sum(coords ** 2) - np.sum(coords[:r, :r] ** 2)
    assert np.sum((dW - out) ** 2) == pytest.approx(outside, rel=1e-5)


# --- refactoring ------------------------------------------------------------


def test_refactor_neutral_alpha():
    amap, _ = amap_for((20, 14), (20, 14), 6, 11)
    dW_t = project_full_update(np.random.default_rng(12).standard_normal((20, 14)), amap)
    pair = refactor_update(dW_t, amap, out_alpha=6)
    assert pair.scale == 1.0 and pair.r_lora == 6
    np.testing.assert_allclose(pair.B @ pair.A, dW_t, atol=1e-5)


def test_refactor_rank320_alpha64():
    amap, _ = amap_for((400, 360), (400, 360), 320, 13)
    dW_t = project_full_update(np.random.default_rng(14).standard_normal((400, 360)), amap)
    pair = refactor_update(dW_t, amap, out_alpha=64)
    assert pair.r_lora == 320 and pair.B.shape == (400, 320) and pair.A.shape == (320, 360)
    np.testing.assert_allclose(pair.B @ pair.A, 5.0 * dW_t, atol=1e-9)
    np.testing.assert_allclose(pair.delta(), dW_t, atol=1e-10)


def test_refactored_size_linear_in_rank(tmp_path):
    src, tgt = generate_model_pair(SynthSpec(layers=1, hidden_s=384, hidden_t=384,
                                             intermediate_s=448, intermediate_t=448))
    adapter = generate_lora(src, ["q_proj", "down_proj"], 8, 0.5)
    sizes = {}
    for r in (80, 320):
        cfg = TransferConfig(rank_r=r, mode=Mode.REFACTORED, target_modules=("q_proj", "down_proj"))
        result, _ = transfer_adapter(src, tgt, adapter, cfg)
        write_tensor_file(result.to_store(), tmp_path / f"{r}")
        sizes[r] = (tmp_path / f"{r}").stat().st_size
    assert sizes[320] / sizes[80] == pytest.approx(4.0, rel=0.02)


# --- interpolation baseline -------------------------------------------------


def test_interpolate_identity():
    F = np.random.default_rng(0).standard_normal((6, 3))
    np.testing.assert_array_equal(interpolate_resize(F, Side.LEFT, 6), F)


def test_interpolate_constant_column():
    F = np.full((4, 2), 3.25)
    np.testing.assert_allclose(interpolate_resize(F, Side.LEFT, 8), np.full((8, 2), 3.25))
    np.testing.assert_allclose(interpolate_resize(F.T, Side.RIGHT, 8), np.full((2, 8), 3.25))


def _oracle_resize(F, n):
    x = np.linspace(0, 1, F.shape[0])
    return interp1d(x, F, axis=0, kind="linear")(np.linspace(0, 1, n))


def test_interpolate_down_up_against_oracle():
    F = np.random.default_rng(1).standard_normal((8, 3))
    round_trip = interpolate_resize(interpolate_resize(F, Side.LEFT, 4), Side.LEFT, 8)
    oracle = _oracle_resize(_oracle_resize(F, 4), 8)
    assert np.linalg.norm(round_trip - F) > 0
    assert abs(np.linalg.norm(round_trip - F) - np.linalg.norm(oracle - F)) <= 1e-6
    A = F.T
    np.testing.assert_allclose(interpolate_resize(A, Side.RIGHT, 13), _oracle_resize(F, 13).T, atol=1e-12)


def test_interpolate_bad_dim():
    with pytest.raises(ValueError):
        interpolate_resize(np.ones((3, 2)), Side.LEFT, 0)


# --- transfer_adapter -------------------------------------------------------


def test_self_transfer_f16(same_pair, in_subspace_adapter):
    src, tgt = same_pair
    result, report = transfer_adapter(src, tgt, in_subspace_adapter, TransferConfig(rank_r=32))
    assert report.transferred == 14 and report.skipped == 0
    store = result.to_store()
    assert {t.dtype for t in store.values()} == {DType.F16}
    before = effective_updates(in_subspace_adapter)
    after = effective_updates(store, alpha=64)
    assert before.keys() == after.keys()
    for k in before:
        assert rel_fro(after[k], before[k]) <= 2e-3


def test_self_transfer_f32_refactored(same_pair, in_subspace_adapter):
    src, tgt = same_pair
    cfg = TransferConfig(rank_r=32, mode=Mode.REFACTORED, out_dtype=DType.F32)
    result, report = transfer_adapter(src, tgt, in_subspace_adapter, cfg)
    assert result.out_rank == 32
    before = effective_updates(in_subspace_adapter)
    after = effective_updates(result.to_store(), alpha=64)
    for k in before:
        assert rel_fro(after[k], before[k]) <= 1e-4
    assert all(k.projection_residual <= 1e-4 for k in report.per_key)


def test_orthogonal_adapter_vanishes(same_pair):
    src, tgt = same_pair
    adapter = generate_lora(src, ["q_proj", "up_proj"], 8, 0.0, subspace_rank=32)
    result, report = transfer_adapter(src, tgt, adapter, TransferConfig(rank_r=32, out_dtype=DType.F32))
    for k in report.per_key:
        assert k.target_norm <= 1e-4 * k.source_norm
        assert k.projection_residual == pytest.approx(1.0, abs=1e-6)


def test_half_in_subspace_energy(same_pair):
    src, tgt = same_pair
    adapter = generate_lora(src, ["v_proj", "down_proj"], 8, 0.5, seed=4, subspace_rank=32)
    _, report = transfer_adapter(src, tgt, adapter, TransferConfig(rank_r=32, out_dtype=DType.F32))
    for k in report.per_key:
        assert (k.target_norm / k.source_norm) ** 2 == pytest.approx(0.5, abs=0.05)


def test_skip_semantics(same_pair, in_subspace_adapter):
    src, tgt = same_pair
    drop_t = [QPROJ, "model.layers.1.mlp.up_proj.weight"]
    drop_s = ["model.layers.0.mlp.gate_proj.weight"]
    tgt2 = TensorStore({k: v for k, v in tgt.items() if k not in drop_t})
    src2 = TensorStore({k: v for k, v in src.items() if k not in drop_s})
    extra = dict(in_subspace_adapter.entries)
    a_only, _ = lora_names("model.layers.9.self_attn.k_proj.weight")
    nt_A, nt_B = lora_names("model.layers.0.self_attn.rotary.weight")
    misc = "base_model.model.lm_head.weight"
    for name, arr in ((a_only, np.ones((8, 64))), (nt_A, np.ones((8, 64))), (nt_B, np.ones((64, 8))),
                      (misc, np.ones((2, 2)))):
        extra[name] = Tensor.from_array(name, arr)
    adapter = TensorStore(extra, in_subspace_adapter.metadata)
    result, report = transfer_adapter(src2, tgt2, adapter, TransferConfig(rank_r=32))
    c = report.counts()
    assert c == {"transferred": 11, "skipped_missing_source": 1, "skipped_missing_target": 2,
                 "skipped_unresolvable": 1, "skipped_not_targeted": 1, "error": 1}
    assert len(report.per_key) == 17 == sum(c.values())
    status = {k.base_key: k.status for k in report.per_key}
    assert status[QPROJ] is Status.SKIPPED_MISSING_TARGET
    assert status[drop_s[0]] is Status.SKIPPED_MISSING_SOURCE
    assert QPROJ not in result.entries and len(result.entries) == 11
    assert report.transferred + report.skipped + report.errors == len(report.per_key)


def test_missing_everywhere_raises(same_pair, in_subspace_adapter):
    src, _ = same_pair
    empty = TensorStore.from_arrays({"model.embed_tokens.weight": np.ones((2, 2))})
    with pytest.raises(NoTransferableKeys) as info:
        transfer_adapter(src, empty, in_subspace_adapter, TransferConfig(rank_r=8))
    assert info.value.report.counts()["skipped_missing_target"] == 14


def test_zero_adapter(same_pair):
    src, tgt = same_pair
    a, b = lora_names(QPROJ)
    adapter = TensorStore.from_arrays({a: np.zeros((4, 64)), b: np.zeros((64, 4))})
    result, report = transfer_adapter(src, tgt, adapter, TransferConfig(rank_r=8))
    assert report.per_key[0].projection_residual == 0.0
    assert not np.any(result.entries[QPROJ].B) and not np.any(result.entries[QPROJ].A)


def test_alpha_folding_factor_preserving(same_pair, in_subspace_adapter):
    src, tgt = same_pair
    cfg = TransferConfig(rank_r=32, out_alpha=5, source_alpha=40, out_dtype=DType.F32)
    result, _ = transfer_adapter(src, tgt, in_subspace_adapter, cfg)
    before = effective_updates(in_subspace_adapter, alpha=40)
    for k, pair in result.entries.items():
        assert pair.r_lora == 8 and pair.alpha == 5
        assert rel_fro(pair.delta(), before[k]) <= 1e-5


def test_mismatch_transfer_shapes(mismatch_pair):
    src, tgt = mismatch_pair
    adapter = generate_lora(src, ["q_proj", "gate_proj", "down_proj"], 8, 0.8)
    cfg = TransferConfig(rank_r=24, out_dtype=DType.F32)
    result, report = transfer_adapter(src, tgt, adapter, cfg)
    for k, pair in result.entries.items():
        m_t, n_t = tgt[k].shape
        assert pair.B.shape == (m_t, 8) and pair.A.shape == (8, n_t)
    assert all(k.projection_residual is None for k in report.per_key)
    assert report.notes


def test_interpolate_baseline(mismatch_pair):
    src, tgt = mismatch_pair
    adapter = generate_lora(src, ["q_proj"], 4, 0.5, subspace_rank=16)
    cfg = TransferConfig(rank_r=16, baseline=Baseline.INTERPOLATE, out_dtype=DType.F32, source_alpha=64)
    result, report = transfer_adapter(src, tgt, adapter, cfg)
    a_name, b_name = lora_names(QPROJ)
    pair = result.entries[QPROJ]
    np.testing.assert_allclose(pair.B, interpolate_resize(adapter[b_name].matrix(), Side.LEFT, 96), rtol=1e-6)
    np.testing.assert_allclose(pair.A, interpolate_resize(adapter[a_name].matrix(), Side.RIGHT, 96), rtol=1e-6)
    assert report.per_key[0].eta_source is None


def test_threads_match_serial(same_pair, in_subspace_adapter, monkeypatch):
    src, tgt = same_pair
    serial, rep1 = transfer_adapter(src, tgt, in_subspace_adapter, TransferConfig(rank_r=16, threads=1))
    parallel, rep2 = transfer_adapter(src, tgt, in_subspace_adapter, TransferConfig(rank_r=16, threads=4))
    for k in serial.entries:
        assert serial.entries[k].B.tobytes() == parallel.entries[k].B.tobytes()
    assert rep1.to_dict(wall_clock=False) == rep2.to_dict(wall_clock=False)


def test_svd_cache_at_most_once(same_pair, monkeypatch):
    import loratransfer.shift as shift
    calls = []
    real = shift.truncated_svd

    def counting(W, r, seed):
        calls.append(r)
        return real(W, r, seed)

    monkeypatch.setattr(shift, "truncated_svd", counting)
    cache = SvdCache()
    src, _ = same_pair
    barrier = threading.Barrier(8)

    def hit():
        barrier.wait()
        cache.get(src, QPROJ, 8, 0)

    threads = [threading.Thread(target=hit) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(calls) == 1 and len(cache) == 1


def test_self_transfer_reuses_svds(same_pair, in_subspace_adapter):
    src, _ = same_pair
    cache = SvdCache()
    transfer_adapter(src, src, in_subspace_adapter, TransferConfig(rank_r=8), cache)
    assert len(cache) == 14


def test_config_validation():
    with pytest.raises(ValueError):
        TransferConfig(rank_r=0)
    with pytest.raises(ValueError):
        TransferConfig(target_modules=())
    assert TransferConfig(out_alpha=64.0).to_dict()["out_alpha"] == 64
