import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kvroute.attention import (AttentionTensor, CausalityError, DimensionMismatchError, MalformedHeaderError,
                               ModelConfig, StochasticityError, build_toy_model, forward, kv_memory_bytes,
                               load_attention_dump, save_attention_dump, token_id)
from kvroute.press import SurvivalMask

from conftest import random_attention


def small_cfg(**kw):
    base = dict(num_layers=2, num_query_heads=4, num_kv_heads=2, head_dim=4, max_seq=32, seed=7)
    base.update(kw)
    return ModelConfig(**base)


# --- kv memory ------------------------------------------------------------------------

def test_kv_memory_all_ones():
    cfg = ModelConfig(num_layers=1, num_query_heads=1, num_kv_heads=1, head_dim=1, bytes_per_element=1)
    assert kv_memory_bytes(cfg, 1, 1) == 1


def test_kv_memory_llama_scale():
    cfg = ModelConfig(num_layers=32, num_query_heads=32, num_kv_heads=8, head_dim=128, bytes_per_element=2)
    assert kv_memory_bytes(cfg, 1, 8192) == 536_870_912


def test_kv_memory_rejects_empty_sequence():
    with pytest.raises(ValueError):
        kv_memory_bytes(ModelConfig(), 2, 0)
    with pytest.raises(ValueError):
        kv_memory_bytes(ModelConfig(), 0, 4)


def test_kv_memory_overflow():
    cfg = ModelConfig(num_layers=1 << 20, num_query_heads=1 << 10, num_kv_heads=1 << 10,
                      head_dim=1 << 20, bytes_per_element=1 << 10)
    with pytest.raises(OverflowError):
        kv_memory_bytes(cfg, 1 << 10, 1 << 10)


@given(st.integers(1, 64), st.integers(1, 1 << 16), st.integers(1, 128), st.integers(1, 16),
       st.integers(1, 256), st.integers(1, 8))
def test_kv_memory_matches_product(b, s, l, hkv, dh, nbytes):
    cfg = ModelConfig(num_layers=l, num_query_heads=hkv * 2, num_kv_heads=hkv, head_dim=dh,
                      bytes_per_element=nbytes)
    assert kv_memory_bytes(cfg, b, s) == math.prod([b, s, l, hkv, dh, nbytes])


# --- config ---------------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(num_kv_heads=3), dict(head_dim=0), dict(seed=-1), dict(seed=1 << 64),
                                dict(temperature=0.0), dict(head_coupling=1.5), dict(num_layers=True),
                                dict(temperature=(1.0,))])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        small_cfg(**kw)


def test_gqa_grouping():
    cfg = small_cfg()
    served = [sum(cfg.kv_head_of(h) == g for h in range(cfg.num_query_heads)) for g in range(cfg.num_kv_heads)]
    assert served == [2, 2]


# --- attention tensor ----------------------------------------------------------------

def test_attention_tensor_validation(rng):
    good = random_attention(rng, 1, 2, 4).weights.copy()
    bad = good.copy()
    bad[0, 0, 2] *= 0.5
    with pytest.raises(StochasticityError):
        AttentionTensor(bad)
    acausal = np.full((1, 1, 3, 3), 1 / 3)
    with pytest.raises(CausalityError):
        AttentionTensor(acausal)
    AttentionTensor(acausal, causal=False)
    with pytest.raises(DimensionMismatchError):
        AttentionTensor(np.ones((2, 3, 3)))
    t = AttentionTensor(good)
    with pytest.raises(ValueError):
        t.weights[0, 0, 0, 0] = 0.5


# --- toy model forward ---------------------------------------------------------------

def test_forward_determinism():
    a1, h1 = forward(build_toy_model(small_cfg()), [5, 6, 7, 8, 9])
    a2, h2 = forward(build_toy_model(small_cfg()), [5, 6, 7, 8, 9])
    assert a1 == a2
    assert np.array_equal(h1.residual, h2.residual)


def test_seeds_differ():
    toks = [1, 2, 3, 4, 5, 6]
    a1, _ = forward(build_toy_model(small_cfg(seed=1)), toks)
    a2, _ = forward(build_toy_model(small_cfg(seed=2)), toks)
    assert float(np.max(np.abs(a1.weights - a2.weights))) > 0


def test_full_mask_is_identity():
    model = build_toy_model(small_cfg())
    toks = list(range(10))
    a1, h1 = model.forward(toks)
    a2, h2 = model.forward(toks, SurvivalMask.full(2, 2, 10))
    assert a1 == a2
    assert np.array_equal(h1.residual, h2.residual)


def test_single_token_attention():
    attn, _ = build_toy_model(small_cfg()).forward([42])
    assert np.array_equal(attn.weights, np.ones((2, 4, 1, 1)))


def test_masked_forward_is_stochastic_and_respects_mask(rng):
    cfg = small_cfg()
    model = build_toy_model(cfg)
    keep = rng.random((2, 2, 12)) < 0.4
    attn, hidden = model.forward(list(range(12)), SurvivalMask(keep))
    w = attn.weights
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-9)
    assert np.all(np.isfinite(hidden.residual))
    for l in range(2):
        for h in range(4):
            kv = cfg.kv_head_of(h)
            for i in range(12):
                for j in range(i):
                    if not keep[l, kv, j]:
                        assert w[l, h, i, j] == 0.0


def test_self_preservation_fallback():
    model = build_toy_model(small_cfg())
    keep = np.zeros((2, 2, 6), dtype=bool)
    attn, _ = model.forward(list(range(6)), SurvivalMask(keep, alpha=1.0))
    assert np.array_equal(attn.weights, np.broadcast_to(np.eye(6), (2, 4, 6, 6)))


def test_mask_longer_than_sequence():
    model = build_toy_model(small_cfg())
    with pytest.raises(IndexError):
        model.forward([1, 2, 3], SurvivalMask.full(2, 2, 5))


def test_short_mask_keeps_appended_positions():
    model = build_toy_model(small_cfg())
    keep = np.zeros((2, 2, 3), dtype=bool)
    attn, _ = model.forward(list(range(6)), SurvivalMask(keep))
    w = attn.weights
    assert np.all(w[:, :, 5, :3] == 0)
    assert np.all(w[:, :, 5, 3:6] > 0)


def test_gqa_heads_share_kv_columns():
    cfg = small_cfg()
    model = build_toy_model(cfg)
    keep = np.ones((2, 2, 8), dtype=bool)
    keep[0, 1, [1, 2]] = False
    attn, _ = model.forward(list(range(8)), SurvivalMask(keep))
    w = attn.weights
    assert np.all(w[0, 2:, 3:, 1:3] == 0)
    assert np.all(w[0, :2, 3:, 1:3] > 0)


def test_single_layer_erasure_is_exact(rng):
    cfg = small_cfg(num_layers=1)
    model = build_toy_model(cfg)
    toks = list(range(20, 30))
    keep = np.ones((1, 2, 10), dtype=bool)
    keep[:, :, [2, 5]] = False
    mask = SurvivalMask(keep)
    x = model.embed(toks)
    _, base = model.forward_embeddings(x, mask)
    x2 = x.copy()
    x2[[2, 5]] += 100 * rng.standard_normal((2, x.shape[1]))
    _, pert = model.forward_embeddings(x2, mask)
    others = [i for i in range(10) if i not in (2, 5)]
    assert np.array_equal(base.final[others], pert.final[others])


def test_head_coupling_one_gives_identical_heads():
    model = build_toy_model(small_cfg(head_coupling=1.0, num_kv_heads=4))
    attn, _ = model.forward(list(range(9)))
    w = attn.weights
    for h in range(1, 4):
        np.testing.assert_allclose(w[:, h], w[:, 0], atol=1e-12)


def test_token_id_stable():
    assert token_id("Cora") == token_id("Cora")
    assert 0 <= token_id("x") < 1 << 20


# --- dump format ---------------------------------------------------------------------

def test_dump_round_trip(tmp_path, rng):
    attn = random_attention(rng, 2, 3, 5)
    path = tmp_path / "a.atn"
    save_attention_dump(attn, path)
    loaded = load_attention_dump(path)
    np.testing.assert_array_equal(loaded.weights, attn.weights.astype(np.float32))
    assert loaded == load_attention_dump(path)
    raw = path.read_bytes()
    assert raw[:4] == b"ATN1"
    assert struct.unpack_from("<IIIB", raw, 4) == (2, 3, 5, 1)
    assert len(raw) == 17 + 2 * 3 * 5 * 5 * 4


def _write_dump(path, weights, causal=1, magic=b"ATN1"):
    w = np.asarray(weights, dtype="<f4")
    L, H, S, _ = w.shape
    path.write_bytes(struct.pack("<4sIIIB", magic, L, H, S, causal) + w.tobytes())


def test_dump_half_row_is_stochasticity_error(tmp_path):
    w = np.tril(np.ones((1, 1, 3, 3)))
    w /= w.sum(-1, keepdims=True)
    w[0, 0, 2] *= 0.5
    _write_dump(tmp_path / "bad.atn", w)
    with pytest.raises(StochasticityError):
        load_attention_dump(tmp_path / "bad.atn")


def test_dump_errors(tmp_path, rng):
    attn = random_attention(rng, 1, 1, 4)
    good = tmp_path / "g.atn"
    save_attention_dump(attn, good)
    raw = good.read_bytes()
    (tmp_path / "t.atn").write_bytes(raw[:10])
    with pytest.raises(MalformedHeaderError):
        load_attention_dump(tmp_path / "t.atn")
    (tmp_path / "m.atn").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(MalformedHeaderError):
        load_attention_dump(tmp_path / "m.atn")
    (tmp_path / "p.atn").write_bytes(raw[:-4])
    with pytest.raises(DimensionMismatchError):
        load_attention_dump(tmp_path / "p.atn")
    _write_dump(tmp_path / "c.atn", np.full((1, 1, 2, 2), 0.5))
    with pytest.raises(CausalityError):
        load_attention_dump(tmp_path / "c.atn")
    _write_dump(tmp_path / "nc.atn", np.full((1, 1, 2, 2), 0.5), causal=0)
    assert not load_attention_dump(tmp_path / "nc.atn").causal


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_dump_round_trip_property(tmp_path_factory, n_layers, n_heads, seq, seed):
    attn = random_attention(np.random.default_rng(seed), n_layers, n_heads, seq)
    path = tmp_path_factory.mktemp("dump") / "x.atn"
    save_attention_dump(attn, path)
    np.testing.assert_array_equal(load_attention_dump(path).weights, attn.weights.astype(np.float32))
