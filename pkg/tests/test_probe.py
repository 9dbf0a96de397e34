import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kvroute.attention import HiddenStates
from kvroute.probe import (ProbeConfig, eval_macro_f1, loss_and_grad, macro_f1, per_class_f1, pool_hidden,
                           split_indices, train_probe)


def hidden(rng, n_layers=3, seq=4, d=5):
    res = rng.standard_normal((n_layers + 1, seq, d))
    return HiddenStates(res, rng.standard_normal((n_layers, seq, d)))


def test_pool_single_and_identical_layers(rng):
    h = hidden(rng)
    np.testing.assert_array_equal(pool_hidden(h, [2]), h.residual[2, -1])
    res = h.residual.copy()
    res[1] = res[2]
    h2 = HiddenStates(res, h.head_outputs)
    np.testing.assert_allclose(pool_hidden(h2, [1, 2]), res[2, -1], atol=1e-15)
    with pytest.raises(ValueError):
        pool_hidden(h, [])
    with pytest.raises(IndexError):
        pool_hidden(h, [9])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=4), st.integers(0, 2**32 - 1))
def test_pool_mean_oracle(layers, seed):
    h = hidden(np.random.default_rng(seed))
    expected = sum(h.residual[l, -1] for l in layers) / len(layers)
    np.testing.assert_allclose(pool_hidden(h, layers), expected, atol=1e-12)


def test_split_indices_partition():
    tr, va = split_indices(50, 0.3, seed=1)
    assert len(va) == 15 and sorted(np.concatenate([tr, va]).tolist()) == list(range(50))
    assert np.array_equal(split_indices(50, 0.3, 1)[1], va)


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        hi = f()
        x[idx] = old - eps
        lo = f()
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 5), st.integers(1, 6), st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_gradient_matches_finite_differences(n_cls, d, n, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    y = rng.integers(0, n_cls, n)
    w = rng.standard_normal((n_cls, d))
    b = rng.standard_normal(n_cls)
    _, gw, gb = loss_and_grad(w, b, x, y, 0.01)
    nw = numeric_grad(lambda: loss_and_grad(w, b, x, y, 0.01)[0], w)
    nb = numeric_grad(lambda: loss_and_grad(w, b, x, y, 0.01)[0], b)
    for analytic, numeric in ((gw, nw), (gb, nb)):
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
        assert rel <= 1e-5


def test_separable_two_class():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(2, 0.5, (30, 2)), rng.normal(-2, 0.5, (30, 2))])
    y = ["a"] * 30 + ["b"] * 30
    probe = train_probe(x, y, ProbeConfig(epochs=300))
    assert probe.predict(x) == y
    assert all(b <= a + 1e-12 for a, b in zip(probe.losses, probe.losses[1:]))


def test_zero_epochs_is_initialisation():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((40, 3))
    y = ["a", "b"] * 20
    probe = train_probe(x, y, ProbeConfig(epochs=0, seed=5))
    init = 0.01 * np.random.default_rng([5, 0x5052]).standard_normal((2, 3))
    np.testing.assert_array_equal(probe.weight, init)
    assert len(probe.losses) == 1


def test_duplicated_dataset_same_probe():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((20, 4))
    y = list("abcd") * 5
    p1 = train_probe(x, y, ProbeConfig(epochs=50))
    p2 = train_probe(np.vstack([x, x]), y + y, ProbeConfig(epochs=50))
    np.testing.assert_allclose(p1.weight, p2.weight, atol=1e-12)
    np.testing.assert_allclose(p1.bias, p2.bias, atol=1e-12)


def test_large_feature_scale_still_descends():
    rng = np.random.default_rng(3)
    x = 1e3 * rng.standard_normal((50, 4))
    y = ["u" if v > 0 else "v" for v in x[:, 0]]
    probe = train_probe(x, y, ProbeConfig(learning_rate=10.0, epochs=100))
    assert all(b <= a + 1e-9 for a, b in zip(probe.losses, probe.losses[1:]))


def test_single_class_rejected():
    with pytest.raises(ValueError):
        train_probe(np.zeros((5, 2)), ["a"] * 5)


def test_macro_f1_examples():
    assert macro_f1(["a", "b"], ["a", "b"]) == 1.0
    gold = ["a", "a", "b", "b"]
    assert abs(macro_f1(["a"] * 4, gold) - (2 / 3 + 0) / 2) < 1e-12
    with pytest.raises(ValueError):
        per_class_f1([], [])
    with pytest.raises(ValueError):
        per_class_f1(["a"], ["a", "b"])


@settings(max_examples=200)
@given(st.lists(st.tuples(st.sampled_from("abc"), st.sampled_from("abc")), min_size=1, max_size=20))
def test_per_class_f1_brute_force(pairs):
    pred, gold = [p for p, _ in pairs], [g for _, g in pairs]
    scores = per_class_f1(pred, gold)
    for c in set(gold):
        tp = sum(p == c == g for p, g in pairs)
        n_pred = pred.count(c)
        n_gold = gold.count(c)
        prec = tp / n_pred if n_pred else 0.0
        rec = tp / n_gold
        expected = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        assert abs(scores[c] - expected) < 1e-12
    assert set(scores) == set(gold)


def test_eval_macro_f1_errors():
    rng = np.random.default_rng(4)
    probe = train_probe(rng.standard_normal((10, 2)), ["a", "b"] * 5, ProbeConfig(epochs=5))
    with pytest.raises(ValueError):
        eval_macro_f1(probe, np.zeros((0, 2)), [])
    with pytest.raises(ValueError):
        eval_macro_f1(probe, np.zeros((1, 2)), ["z"])


def test_probe_config_validation():
    with pytest.raises(ValueError):
        ProbeConfig(layers=())
    with pytest.raises(ValueError):
        ProbeConfig(val_fraction=1.0)
    with pytest.raises(ValueError):
        ProbeConfig(learning_rate=0)
