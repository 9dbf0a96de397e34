import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kvroute.attention import ModelConfig, build_toy_model
from kvroute.graph import TokenRouteGraph, answer_reachable, build_graph, compress_graph, extract_trlt
from kvroute.press import SurvivalMask
from kvroute.propositions import (ContainmentError, SetupError, WideCIWarning, disjoint_route_instance,
                                  exact_reach_probability, leakage_counterexample, max_output_shift,
                                  nearest_token_readout, routing_restricted_forward, verify_prop1, verify_prop2,
                                  verify_prop3)
from kvroute.sweep import prop2_instance


# --- redundancy ----------------------------------------------------------------------

def test_prop1_degenerate_cases():
    r = verify_prop1(1, 1.0, trials=2000)
    assert (r.empirical, r.bound, r.exact) == (1.0, 1.0, 1.0) and r.passed
    r = verify_prop1(2, 0.0, trials=2000)
    assert (r.empirical, r.bound, r.exact) == (0.0, 0.0, 0.0) and r.passed


def test_prop1_three_heads_half():
    r = verify_prop1(3, 0.5, trials=20_000, seed=1)
    assert r.bound == 0.875 and math.isclose(r.exact, 0.875)
    assert abs(r.empirical - 0.875) <= 4 * r.standard_error and r.passed


def test_prop1_errors_and_warning():
    with pytest.raises(ValueError):
        verify_prop1(3, 1.5)
    with pytest.raises(ValueError):
        verify_prop1(3, 0.5, trials=0)
    with pytest.warns(WideCIWarning):
        verify_prop1(3, 0.5, trials=10)


@pytest.mark.parametrize("hops", [2, 3])
def test_prop1_multi_hop_routes(hops):
    graph, q, t = disjoint_route_instance(3, hops)
    assert graph.num_layers == hops and answer_reachable(graph, q, [t])
    r = verify_prop1(3, 0.6, trials=5000, hops=hops)
    assert math.isclose(r.exact, 1 - 0.4 ** 3) and r.passed


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.floats(0, 1))
def test_exact_probability_is_bound(k, p):
    """Disjoint routes: the bound holds with equality."""
    assert math.isclose(exact_reach_probability(k, p), 1 - (1 - p) ** k, abs_tol=1e-12)


def test_disjoint_instance_shape():
    graph, q, t = disjoint_route_instance(4, 2)
    assert (graph.num_heads, graph.seq_len, q, t) == (4, 6, 5, 0)
    with pytest.raises(ValueError):
        disjoint_route_instance(0)


# --- erasure -------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_prop2_single_layer_exact(seed):
    r = verify_prop2(*prop2_instance(seed), seed=seed)
    assert r.passed and r.max_abs_diff == 0.0 and not r.reachable


def test_prop2_setup_error_when_reachable():
    model, tokens, _, q, t_ans = prop2_instance(0)
    with pytest.raises(SetupError):
        verify_prop2(model, tokens, SurvivalMask.full(1, 2, len(tokens)), q, t_ans)


def test_answer_in_one_head_moves_output():
    model, tokens, mask, q, t_ans = prop2_instance(3)
    keep = mask.keep.copy()
    keep[0, 1, t_ans[0]] = True
    partial = SurvivalMask(keep)
    assert max_output_shift(model, tokens, partial, q, t_ans) > 0
    assert max_output_shift(model, tokens, mask, q, t_ans) == 0.0


def test_leakage_counterexample():
    leak = leakage_counterexample(0)
    assert leak["last_layer_evicted"] and leak["reachable"] and leak["output_shift"] > 0


# --- rigidity ------------------------------------------------------------------------

def test_prop3_unanimous_full_shift():
    rows = np.full((4, 5), 0.05)
    rows[:, 2] = 0.8
    r = verify_prop3(rows)
    assert (r.rho, r.t_star, r.shifted_heads, r.forced_shift_fraction) == (1.0, 2, 4, 1.0) and r.passed


def test_prop3_half_agreement():
    rows = np.array([[0.7, 0.1, 0.1, 0.1],
                     [0.6, 0.2, 0.1, 0.1],
                     [0.1, 0.7, 0.1, 0.1],
                     [0.1, 0.1, 0.7, 0.1]])
    r = verify_prop3(rows)
    assert r.rho == 0.5 and r.t_star == 0 and r.shifted_heads >= 2 and r.passed


def test_prop3_secondary_mass_on_answer_grows():
    rows = np.array([[0.6, 0.3, 0.1], [0.7, 0.2, 0.1]])
    r = verify_prop3(rows, t_ans=[1])
    assert r.answer_mass_after > r.answer_mass_before and not r.flagged_answer_consensus
    assert verify_prop3(rows, t_ans=[0]).flagged_answer_consensus


def test_prop3_alpha_prunes_more():
    rows = np.array([[0.5, 0.3, 0.15, 0.05]] * 2)
    r = verify_prop3(rows, t_ans=[1], alpha=0.5)
    # floor(0.5 * 3) = 1 extra column pruned, leaving 0.3 and 0.15
    assert math.isclose(r.answer_mass_after, 0.3 / 0.45)
    with pytest.raises(ValueError):
        verify_prop3(np.ones(3))


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 8), st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_prop3_random_rows(H, S, seed):
    rows = np.random.default_rng(seed).dirichlet(np.ones(S), size=H)
    r = verify_prop3(rows)
    assert r.passed
    # every affected head must move off the pruned token
    assert r.shifted_heads == r.affected_heads == round(r.rho * H)


# --- routing-restricted forward ------------------------------------------------------

def small_model(seed=0, seq=6, layers=2):
    cfg = ModelConfig(num_layers=layers, num_query_heads=2, num_kv_heads=2, head_dim=8, max_seq=8, seed=seed)
    return build_toy_model(cfg), list(range(300, 300 + seq))


def two_route_mask(seq=6):
    keep = np.zeros((2, 2, seq), dtype=bool)
    keep[1, :, [2, 3]] = True
    keep[0, :, 0] = True
    return SurvivalMask(keep)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**16), st.floats(0, 0.9))
def test_full_routing_graph_reproduces_masked_forward(seed, density):
    model, tokens = small_model(seed)
    rng = np.random.default_rng(seed)
    mask = SurvivalMask(rng.random((2, 2, len(tokens))) < density)
    attn, _ = model.forward(tokens)
    g = compress_graph(build_graph(attn, 0.0), mask)
    a1, h1 = routing_restricted_forward(model, tokens, g, g, mask)
    a2, h2 = model.forward(tokens, mask)
    assert np.array_equal(h1.final, h2.final) and a1 == a2


def test_empty_routing_graph_is_self_only():
    model, tokens = small_model(1)
    attn, _ = model.forward(tokens)
    g = compress_graph(build_graph(attn, 0.0), SurvivalMask.full(2, 2, len(tokens)))
    empty = TokenRouteGraph(np.zeros_like(g.labels), num_heads=2)
    _, h = routing_restricted_forward(model, tokens, empty, g)
    none = np.zeros((2, 2, len(tokens), len(tokens)), dtype=bool)
    _, base = model.forward(tokens, column_filter=none)
    np.testing.assert_array_equal(h.final, base.final)


def test_shortest_route_preserves_readout_on_seeded_instance():
    model, tokens = small_model(0)
    mask = two_route_mask()
    attn, hidden = model.forward(tokens, mask)
    g = compress_graph(build_graph(attn, 0.0), mask)
    q, candidates = len(tokens) - 1, [0, 1]
    trlt = extract_trlt(g, q, [0])
    assert trlt is not None and trlt.num_edges() < g.num_edges()
    _, restricted = routing_restricted_forward(model, tokens, trlt, g, mask)
    assert nearest_token_readout(restricted, q, candidates) == nearest_token_readout(hidden, q, candidates)


def test_containment_error():
    model, tokens = small_model(2)
    mask = two_route_mask()
    attn, _ = model.forward(tokens)
    g = compress_graph(build_graph(attn, 0.0), mask)
    labels = g.labels.copy()
    labels[1, 5, 1] = 1
    with pytest.raises(ContainmentError):
        routing_restricted_forward(model, tokens, TokenRouteGraph(labels, num_heads=2), g, mask)


def test_no_warning_at_default_trials():
    with warnings.catch_warnings():
        warnings.simplefilter("error", WideCIWarning)
        verify_prop1(2, 0.5, trials=1000)
