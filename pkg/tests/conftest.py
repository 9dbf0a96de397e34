import numpy as np
import pytest

from kvroute.attention import AttentionTensor


def random_attention(rng, n_layers, n_heads, seq, causal=True, sparsity=0.0):
    """Row-stochastic (L, H, S, S) tensor; ``sparsity`` zeroes off-diagonal entries at random."""
    w = rng.random((n_layers, n_heads, seq, seq)) + 1e-3
    if sparsity:
        drop = rng.random(w.shape) < sparsity
        drop[..., np.arange(seq), np.arange(seq)] = False
        w[drop] = 0.0
    if causal:
        w = np.tril(w)
    w /= w.sum(axis=-1, keepdims=True)
    return AttentionTensor(w, causal=causal)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance summary: one pass/fail line per criterion ------------------------------

_ACCEPTANCE: list[tuple[str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if item.module.__name__.endswith("test_acceptance") and getattr(item, "function", None) is not None:
        doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
        if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
            _ACCEPTANCE.append((doc, "PASS" if report.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in _ACCEPTANCE:
        terminalreporter.write_line(f"{status}  {name}")
