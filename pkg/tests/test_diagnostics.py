"""Tests for split R-hat and effective sample size."""

import numpy as np
import pytest

from grmeval.diagnostics import effective_sample_size, split_rhat, summarize_diagnostics


def test_rhat_near_one_for_iid_chains():
    rng = np.random.default_rng(0)
    draws = rng.standard_normal((4, 1000))
    assert split_rhat(draws) == pytest.approx(1.0, abs=0.01)


def test_rhat_detects_location_mismatch():
    rng = np.random.default_rng(1)
    draws = rng.standard_normal((4, 1000))
    draws[0] += 3.0
    assert split_rhat(draws) > 1.5


def test_rhat_detects_within_chain_drift():
    # halves of each chain disagree -> split R-hat catches it
    rng = np.random.default_rng(2)
    draws = rng.standard_normal((2, 1000)) + np.linspace(0, 4, 1000)
    assert split_rhat(draws) > 1.2


def test_rhat_constant_draws():
    assert split_rhat(np.full((4, 500), 2.5)) == 1.0


def test_ess_iid_close_to_total():
    rng = np.random.default_rng(3)
    draws = rng.standard_normal((4, 2000))
    ess = effective_sample_size(draws)
    assert 0.5 * 8000 < ess < 1.5 * 8000


def test_ess_ar1_matches_theory():
    # AR(1) with coefficient phi has integrated autocorrelation (1+phi)/(1-phi)
    rng = np.random.default_rng(4)
    phi = 0.9
    n = 20000
    chains = []
    for _ in range(4):
        e = rng.standard_normal(n)
        x = np.empty(n)
        x[0] = e[0]
        for t in range(1, n):
            x[t] = phi * x[t - 1] + e[t]
        chains.append(x)
    draws = np.stack(chains)
    expected = 4 * n / ((1 + phi) / (1 - phi))
    ess = effective_sample_size(draws)
    assert 0.6 * expected < ess < 1.6 * expected


def test_summarize_returns_both_metrics():
    rng = np.random.default_rng(5)
    named = {"a": rng.standard_normal((4, 400)), "b": rng.standard_normal((4, 400))}
    out = summarize_diagnostics(named)
    assert set(out) == {"a", "b"}
    for d in out.values():
        assert d["rhat"] == pytest.approx(1.0, abs=0.05)
        assert d["ess"] > 200
