"""Chain convergence diagnostics: split R-hat and effective sample size."""

from __future__ import annotations

import numpy as np


def _split_chains(draws: np.ndarray) -> np.ndarray:
    """(chains, samples) -> (2*chains, samples//2), dropping an odd remainder."""
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2:
        raise ValueError("draws must be (chains, samples)")
    n = draws.shape[1] // 2
    return np.concatenate([draws[:, :n], draws[:, n : 2 * n]], axis=0)


def split_rhat(draws: np.ndarray) -> float:
    """Potential scale reduction factor on split chains.

    Values near 1 indicate the chains agree in location and scale; constant
    draws return exactly 1.
    """
    seqs = _split_chains(draws)
    m, n = seqs.shape
    if n < 2:
        return float("nan")
    means = seqs.mean(axis=1)
    w = float(seqs.var(axis=1, ddof=1).mean())
    b = n * float(means.var(ddof=1))
    if w == 0.0:
        return 1.0 if b == 0.0 else float("inf")
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def _autocovariance(seq: np.ndarray) -> np.ndarray:
    """Biased autocovariance (lags 0..n-1) via FFT."""
    n = seq.shape[0]
    centered = seq - seq.mean()
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(centered, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n].real
    return acov / n


def effective_sample_size(draws: np.ndarray) -> float:
    """Effective sample size from combined split-chain autocorrelations.

    Uses the initial-monotone-positive-sequence truncation of the paired
    autocorrelation sums, so noisy large-lag estimates cannot inflate the
    result.
    """
    seqs = _split_chains(draws)
    m, n = seqs.shape
    if n < 4:
        return float("nan")
    acov = np.stack([_autocovariance(s) for s in seqs])
    w = float((acov[:, 0] * n / (n - 1)).mean())
    means = seqs.mean(axis=1)
    b = n * float(means.var(ddof=1)) if m > 1 else 0.0
    var_plus = (n - 1) / n * w + b / n
    if var_plus == 0.0:
        return float(m * n)
    mean_acov = acov.mean(axis=0)
    rho = 1.0 - (w - mean_acov) / var_plus

    # Geyer paired sums: truncate at the first non-positive pair, then make
    # the sequence non-increasing.
    tau = 0.0
    prev_pair = np.inf
    k = 0
    while 2 * k + 1 < n:
        pair = rho[2 * k] + rho[2 * k + 1]
        if pair <= 0.0:
            break
        pair = min(pair, prev_pair)
        tau += pair
        prev_pair = pair
        k += 1
    tau = max(2.0 * tau - 1.0, 1.0 / np.log10(m * n + 10.0))
    return float(m * n / tau)


def summarize_diagnostics(named_draws: dict[str, np.ndarray]) -> dict[str, dict[str, float]]:
    """Per-parameter {'rhat', 'ess'} for a mapping of name -> (chains, samples)."""
    return {
        name: {"rhat": split_rhat(d), "ess": effective_sample_size(d)}
        for name, d in named_draws.items()
    }
