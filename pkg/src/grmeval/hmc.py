"""Hamiltonian Monte Carlo with dual-averaging step-size adaptation.

One chain is a sequence of fixed-path leapfrog trajectories whose step count
is jittered uniformly on {1..L}, with L chosen so the longest trajectory
covers roughly one unit of integration time.  Warmup interleaves step-size
adaptation with diagonal mass-matrix re-estimation over expanding windows;
after warmup both are frozen.  Everything is driven by a caller-supplied
Generator, so a chain is a pure function of (target, start, rng state).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_DIVERGENCE_ENERGY = 1000.0


@dataclass
class ChainResult:
    positions: np.ndarray  # (samples, dim), post-warmup draws
    accept_rate: float
    step_size: float
    n_leapfrog_max: int
    divergences: int


class _DualAveraging:
    """Nesterov dual averaging on log step size (gamma/t0/kappa as in Stan)."""

    def __init__(self, initial_step: float, target: float):
        self.mu = np.log(10.0 * initial_step)
        self.target = target
        self.log_eps = np.log(initial_step)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.count = 0

    def update(self, accept_prob: float) -> float:
        self.count += 1
        m = self.count
        eta = 1.0 / (m + 10.0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_prob)
        self.log_eps = self.mu - np.sqrt(m) / 0.05 * self.h_bar
        w = m ** (-0.75)
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar
        return float(np.exp(self.log_eps))

    def restart(self, step: float) -> None:
        self.mu = np.log(10.0 * step)
        self.log_eps = np.log(step)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.count = 0

    @property
    def adapted_step(self) -> float:
        return float(np.exp(self.log_eps_bar)) if self.count else float(np.exp(self.log_eps))


def _leapfrog(target, x, r, grad, step, n_steps, inv_mass):
    for _ in range(n_steps):
        r = r + 0.5 * step * grad
        x = x + step * inv_mass * r
        lp, grad = target(x)
        if not np.isfinite(lp):
            return x, r, lp, grad
        r = r + 0.5 * step * grad
    return x, r, lp, grad


def _find_initial_step(target, x, lp, grad, rng, inv_mass, sqrt_mass):
    """Double/halve until one leapfrog step has acceptance near 1/2."""
    step = 1.0
    r = sqrt_mass * rng.standard_normal(x.shape[0])
    h0 = lp - 0.5 * float(r * inv_mass @ r)
    x1, r1, lp1, _ = _leapfrog(target, x, r, grad, step, 1, inv_mass)
    h1 = lp1 - 0.5 * float(r1 * inv_mass @ r1) if np.isfinite(lp1) else -np.inf
    log_ratio = h1 - h0
    direction = 1.0 if log_ratio > np.log(0.5) else -1.0
    for _ in range(60):
        step *= 2.0**direction
        x1, r1, lp1, _ = _leapfrog(target, x, r, grad, step, 1, inv_mass)
        h1 = lp1 - 0.5 * float(r1 * inv_mass @ r1) if np.isfinite(lp1) else -np.inf
        if direction * (h1 - h0) <= direction * np.log(0.5):
            break
    return step


def _max_steps(step: float, integration_time: float, cap: int) -> int:
    return int(np.clip(round(integration_time / step), 1, cap))


def run_chain(
    target,
    x0: np.ndarray,
    rng: np.random.Generator,
    warmup: int,
    samples: int,
    target_acceptance: float = 0.8,
    integration_time: float = 1.2,
    max_leapfrog: int = 128,
) -> ChainResult:
    """Run one adaptive chain of `warmup + samples` iterations.

    `target` maps a position to (log density, gradient); non-finite log
    density rejects the proposal.
    """
    dim = x0.shape[0]
    x = np.asarray(x0, dtype=float).copy()
    lp, grad = target(x)
    if not np.isfinite(lp):
        raise ValueError("non-finite log density at the chain start")

    mass = np.ones(dim)
    inv_mass = 1.0 / mass
    sqrt_mass = np.sqrt(mass)
    step = _find_initial_step(target, x, lp, grad, rng, inv_mass, sqrt_mass)
    adapt = _DualAveraging(step, target_acceptance)

    # mass re-estimation checkpoints inside warmup
    init_buffer = max(int(0.15 * warmup), 1)
    term_start = warmup - max(int(0.10 * warmup), 1)
    n_windows = 3 if term_start - init_buffer >= 60 else 1
    checkpoints = [
        init_buffer + (k + 1) * (term_start - init_buffer) // n_windows
        for k in range(n_windows)
    ]
    window_draws: list[np.ndarray] = []

    draws = np.empty((samples, dim))
    accepted = 0
    divergences = 0
    cap = _max_steps(step, integration_time, max_leapfrog)

    for it in range(warmup + samples):
        in_warmup = it < warmup
        r = sqrt_mass * rng.standard_normal(dim)
        n_steps = int(rng.integers(1, cap + 1))
        h0 = lp - 0.5 * float(r * inv_mass @ r)
        x_new, r_new, lp_new, grad_new = _leapfrog(target, x, r, grad, step, n_steps, inv_mass)
        if np.isfinite(lp_new):
            h1 = lp_new - 0.5 * float(r_new * inv_mass @ r_new)
            delta = h1 - h0
        else:
            delta = -np.inf
        if delta < -_DIVERGENCE_ENERGY:
            divergences += 1
        accept_prob = min(1.0, float(np.exp(min(delta, 0.0))))
        if rng.random() < accept_prob:
            x, lp, grad = x_new, lp_new, grad_new
            if not in_warmup:
                accepted += 1

        if in_warmup:
            step = adapt.update(accept_prob)
            window_draws.append(x.copy())
            if it + 1 in checkpoints:
                block = np.asarray(window_draws[len(window_draws) // 2 :])
                if block.shape[0] >= 10:
                    var = block.var(axis=0)
                    n_blk = block.shape[0]
                    mass = 1.0 / (
                        n_blk / (n_blk + 5.0) * var + 1e-3 * (5.0 / (n_blk + 5.0))
                    )
                    inv_mass = 1.0 / mass
                    sqrt_mass = np.sqrt(mass)
                window_draws.clear()
                step = _find_initial_step(target, x, lp, grad, rng, inv_mass, sqrt_mass)
                adapt.restart(step)
                cap = _max_steps(step, integration_time, max_leapfrog)
            if it + 1 == term_start:
                cap = _max_steps(adapt.adapted_step, integration_time, max_leapfrog)
            if it + 1 == warmup:
                step = adapt.adapted_step
                cap = _max_steps(step, integration_time, max_leapfrog)
        else:
            draws[it - warmup] = x

    return ChainResult(
        positions=draws,
        accept_rate=accepted / max(samples, 1),
        step_size=step,
        n_leapfrog_max=cap,
        divergences=divergences,
    )
