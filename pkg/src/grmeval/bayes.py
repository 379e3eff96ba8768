"""Full Bayesian calibration of the hierarchical graded response model.

The joint model places weakly informative priors on everything:

    lambda_i   ~ half-Cauchy(0, 5)
    tau_{i,j}  ~ normal(mu_tau, sigma_tau), ordered within item and, by
                 default, truncated to positive values
    mu_tau     ~ normal(0, 5)
    sigma_tau  ~ half-Cauchy(0, 1)
    theta_p    ~ normal(0, sigma)        (non-centered: theta = sigma * z)
    sigma      ~ half-Cauchy(0, 1)

Sampling runs in an unconstrained space: log discrimination, log first
threshold (or identity when the positivity truncation is switched off) plus
log threshold increments, log scales, and standardized abilities.  The log
density includes the exact transform Jacobians and, when the positivity
truncation is active, the per-threshold truncation normalizer, so the prior
marginals are exactly as stated above.  Gradients are analytic.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, log_ndtr, ndtri

from grmeval.diagnostics import summarize_diagnostics
from grmeval.hmc import run_chain
from grmeval.model import (
    MISSING,
    AbilityEstimates,
    Item,
    ItemParameters,
    ModelError,
    ResponseMatrix,
)

_LOG_HALF_CAUCHY_5 = math.log(2.0 / (5.0 * math.pi))
_LOG_HALF_CAUCHY_1 = math.log(2.0 / math.pi)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# Trajectory budget.  The item/ability scale is only softly identified (a
# joint rescaling of thresholds, abilities, and inverse discriminations
# leaves the likelihood unchanged), and traversing that ridge needs long
# trajectories; short ones leave chains pinned at different ridge points.
_INTEGRATION_TIME = 12.0
_MAX_LEAPFROG = 384


@dataclass(frozen=True)
class BayesConfig:
    chains: int = 4
    warmup: int = 1000
    samples_per_chain: int = 1000
    target_acceptance: float = 0.8
    seed: int = 0
    max_rhat: float = 1.01
    #: Truncate every threshold to be positive, as in the hierarchical prior
    #: above.  Switch off to allow negative thresholds (the ordering
    #: constraint always stays).
    positive_thresholds: bool = True

    def __post_init__(self) -> None:
        if self.chains < 2:
            raise ModelError("chains must be >= 2")
        if self.warmup < 100 or self.samples_per_chain < 100:
            raise ModelError("warmup and samples_per_chain must be >= 100")
        if not 0.0 < self.target_acceptance < 1.0:
            raise ModelError("target_acceptance must be in (0, 1)")


@dataclass(frozen=True)
class HyperParameters:
    mu_tau: float
    sigma_tau: float
    sigma_theta: float

    def __post_init__(self) -> None:
        if self.sigma_tau <= 0 or self.sigma_theta <= 0:
            raise ModelError("hyper scales must be > 0")


@dataclass(frozen=True)
class PosteriorDraws:
    """Constrained-scale draws indexed chain x iteration, plus diagnostics."""

    item_ids: tuple[str, ...]
    categories_per_item: tuple[int, ...]
    person_ids: tuple[str, ...]
    lam: np.ndarray  # (C, S, I)
    tau: np.ndarray  # (C, S, T) flattened thresholds
    theta: np.ndarray  # (C, S, P)
    mu_tau: np.ndarray  # (C, S)
    sigma_tau: np.ndarray  # (C, S)
    sigma: np.ndarray  # (C, S)
    diagnostics: dict = field(default_factory=dict)
    converged: bool = True
    divergences: int = 0
    excluded_items: tuple[tuple[str, str], ...] = ()
    positive_thresholds: bool = True

    @property
    def threshold_offsets(self) -> tuple[int, ...]:
        offs, total = [], 0
        for n_cat in self.categories_per_item:
            offs.append(total)
            total += n_cat - 1
        return tuple(offs)

    def parameter_names(self) -> list[str]:
        names = [f"lambda[{iid}]" for iid in self.item_ids]
        for iid, n_cat in zip(self.item_ids, self.categories_per_item):
            names += [f"tau[{iid},{k + 1}]" for k in range(n_cat - 1)]
        names += ["mu_tau", "sigma_tau", "sigma"]
        names += [f"theta[{pid}]" for pid in self.person_ids]
        return names

    def named_series(self) -> dict[str, np.ndarray]:
        """Parameter name -> (chains, samples) draws, in declaration order."""
        out: dict[str, np.ndarray] = {}
        for i, iid in enumerate(self.item_ids):
            out[f"lambda[{iid}]"] = self.lam[:, :, i]
        for i, (iid, off) in enumerate(zip(self.item_ids, self.threshold_offsets)):
            for k in range(self.categories_per_item[i] - 1):
                out[f"tau[{iid},{k + 1}]"] = self.tau[:, :, off + k]
        out["mu_tau"] = self.mu_tau
        out["sigma_tau"] = self.sigma_tau
        out["sigma"] = self.sigma
        for p, pid in enumerate(self.person_ids):
            out[f"theta[{pid}]"] = self.theta[:, :, p]
        return out


class GrmPosterior:
    """Unconstrained-space joint density of the hierarchical model.

    Parameter vector layout: [log lambda (I) | threshold block (T) |
    mu_tau | log sigma_tau | log sigma | z (P)].
    """

    def __init__(
        self,
        responses: ResponseMatrix,
        positive_thresholds: bool = True,
        categories=None,
        exclude_degenerate: bool = True,
    ):
        self.positive = positive_thresholds
        self.person_ids = responses.person_ids
        self.n_persons = responses.n_persons

        cols: list[int] = []
        ids: list[str] = []
        ncat: list[int] = []
        excluded: list[tuple[str, str]] = []
        for i, iid in enumerate(responses.item_ids):
            if categories is not None:
                cols.append(i)
                ids.append(iid)
                ncat.append(int(categories[i]))
                continue
            distinct = responses.observed_categories(i)
            if exclude_degenerate and distinct.shape[0] < 2:
                excluded.append((iid, "observed in fewer than 2 categories"))
                continue
            cols.append(i)
            ids.append(iid)
            ncat.append(int(distinct.max()) + 1)
        if not ids:
            raise ModelError("no calibratable items (all single-category)")
        if min(ncat) < 2:
            raise ModelError("every item needs at least 2 categories")
        self.item_ids = tuple(ids)
        self.categories = tuple(ncat)
        self.excluded_items = tuple(excluded)
        self.n_items = len(ids)

        self.offsets = np.zeros(self.n_items, dtype=int)
        total = 0
        for k, n_cat in enumerate(self.categories):
            self.offsets[k] = total
            total += n_cat - 1
        self.n_thresholds = total

        # observation arrays
        obs_p, obs_i, obs_lo, obs_hi = [], [], [], []
        for k, c in enumerate(cols):
            col = responses.entries[:, c]
            persons = np.flatnonzero(col != MISSING)
            x = col[persons].astype(int)
            if x.size and x.max() >= self.categories[k]:
                raise ModelError(
                    f"response {x.max()} exceeds categories of item {ids[k]!r}"
                )
            obs_p.append(persons)
            obs_i.append(np.full(persons.shape[0], k))
            obs_lo.append(np.where(x >= 1, self.offsets[k] + x - 1, -1))
            obs_hi.append(
                np.where(x <= self.categories[k] - 2, self.offsets[k] + x, -1)
            )
        self.obs_p = np.concatenate(obs_p) if obs_p else np.empty(0, dtype=int)
        self.obs_i = np.concatenate(obs_i) if obs_i else np.empty(0, dtype=int)
        lo = np.concatenate(obs_lo) if obs_lo else np.empty(0, dtype=int)
        hi = np.concatenate(obs_hi) if obs_hi else np.empty(0, dtype=int)
        self.has_lo = lo >= 0
        self.has_hi = hi >= 0
        self.idx_lo = np.where(self.has_lo, lo, 0)
        self.idx_hi = np.where(self.has_hi, hi, 0)

        self._i_mu = self.n_items + self.n_thresholds
        self.dim = self._i_mu + 3 + self.n_persons

        # first-threshold positions inside the flat threshold block
        self._first = np.zeros(self.n_thresholds, dtype=bool)
        self._first[self.offsets] = True
        self._counts = np.array([n - 1 for n in self.categories])
        self._item_of_thr = np.repeat(np.arange(self.n_items), self._counts)

    # -- transforms ---------------------------------------------------------

    def _constrain_tau(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Threshold block -> (tau, d tau_first / d v_first); increments exp'd."""
        width = np.where(self._first, 0.0, np.exp(v))
        base = np.exp(v[self._first]) if self.positive else v[self._first]
        tau = np.empty_like(v)
        for k in range(self.n_items):
            o, c = self.offsets[k], self._counts[k]
            tau[o : o + c] = base[k] + np.cumsum(width[o : o + c])
        dbase = base if self.positive else np.ones_like(base)
        return tau, dbase

    def constrain(self, x: np.ndarray) -> dict:
        lam = np.exp(x[: self.n_items])
        tau, _ = self._constrain_tau(x[self.n_items : self._i_mu])
        mu_tau = float(x[self._i_mu])
        sigma_tau = float(math.exp(x[self._i_mu + 1]))
        sigma = float(math.exp(x[self._i_mu + 2]))
        z = x[self._i_mu + 3 :]
        return {
            "lambda": lam,
            "tau": tau,
            "mu_tau": mu_tau,
            "sigma_tau": sigma_tau,
            "sigma": sigma,
            "theta": sigma * z,
        }

    def items_from(self, lam: np.ndarray, tau: np.ndarray) -> ItemParameters:
        items = []
        for k, iid in enumerate(self.item_ids):
            o, c = self.offsets[k], self._counts[k]
            items.append(Item(iid, float(lam[k]), tuple(tau[o : o + c])))
        return ItemParameters(items=tuple(items))

    # -- starting point -----------------------------------------------------

    def initial_position(self, responses: ResponseMatrix, rng: np.random.Generator) -> np.ndarray:
        x = np.zeros(self.dim)
        col_of = {iid: k for k, iid in enumerate(responses.item_ids)}
        taus = []
        for k, iid in enumerate(self.item_ids):
            col = responses.entries[:, col_of[iid]]
            obs = col[col != MISSING].astype(int)
            n_cat = self.categories[k]
            if obs.size:
                counts = np.bincount(obs, minlength=n_cat).astype(float)
                cum = np.clip(np.cumsum(counts)[:-1] / obs.size, 0.5 / max(obs.size, 1), 1 - 0.5 / max(obs.size, 1))
                tau = ndtri(cum)
            else:
                tau = np.linspace(0.5, 1.5, n_cat - 1)
            for j in range(1, tau.shape[0]):
                if tau[j] <= tau[j - 1] + 0.05:
                    tau[j] = tau[j - 1] + 0.05
            if self.positive:
                tau = np.maximum(tau, 0.05 + 0.05 * np.arange(tau.shape[0]))
                for j in range(1, tau.shape[0]):
                    if tau[j] <= tau[j - 1] + 0.05:
                        tau[j] = tau[j - 1] + 0.05
            taus.append(tau)
            o = self.n_items + self.offsets[k]
            x[o] = math.log(tau[0]) if self.positive else tau[0]
            if n_cat > 2:
                x[o + 1 : o + n_cat - 1] = np.log(np.diff(tau))
        x[self._i_mu] = float(np.mean([t.mean() for t in taus]))
        x += 0.1 * rng.standard_normal(self.dim)
        return x

    # -- density ------------------------------------------------------------

    def log_density_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        n_i, n_t = self.n_items, self.n_thresholds
        # reject absurd proposals before any exp can overflow
        if not np.all(np.isfinite(x)) or float(np.max(np.abs(x), initial=0.0)) > 300.0:
            return -np.inf, np.zeros_like(x)
        u_lam = x[:n_i]
        v = x[n_i : self._i_mu]
        mu_tau = x[self._i_mu]
        lstau = x[self._i_mu + 1]
        lsig = x[self._i_mu + 2]
        z = x[self._i_mu + 3 :]

        lam = np.exp(u_lam)
        sigma_tau = math.exp(lstau)
        sigma = math.exp(lsig)
        tau, dbase = self._constrain_tau(v)
        theta = sigma * z

        grad = np.zeros_like(x)
        g_tau = np.zeros(n_t)
        g_lam = np.zeros(n_i)
        g_theta = np.zeros(self.n_persons)
        lp = 0.0

        # likelihood
        if self.obs_p.size:
            lam_o = lam[self.obs_i]
            th_o = theta[self.obs_p]
            t_lo = tau[self.idx_lo]
            t_hi = tau[self.idx_hi]
            z_lo = lam_o * (th_o - t_lo)
            z_hi = lam_o * (th_o - t_hi)
            s_lo = np.where(self.has_lo, expit(z_lo), 1.0)
            s_hi = np.where(self.has_hi, expit(z_hi), 0.0)
            p = s_lo - s_hi
            if np.any(p <= 0.0) or not np.all(np.isfinite(p)):
                return -np.inf, grad
            lp += float(np.log(p).sum())
            inv_p = 1.0 / p
            w_lo = np.where(self.has_lo, s_lo * (1.0 - s_lo), 0.0)
            w_hi = np.where(self.has_hi, s_hi * (1.0 - s_hi), 0.0)
            g_theta += np.bincount(
                self.obs_p, lam_o * (w_lo - w_hi) * inv_p, minlength=self.n_persons
            )
            g_lam += np.bincount(
                self.obs_i,
                ((th_o - t_lo) * w_lo - (th_o - t_hi) * w_hi) * inv_p,
                minlength=n_i,
            )
            g_tau += np.bincount(
                self.idx_lo[self.has_lo],
                (-lam_o * w_lo * inv_p)[self.has_lo],
                minlength=n_t,
            )
            g_tau += np.bincount(
                self.idx_hi[self.has_hi],
                (lam_o * w_hi * inv_p)[self.has_hi],
                minlength=n_t,
            )

        # half-Cauchy(0, 5) on discriminations, with log Jacobian u_lam
        lp += float(
            (_LOG_HALF_CAUCHY_5 - np.log1p((lam / 5.0) ** 2) + u_lam).sum()
        )
        g_lam += -2.0 * lam / (25.0 + lam**2)
        grad[:n_i] = lam * g_lam + 1.0

        # thresholds: normal(mu_tau, sigma_tau), truncated to tau > 0 when the
        # positivity switch is on (normalizer Phi(mu_tau / sigma_tau) per
        # threshold keeps the stated prior marginals exact)
        resid = (tau - mu_tau) / sigma_tau
        lp += float((-0.5 * resid**2).sum()) - n_t * (math.log(sigma_tau) + _HALF_LOG_2PI)
        g_tau += -resid / sigma_tau
        g_mu = float((resid / sigma_tau).sum())
        g_stau = float((resid**2).sum() - n_t) / sigma_tau
        if self.positive:
            r = mu_tau / sigma_tau
            if r < -30.0:
                # inverse Mills ratio, asymptotic branch: phi/Phi -> -r - 1/r
                hazard = -r - 1.0 / r
            else:
                log_phi = -0.5 * r * r - _HALF_LOG_2PI
                hazard = math.exp(log_phi - float(log_ndtr(r)))
            lp += -n_t * float(log_ndtr(r))
            g_mu += -n_t * hazard / sigma_tau
            g_stau += n_t * hazard * mu_tau / sigma_tau**2

        # chain rule into the threshold block
        for k in range(self.n_items):
            o, c = self.offsets[k], self._counts[k]
            rev = np.cumsum(g_tau[o : o + c][::-1])[::-1]
            grad[n_i + o] = rev[0] * dbase[k]
            if c > 1:
                grad[n_i + o + 1 : n_i + o + c] = rev[1:] * np.exp(v[o + 1 : o + c])
        if self.positive:
            lp += float(v[self._first].sum())
            grad[n_i : self._i_mu][self._first] += 1.0
        if np.any(~self._first):
            lp += float(v[~self._first].sum())
            grad[n_i : self._i_mu][~self._first] += 1.0

        # hyper priors
        lp += -mu_tau**2 / 50.0 - math.log(5.0) - _HALF_LOG_2PI
        g_mu += -mu_tau / 25.0
        grad[self._i_mu] = g_mu

        lp += _LOG_HALF_CAUCHY_1 - math.log1p(sigma_tau**2) + lstau
        g_stau += -2.0 * sigma_tau / (1.0 + sigma_tau**2)
        grad[self._i_mu + 1] = sigma_tau * g_stau + 1.0

        # abilities (non-centered) and their scale
        lp += float((-0.5 * z**2).sum()) - self.n_persons * _HALF_LOG_2PI
        grad[self._i_mu + 3 :] = sigma * g_theta - z

        lp += _LOG_HALF_CAUCHY_1 - math.log1p(sigma**2) + lsig
        g_sig = -2.0 * sigma / (1.0 + sigma**2) + float(z @ g_theta)
        grad[self._i_mu + 2] = sigma * g_sig + 1.0

        if not math.isfinite(lp):
            return -np.inf, np.zeros_like(x)
        return float(lp), grad


def log_posterior_density(
    unconstrained_params: np.ndarray,
    responses: ResponseMatrix,
    positive_thresholds: bool = True,
    categories=None,
) -> tuple[float, np.ndarray]:
    """Joint log density (up to the ordering constant) and its gradient."""
    post = GrmPosterior(responses, positive_thresholds, categories)
    return post.log_density_and_grad(np.asarray(unconstrained_params, dtype=float))


def sample_posterior(
    responses: ResponseMatrix,
    config: BayesConfig | None = None,
    categories=None,
    threads: int = 1,
) -> PosteriorDraws:
    """Draw from the joint posterior with parallel-safe, seeded chains.

    Chains use independent child streams of ``config.seed``, so results are
    bitwise identical no matter how chains are scheduled.  If any parameter's
    split R-hat exceeds ``config.max_rhat`` the result is returned flagged
    ``converged=False``.
    """
    config = config or BayesConfig()
    post = GrmPosterior(responses, config.positive_thresholds, categories)
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)

    def one_chain(c: int):
        rng = np.random.default_rng(seeds[c])
        x0 = post.initial_position(responses, rng)
        return run_chain(
            post.log_density_and_grad,
            x0,
            rng,
            warmup=config.warmup,
            samples=config.samples_per_chain,
            target_acceptance=config.target_acceptance,
            integration_time=_INTEGRATION_TIME,
            max_leapfrog=_MAX_LEAPFROG,
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one_chain, range(config.chains)))
    else:
        results = [one_chain(c) for c in range(config.chains)]

    C, S = config.chains, config.samples_per_chain
    lam = np.empty((C, S, post.n_items))
    tau = np.empty((C, S, post.n_thresholds))
    theta = np.empty((C, S, post.n_persons))
    mu_tau = np.empty((C, S))
    sigma_tau = np.empty((C, S))
    sigma = np.empty((C, S))
    for c, res in enumerate(results):
        for s in range(S):
            con = post.constrain(res.positions[s])
            lam[c, s] = con["lambda"]
            tau[c, s] = con["tau"]
            theta[c, s] = con["theta"]
            mu_tau[c, s] = con["mu_tau"]
            sigma_tau[c, s] = con["sigma_tau"]
            sigma[c, s] = con["sigma"]

    draws = PosteriorDraws(
        item_ids=post.item_ids,
        categories_per_item=post.categories,
        person_ids=post.person_ids,
        lam=lam,
        tau=tau,
        theta=theta,
        mu_tau=mu_tau,
        sigma_tau=sigma_tau,
        sigma=sigma,
        excluded_items=post.excluded_items,
        positive_thresholds=config.positive_thresholds,
        divergences=sum(r.divergences for r in results),
    )
    diagnostics = summarize_diagnostics(draws.named_series())
    worst = max(d["rhat"] for d in diagnostics.values())
    converged = bool(worst <= config.max_rhat)
    return replace(draws, diagnostics=diagnostics, converged=converged)


def summarize_posterior(draws: PosteriorDraws) -> tuple[ItemParameters, AbilityEstimates]:
    """Point estimates: posterior means of item parameters and abilities.

    Means of ordered threshold draws stay ordered; if floating-point rounding
    ever produces a tie it is broken by the smallest representable bump.
    """
    lam_hat = draws.lam.reshape(-1, draws.lam.shape[-1]).mean(axis=0)
    tau_hat = draws.tau.reshape(-1, draws.tau.shape[-1]).mean(axis=0)
    offs = draws.threshold_offsets
    items = []
    for k, iid in enumerate(draws.item_ids):
        c = draws.categories_per_item[k] - 1
        t = tau_hat[offs[k] : offs[k] + c].copy()
        t.sort()
        for j in range(1, c):
            if t[j] <= t[j - 1]:
                t[j] = np.nextafter(t[j - 1], np.inf)
        items.append(Item(iid, float(lam_hat[k]), tuple(t)))
    theta_flat = draws.theta.reshape(-1, draws.theta.shape[-1])
    theta_mean = theta_flat.mean(axis=0)
    theta_sd = theta_flat.std(axis=0, ddof=1) if theta_flat.shape[0] > 1 else np.zeros_like(theta_mean)
    abilities = AbilityEstimates(theta_mean, theta_sd, person_ids=draws.person_ids)
    return ItemParameters(items=tuple(items)), abilities


def hyper_posterior_means(draws: PosteriorDraws) -> HyperParameters:
    return HyperParameters(
        mu_tau=float(draws.mu_tau.mean()),
        sigma_tau=float(draws.sigma_tau.mean()),
        sigma_theta=float(draws.sigma.mean()),
    )
