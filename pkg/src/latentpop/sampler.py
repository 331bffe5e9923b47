"""Adaptive Metropolis-within-Gibbs sampler for the latent abundance model.

One sweep updates, in order: latent count trajectories (factor slice
sampler, one county-trajectory per county, vectorized over counties), the
risk field ``u`` and iid effects ``v``, detection fields and effects,
regression coefficients, the statewide trend and detection intercepts,
temporal correlations, variances and the latent ACS layer.

ICAR fields are updated site by site without the sum-to-zero constraint
and centered after every sweep. Sites sharing a graph color and a time
parity are conditionally independent, so each color class is one
vectorized Metropolis step.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields

import numpy as np
from scipy.special import gammaln, log_expit, logit as _logit, expit

from . import likelihoods as lk
from .collapsed import CollapsedCells
from .core import (
    AcsState,
    DataError,
    ModelState,
    PosteriorSummary,
    SurveillancePanel,
    SurveyEstimates,
    risk_design,
)
from .graph import AdjacencyGraph

log = logging.getLogger(__name__)

BLOCKS = (
    "N", "u", "v", "f", "eps", "mu_k", "beta_k", "gamma", "beta_mu",
    "phi_u", "phi_k", "tau2_u", "tau2_k", "sigma2_v", "sigma2_k", "acs",
)


@dataclass(frozen=True)
class SamplerConfig:
    n_iterations: int = 3000
    n_burnin: int = 1500
    thin: int = 1
    n_chains: int = 1
    rng_seed: int = 0
    adapt_interval: int = 50
    target_acceptance: float = 0.44
    target_acceptance_block: float = 0.234
    max_stepout: int = 10
    initial_widths: tuple[float, ...] | None = None
    # Blocks listed here keep their initial values.
    frozen: tuple[str, ...] = ()
    # N-marginal moves for the statewide trend and detection intercepts.
    collapsed_moves: bool = True
    workers: int = 1

    def __post_init__(self):
        for name in ("n_iterations", "thin", "n_chains", "adapt_interval", "max_stepout", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not 0 <= self.n_burnin < self.n_iterations:
            raise ValueError("need 0 <= n_burnin < n_iterations")
        for name in ("target_acceptance", "target_acceptance_block"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.initial_widths is not None and any(w <= 0 for w in self.initial_widths):
            raise ValueError("initial slice widths must be positive")
        unknown = set(self.frozen) - set(BLOCKS)
        if unknown:
            raise ValueError(f"unknown blocks in frozen: {sorted(unknown)}")

    @property
    def n_draws(self) -> int:
        return (self.n_iterations - self.n_burnin) // self.thin

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class ChainOutput:
    names: list[str]
    draws: np.ndarray  # (n_draws, n_quantities)
    logpost: np.ndarray  # (n_iterations,)
    acceptance: dict[str, float]
    acceptance_log: list[tuple[int, str, float]]
    final_state: ModelState
    tracked_logpost: float
    seed: int

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.names.index(name)]


# --------------------------------------------------------------------------
# full log posterior


def log_posterior(panel: SurveillancePanel, survey: SurveyEstimates, graph: AdjacencyGraph,
                  state: ModelState) -> float:
    """Unnormalized log posterior of ``state``, computed from scratch."""
    t = panel.time_index
    mu = state.beta_mu[0] + state.beta_mu[1] * t
    lam = np.exp(state_log_risk(panel, state))
    total = float(np.sum(lk.latent_count_loglik(state.N, panel.populations, mu[None, :], lam)))
    eta = detection_eta(panel, state)
    for k in range(panel.n_outcomes):
        total += float(np.sum(lk.outcome_loglik(panel, k, state.N, expit(eta[k]))))
    total += lk.survey_loglik(survey, state.beta_mu[0], state.beta_mu[1])
    if graph.n_regions > 1:
        total += lk.icar_ar1_loglik(state.u, state.phi_u, state.tau2_u, graph)
        for k in range(panel.n_outcomes):
            total += lk.icar_ar1_loglik(state.f[k], state.phi_k[k], state.tau2_k[k], graph)
    total += lk.prior_logdensity(state)
    if panel.acs is not None:
        total += lk.acs_loglik(panel.acs, state.acs)
    return total


def state_log_risk(panel: SurveillancePanel, state: ModelState) -> np.ndarray:
    return risk_design(panel, state) @ state.gamma + state.u + state.v


def detection_eta(panel: SurveillancePanel, state: ModelState) -> np.ndarray:
    eta = state.mu_k[:, None, :] + state.f + state.eps
    for k, x in enumerate(panel.X):
        if x.shape[2]:
            eta[k] = eta[k] + x @ state.beta_k[k]
    return eta


# --------------------------------------------------------------------------
# initialization


def initial_state(panel: SurveillancePanel, survey: SurveyEstimates) -> ModelState:
    """Feasible, data-scaled starting point.

    Latent counts start at the pooled survey prevalence times the
    population (raised to the observation bound); effects at zero,
    variances at one, temporal correlations at 0.5.
    """
    n, T = panel.populations.shape
    K = panel.n_outcomes
    lower = panel.observed_lower_bounds()
    bad = np.argwhere(lower > panel.populations)
    if len(bad):
        i, t = bad[0]
        raise DataError(
            f"no feasible latent count for region {panel.region_ids[i]!r}, year {panel.years[t]}: "
            f"observations need at least {lower[i, t]} but population is {panel.populations[i, t]}"
        )
    sbar = survey.pooled_estimate()
    N = np.maximum(lower, np.rint(panel.populations * sbar).astype(np.int64))
    N = np.minimum(N, panel.populations)
    mu_k = np.zeros((K, T))
    for k in range(K):
        ysum = panel.counts[k].sum(axis=0).astype(float)
        nsum = N.sum(axis=0).astype(float)
        rate = np.clip(np.maximum(ysum, 0.5) / nsum, 1e-9, 1 - 1e-9)
        mu_k[k] = _logit(rate)
    acs_state = None
    if panel.acs is not None:
        acs_state = initial_acs_state(panel)
    return ModelState(
        N=N,
        u=np.zeros((n, T)),
        v=np.zeros((n, T)),
        f=np.zeros((K, n, T)),
        eps=np.zeros((K, n, T)),
        beta_mu=np.array([sbar, 0.0]),
        gamma=np.zeros(panel.n_risk_covariates),
        mu_k=mu_k,
        beta_k=[np.zeros(x.shape[2]) for x in panel.X],
        sigma2_k=np.ones(K),
        tau2_k=np.ones(K),
        phi_k=np.full(K, 0.5),
        tau2_u=1.0,
        phi_u=0.5,
        sigma2_v=1.0,
        acs=acs_state,
    )


def initial_acs_state(panel: SurveillancePanel) -> AcsState:
    acs = panel.acs
    J, n, L = acs.est1.shape
    omega = np.where(np.isnan(acs.est1), np.nan, acs.est1)
    # fill from the 5-year estimate whose window covers the year, then the variable mean
    for l in range(L):
        for lag in range(5):
            if l + lag < L:
                src = acs.est5[:, :, l + lag]
                omega[:, :, l] = np.where(np.isnan(omega[:, :, l]), src, omega[:, :, l])
    for j in range(J):
        vals = np.concatenate([acs.est1[j][~np.isnan(acs.est1[j])], acs.est5[j][~np.isnan(acs.est5[j])]])
        fill = float(np.mean(vals)) if len(vals) else 50.0
        omega[j] = np.where(np.isnan(omega[j]), fill, omega[j])
    omega = np.clip(omega, 1e-3, 100 - 1e-3)
    return AcsState(omega=omega, omega_bar=omega.mean(axis=1), tau2=np.ones((J, n)))


# --------------------------------------------------------------------------
# adaptation


def _nimble_factor(times_adapted: int, rate, target):
    gamma1 = 1.0 / (times_adapted + 3.0) ** 0.8
    return np.exp(10.0 * gamma1 * (np.asarray(rate) - target))


class _RW:
    """Adaptive random-walk scales for an array of independently accepted sites."""

    def __init__(self, shape, init_scale=0.1, target=0.44):
        self.log_scale = np.full(shape, math.log(init_scale))
        self.acc = np.zeros(shape)
        self.tries = np.zeros(shape)
        self.target = target
        self.times = 0
        self.total_acc = 0.0
        self.total_tries = 0.0

    @property
    def scale(self):
        return np.exp(self.log_scale)

    def record(self, accepted, where=None, counting=False):
        if where is None:
            self.acc += accepted
            self.tries += 1
            n_acc, n_try = float(np.sum(accepted)), float(np.size(accepted))
        else:
            self.acc[where] += accepted
            self.tries[where] += 1
            n_acc, n_try = float(np.sum(accepted)), float(np.size(accepted))
        if counting:
            self.total_acc += n_acc
            self.total_tries += n_try

    def adapt(self):
        rate = np.where(self.tries > 0, self.acc / np.maximum(self.tries, 1), self.target)
        self.log_scale += np.log(_nimble_factor(self.times, rate, self.target))
        self.times += 1
        self.acc[...] = 0
        self.tries[...] = 0

    @property
    def acceptance(self) -> float:
        return self.total_acc / self.total_tries if self.total_tries else float("nan")


class _BlockRW:
    """Adaptive multivariate random walk (NIMBLE-style covariance and scale)."""

    def __init__(self, dim, init_cov, target=0.234):
        self.dim = dim
        self.cov = np.array(init_cov, dtype=float)
        self.scale = 2.38 / math.sqrt(dim)
        self.target = target
        self.times = 0
        self.acc = 0
        self.tries = 0
        self.history = []
        self.total_acc = 0
        self.total_tries = 0

    def propose(self, rng, x):
        L = np.linalg.cholesky(self.cov + 1e-14 * np.eye(self.dim))
        return x + self.scale * (L @ rng.standard_normal(self.dim))

    def record(self, accepted, x, counting=False):
        self.acc += int(accepted)
        self.tries += 1
        self.history.append(np.array(x, dtype=float))
        if counting:
            self.total_acc += int(accepted)
            self.total_tries += 1

    def adapt(self):
        rate = self.acc / max(self.tries, 1)
        gamma1 = 1.0 / (self.times + 3.0) ** 0.8
        self.scale *= float(_nimble_factor(self.times, rate, self.target))
        if len(self.history) > 2:
            emp = np.cov(np.array(self.history).T)
            if np.all(np.isfinite(emp)) and np.trace(emp) > 0:
                self.cov = self.cov + gamma1 * (emp - self.cov)
        self.times += 1
        self.acc = self.tries = 0
        self.history = []

    @property
    def acceptance(self) -> float:
        return self.total_acc / self.total_tries if self.total_tries else float("nan")


# --------------------------------------------------------------------------
# the sampler


class GibbsSampler:
    """Holds one chain's state, cached log-density terms and adaptation."""

    def __init__(self, panel: SurveillancePanel, survey: SurveyEstimates, graph: AdjacencyGraph,
                 config: SamplerConfig, rng: np.random.Generator, state: ModelState | None = None):
        if graph.n_regions != panel.n_regions:
            raise DataError("graph and panel disagree on the number of regions")
        if "beta_mu" not in config.frozen:
            survey.check_identifiable()
        self.panel = panel
        self.survey = survey
        self.graph = graph
        self.config = config
        self.rng = rng
        self.state = initial_state(panel, survey) if state is None else state.copy()
        self.active = {b for b in BLOCKS if b not in config.frozen}
        if panel.acs is None:
            self.active.discard("acs")
        if graph.n_regions == 1:
            self.active -= {"u", "f", "phi_u", "phi_k", "tau2_u", "tau2_k"}

        n, T = panel.populations.shape
        K = panel.n_outcomes
        self.n, self.T, self.K = n, T, K
        self.P = panel.populations.astype(float)
        self.Y = panel.counts.astype(float)
        self.lower = panel.observed_lower_bounds().astype(float)
        self.lgP1 = gammaln(self.P + 1.0)
        self.lgY1 = gammaln(self.Y + 1.0)
        self.tvec = panel.time_index
        ck = panel.censored_outcome if panel.censor_codes is not None else None
        self.ck = ck
        if ck is not None:
            self.cmask = panel.censor_codes > 0
            self.c_lo, self.c_hi = lk.censored_interval(panel.counts[ck], panel.censor_codes)
        else:
            self.cmask = np.zeros((n, T), dtype=bool)

        bad = np.argwhere(self.state.N < self.lower) if state is not None else []
        if len(bad):
            i, t = bad[0]
            raise DataError(f"initial latent count below its bound at region {panel.region_ids[i]!r}, year {panel.years[t]}")

        colors = graph.coloring()
        self.color_sets = [np.flatnonzero(colors == c) for c in range(colors.max() + 1)]

        # N-marginal phase: rate parameters move with the latent counts summed
        # out, then every count is drawn exactly from its conditional.
        self.use_marginal = config.collapsed_moves and K <= 2 and "N" in self.active
        self.marginal = False
        self.collapsed = None
        self.group_tables = {}
        if self.use_marginal:
            self.collapsed = CollapsedCells(panel)
            for t in range(T):
                for c, S in enumerate(self.color_sets):
                    self.group_tables[(t, c)] = self.collapsed.subset(S * T + t)

        tgt = config.target_acceptance
        self.rw = {
            "u": _RW((n, T), 0.1, tgt),
            "v": _RW((n, T), 0.1, tgt),
            "f": _RW((K, n, T), 0.1, tgt),
            "eps": _RW((K, n, T), 0.1, tgt),
            "cell": _RW((n, T), 0.1, tgt),
            "level": _RW((), 0.02, tgt),
            "year": _RW(T, 0.02, tgt),
            "mu_k": _RW((K, T), 0.05, tgt),
            "beta_k": [_RW(x.shape[2], 0.05, tgt) for x in panel.X],
            "gamma": _RW(panel.n_risk_covariates, 0.05, tgt),
            "phi_u": _RW((), 0.5, tgt),
            "phi_k": _RW(K, 0.5, tgt),
            "scale": _RW((), 0.02, tgt),
        }
        s0 = max(self.state.beta_mu[0], 1e-3)
        self.beta_rw = _BlockRW(2, np.diag([(0.02 * s0) ** 2, (0.002 * s0) ** 2]), config.target_acceptance_block)
        self.trend_rw = _BlockRW(2, np.diag([(0.02 * s0) ** 2, (0.002 * s0) ** 2]), config.target_acceptance_block)
        if panel.acs is not None:
            J, _, L = panel.acs.est1.shape
            self.rw["omega"] = _RW((J, n, L), 0.5, tgt)
            self.rw["omega_bar"] = _RW((J, L), 0.5, tgt)
            self.rw["tau2_i"] = _RW((J, n), 0.5, tgt)

        # factor slice sampler state
        if config.initial_widths is not None:
            w0 = np.resize(np.asarray(config.initial_widths, dtype=float), T)
        else:
            w0 = None
        self.fs_dirs = np.broadcast_to(np.eye(T), (n, T, T)).copy()
        if w0 is None:
            self.fs_widths = np.maximum(1.0, np.sqrt(np.maximum(self.state.N, 1.0)))
        else:
            self.fs_widths = np.broadcast_to(w0, (n, T)).copy()
        self.fs_exp = np.zeros((n, T))
        self.fs_con = np.zeros((n, T))
        self.fs_sum = np.zeros((n, T))
        self.fs_outer = np.zeros((n, T, T))
        self.fs_count = 0
        self.fs_rotated = False

        self.iteration = 0
        self.uncentered_years = 0
        self.counting = False
        self.acceptance_log: list[tuple[int, str, float]] = []
        self.refresh()

    # -- cache management -------------------------------------------------

    def refresh(self):
        """Recompute every cached quantity from the state."""
        st = self.state
        self.design = risk_design(self.panel, st)
        self.logmu = np.log(np.maximum(st.beta_mu[0] + st.beta_mu[1] * self.tvec, 1e-300))
        self.loglam = self.design @ st.gamma + st.u + st.v
        self._set_rates()
        self.eta = detection_eta(self.panel, st)
        self._set_detection()
        self._set_N_terms()
        self.lp_survey = lk.survey_loglik(self.survey, *st.beta_mu)
        self._set_field_terms()
        self.lp_prior = lk.prior_logdensity(st)
        self.lp_acs = lk.acs_loglik(self.panel.acs, st.acs) if self.panel.acs is not None else 0.0

    def _set_rates(self):
        self.logr = self.logmu[None, :] + self.loglam
        self.log1mr = np.where(self.logr < 0, np.log1p(-np.exp(np.minimum(self.logr, 0.0))), -np.inf)

    def _latent_ll(self, logr, log1mr):
        N = self.state.N
        with np.errstate(invalid="ignore"):
            ll = self.lgc_lat + N * logr + (self.P - N) * log1mr
        return np.where(logr < 0, ll, -np.inf)

    def _set_detection(self):
        self.logp = log_expit(self.eta)
        self.log1mp = log_expit(-self.eta)

    def _set_N_terms(self):
        N = self.state.N.astype(float)
        lgN1 = gammaln(N + 1.0)
        self.lgc_lat = self.lgP1 - lgN1 - gammaln(self.P - N + 1.0)
        self.lgc_obs = lgN1[None] - self.lgY1 - gammaln(N[None] - self.Y + 1.0)
        self.ll_lat = self._latent_ll(self.logr, self.log1mr)
        self.ll_obs = np.empty((self.K, self.n, self.T))
        for k in range(self.K):
            self.ll_obs[k] = self._obs_ll(k, None, self.eta[k])

    def _set_field_terms(self):
        st = self.state
        if self.graph.n_regions > 1:
            self.lp_u = lk.icar_ar1_loglik(st.u, st.phi_u, st.tau2_u, self.graph)
            self.lp_f = np.array([lk.icar_ar1_loglik(st.f[k], st.phi_k[k], st.tau2_k[k], self.graph)
                                  for k in range(self.K)])
        else:
            self.lp_u = 0.0
            self.lp_f = np.zeros(self.K)

    def _obs_ll(self, k, idx, eta_vals):
        """Outcome-``k`` log likelihood at cells ``idx`` (None = all) for given logits."""
        sl = (slice(None), slice(None)) if idx is None else idx
        N = self.state.N[sl].astype(float)
        Y = self.Y[k][sl]
        out = self.lgc_obs[k][sl] + Y * log_expit(eta_vals) + (N - Y) * log_expit(-eta_vals)
        if k == self.ck:
            cm = self.cmask[sl]
            if np.any(cm):
                out = np.array(out, dtype=float, copy=True)
                lo, hi = self.c_lo[sl][cm], self.c_hi[sl][cm]
                out[cm] = lk.log_binomial_interval(lo, hi, N[cm], expit(np.asarray(eta_vals)[cm]))
        return out

    def tracked_logpost(self) -> float:
        return float(self.ll_lat.sum() + self.ll_obs.sum() + self.lp_survey + self.lp_u
                     + self.lp_f.sum() + self.lp_prior + self.lp_acs)

    # -- latent counts: factor slice sampler --------------------------------

    def _prepare_slice_terms(self):
        """Per-cell coefficients of the latent-count density at the current rates.

        Up to a constant in N each cell contributes
        ``sum_j w_j * gammaln(N - Y_j + 1) + N * slope`` plus, at censored
        cells, the interval term of the censored outcome.
        """
        if not hasattr(self, "fs_weights"):
            K = self.K
            plain = np.ones((K, self.n, self.T))
            if self.ck is not None:
                plain[self.ck][self.cmask] = 0.0
            self.fs_plain = plain
            self.fs_weights = np.concatenate([
                (plain.sum(axis=0) - 1.0)[None], -np.ones((1, self.n, self.T)), -plain,
            ])
            # gammaln arguments are N + 1, P - N + 1 and N - Y_k + 1
            self.fs_offsets = np.concatenate([np.zeros((1, self.n, self.T)), self.P[None], self.Y])
            self.fs_signs = np.r_[1.0, -1.0, np.ones(K)][:, None, None]
        with np.errstate(invalid="ignore"):
            self.fs_slope = self.logr - self.log1mr + (self.fs_plain * self.log1mp).sum(axis=0)

    def _county_logdens(self, rows, Nc):
        """Sum over years of all terms involving the latent counts of ``rows`` (up to a constant)."""
        P = self.P[rows]
        low = self.lower[rows]
        bad = (Nc < low) | (Nc > P)
        Nc = np.where(bad, low, Nc)
        arg = self.fs_signs * (Nc[None] - self.fs_offsets[:, rows]) + 1.0
        ll = (self.fs_weights[:, rows] * gammaln(arg)).sum(axis=0) + Nc * self.fs_slope[rows]
        if self.ck is not None:
            cm = self.cmask[rows]
            if cm.any():
                p = np.exp(self.logp[self.ck, rows][cm])
                ll[cm] += lk.log_binomial_interval(self.c_lo[rows][cm], self.c_hi[rows][cm], Nc[cm], p)
        ll = np.where(bad, -np.inf, ll)
        return ll.sum(axis=1)

    def update_latent_counts(self):
        """One factor-slice sweep over every county's trajectory."""
        rng = self.rng
        n, T = self.n, self.T
        m = self.config.max_stepout
        N = self.state.N.astype(float)
        x = N + rng.uniform(-0.5, 0.5, size=(n, T))
        allrows = np.arange(n)
        self._prepare_slice_terms()
        cur = self._county_logdens(allrows, N)
        if not np.all(np.isfinite(cur)):
            i = int(np.flatnonzero(~np.isfinite(cur))[0])
            raise RuntimeError(f"latent counts of region {self.panel.region_ids[i]!r} have zero density at the current state")
        for d in range(T):
            e = self.fs_dirs[:, :, d]
            w = self.fs_widths[:, d]
            logy = cur - rng.exponential(size=n)
            L = -w * rng.uniform(size=n)
            R = L + w
            J = np.floor(m * rng.uniform(size=n))
            Kr = (m - 1) - J
            for side, budget in ((-1, J), (1, Kr)):
                active = budget > 0
                while active.any():
                    rows = active.nonzero()[0]
                    edge = L[rows] if side < 0 else R[rows]
                    lp = self._county_logdens(rows, np.floor(x[rows] + edge[:, None] * e[rows] + 0.5))
                    grow = lp > logy[rows]
                    g = rows[grow]
                    if side < 0:
                        L[g] -= w[g]
                    else:
                        R[g] += w[g]
                    budget[g] -= 1
                    self.fs_exp[g, d] += 1
                    active[rows[~grow]] = False
                    active &= budget > 0
            active = np.ones(n, dtype=bool)
            while active.any():
                rows = active.nonzero()[0]
                s = L[rows] + rng.uniform(size=len(rows)) * (R[rows] - L[rows])
                xn = x[rows] + s[:, None] * e[rows]
                lp = self._county_logdens(rows, np.floor(xn + 0.5))
                ok = lp > logy[rows]
                acc = rows[ok]
                x[acc] = xn[ok]
                cur[acc] = lp[ok]
                active[acc] = False
                rej = rows[~ok]
                s_rej = s[~ok]
                neg = s_rej < 0
                L[rej[neg]] = s_rej[neg]
                R[rej[~neg]] = s_rej[~neg]
                self.fs_con[rej, d] += 1
        self.state.N = np.floor(x + 0.5).astype(np.int64)
        self._set_N_terms()
        if self.adapting:
            self.fs_sum += self.state.N
            self.fs_outer += self.state.N[:, :, None] * self.state.N[:, None, :]
            self.fs_count += 1

    def _adapt_slice(self):
        tot = self.fs_exp + self.fs_con
        factor = np.where(tot > 0, 2.0 * self.fs_exp / np.maximum(tot, 1), 1.0)
        self.fs_widths = np.clip(self.fs_widths * np.clip(factor, 0.5, 2.0), 0.5, self.P.max(axis=1)[:, None])
        self.fs_exp[...] = 0
        self.fs_con[...] = 0
        if self.fs_count >= max(10, 2 * self.T):
            mean = self.fs_sum / self.fs_count
            cov = self.fs_outer / self.fs_count - mean[:, :, None] * mean[:, None, :]
            vals, vecs = np.linalg.eigh(cov + 1e-9 * np.eye(self.T))
            if not self.fs_rotated:
                self.fs_widths = np.maximum(1.0, 2.0 * np.sqrt(np.maximum(vals, 0.0)))
                self.fs_rotated = True
            self.fs_dirs = vecs

    # -- data terms for proposed rates ------------------------------------------
    #
    # Every update of a rate parameter compares data log likelihoods at the
    # cells it touches. With ``marginal`` set these are the N-marginal cell
    # likelihoods (cached in ``self.marg``); otherwise they are the terms
    # conditional on the current latent counts (``ll_lat`` / ``ll_obs``).

    def _slice_of(self, grp):
        return (slice(None), slice(None)) if grp is None else (grp[0], grp[1])

    def _marg_eval(self, table, logr, logp, log1mp):
        ok = logr < 0
        ll = table.loglik(np.where(ok, logr, -1.0), logp, log1mp)
        return np.where(ok, np.reshape(ll, np.shape(logr)), -np.inf)

    def _table(self, grp):
        return self.collapsed if grp is None else self.group_tables[grp[2]]

    def _rate_ll(self, grp, logr_new):
        """``(new, current)`` data log likelihood at the cells of ``grp`` for new log latent rates."""
        sl = self._slice_of(grp)
        if self.marginal:
            ksl = (slice(None),) + sl
            new = self._marg_eval(self._table(grp), logr_new, self.logp[ksl], self.log1mp[ksl])
            return new, self.marg[sl]
        log1mr = np.where(logr_new < 0, np.log1p(-np.exp(np.minimum(logr_new, 0.0))), -np.inf)
        N = self.state.N[sl]
        with np.errstate(invalid="ignore"):
            new = self.lgc_lat[sl] + N * logr_new + (self.P[sl] - N) * log1mr
        return np.where(logr_new < 0, new, -np.inf), self.ll_lat[sl]

    def _commit_rate(self, grp, acc, logr_new, new_ll):
        sl = self._slice_of(grp)
        self.logr[sl] = np.where(acc, logr_new, self.logr[sl])
        lr = self.logr[sl]
        self.log1mr[sl] = np.where(lr < 0, np.log1p(-np.exp(np.minimum(lr, 0.0))), -np.inf)
        cache = self.marg if self.marginal else self.ll_lat
        cache[sl] = np.where(acc, new_ll, cache[sl])

    def _det_ll(self, k, grp, eta_new):
        """``(new, current)`` data log likelihood at the cells of ``grp`` for new logits of outcome ``k``."""
        sl = self._slice_of(grp)
        if self.marginal:
            ksl = (slice(None),) + sl
            lp = self.logp[ksl].copy()
            l1 = self.log1mp[ksl].copy()
            lp[k] = log_expit(eta_new)
            l1[k] = log_expit(-eta_new)
            return self._marg_eval(self._table(grp), self.logr[sl], lp, l1), self.marg[sl]
        idx = None if grp is None else sl
        return self._obs_ll(k, idx, eta_new), self.ll_obs[k][sl]

    def _commit_det(self, k, grp, acc, eta_new, new_ll):
        sl = self._slice_of(grp)
        ek = self.eta[k]
        ek[sl] = np.where(acc, eta_new, ek[sl])
        self.logp[k][sl] = log_expit(ek[sl])
        self.log1mp[k][sl] = log_expit(-ek[sl])
        cache = self.marg if self.marginal else self.ll_obs[k]
        cache[sl] = np.where(acc, new_ll, cache[sl])

    def _refresh_data_terms(self):
        """Recompute the data cache of the current mode after a global change of rates."""
        if self.marginal:
            self.marg = self._marg_eval(self.collapsed, self.logr, self.logp, self.log1mp)
        else:
            self._refresh_lat_ll()

    def _refresh_lat_ll(self):
        self.ll_lat = self._latent_ll(self.logr, self.log1mr)

    # -- random fields ------------------------------------------------------

    def _field_groups(self, t):
        for c, S in enumerate(self.color_sets):
            yield (S, t, (t, c))

    def update_risk_field(self):
        """Single-site Metropolis on ``u`` by color class, then per-year centering."""
        st = self.state
        rw = self.rw["u"]
        for t in range(self.T):
            for grp in self._field_groups(t):
                S = grp[0]
                mean, var = lk.icar_full_conditional(st.u, st.phi_u, st.tau2_u, self.graph, t, S)
                cur = st.u[S, t]
                step = rw.scale[S, t] * self.rng.standard_normal(len(S))
                prop = cur + step
                dprior = ((cur - mean) ** 2 - (prop - mean) ** 2) / (2.0 * var)
                logr_new = self.logr[S, t] + step
                new_ll, old_ll = self._rate_ll(grp, logr_new)
                acc = np.log(self.rng.uniform(size=len(S))) < new_ll - old_ll + dprior
                rw.record(acc, (S, np.full(len(S), t)), self.counting)
                st.u[S, t] = np.where(acc, prop, cur)
                self.loglam[S, t] += np.where(acc, step, 0.0)
                self._commit_rate(grp, acc, logr_new, new_ll)
        shift = st.u.mean(axis=0)
        # a year whose centered rates would leave (0, 1) is centered at a later sweep
        feasible = np.all(self.logr - shift[None, :] < 0, axis=0)
        if not feasible.all():
            self.uncentered_years += int((~feasible).sum())
            shift = np.where(feasible, shift, 0.0)
        st.u -= shift
        self.loglam -= shift[None, :]
        self._set_rates()
        self._refresh_data_terms()
        self.lp_u = lk.icar_ar1_loglik(st.u, st.phi_u, st.tau2_u, self.graph)

    def update_iid_risk(self):
        st = self.state
        rw = self.rw["v"]
        step = rw.scale * self.rng.standard_normal(st.v.shape)
        prop = st.v + step
        logr_new = self.logr + step
        new_ll, old_ll = self._rate_ll(None, logr_new)
        dlog = new_ll - old_ll + (st.v ** 2 - prop ** 2) / (2.0 * st.sigma2_v)
        acc = np.log(self.rng.uniform(size=st.v.shape)) < dlog
        rw.record(acc, None, self.counting)
        st.v = np.where(acc, prop, st.v)
        self.loglam = np.where(acc, self.loglam + step, self.loglam)
        self._commit_rate(None, acc, logr_new, new_ll)

    def update_detection_field(self, k: int):
        """Site updates of ``f^(k)``; the per-year mean moves into ``mu_k`` so predictors are unchanged."""
        st = self.state
        rw = self.rw["f"]
        fk = st.f[k]
        for t in range(self.T):
            for grp in self._field_groups(t):
                S = grp[0]
                mean, var = lk.icar_full_conditional(fk, st.phi_k[k], st.tau2_k[k], self.graph, t, S)
                cur = fk[S, t]
                step = rw.scale[k, S, t] * self.rng.standard_normal(len(S))
                prop = cur + step
                dprior = ((cur - mean) ** 2 - (prop - mean) ** 2) / (2.0 * var)
                eta_new = self.eta[k, S, t] + step
                new_ll, old_ll = self._det_ll(k, grp, eta_new)
                acc = np.log(self.rng.uniform(size=len(S))) < new_ll - old_ll + dprior
                rw.record(acc, (np.full(len(S), k), S, np.full(len(S), t)), self.counting)
                fk[S, t] = np.where(acc, prop, cur)
                self._commit_det(k, grp, acc, eta_new, new_ll)
        shift = fk.mean(axis=0)
        fk -= shift
        st.mu_k[k] += shift
        self.lp_f[k] = lk.icar_ar1_loglik(fk, st.phi_k[k], st.tau2_k[k], self.graph)

    def update_iid_detection(self, k: int):
        st = self.state
        rw = self.rw["eps"]
        cur = st.eps[k]
        step = rw.scale[k] * self.rng.standard_normal(cur.shape)
        prop = cur + step
        eta_new = self.eta[k] + step
        new_ll, old_ll = self._det_ll(k, None, eta_new)
        dlog = new_ll - old_ll + (cur ** 2 - prop ** 2) / (2.0 * st.sigma2_k[k])
        acc = np.log(self.rng.uniform(size=cur.shape)) < dlog
        rw.record(acc, (k,), self.counting)
        st.eps[k] = np.where(acc, prop, cur)
        self._commit_det(k, None, acc, eta_new, new_ll)

    def update_cell_tradeoff(self):
        """Joint move ``v + s``, ``eps^(k) - s`` per cell (N summed out).

        More latent people with lower detection explains the same counts;
        this direction is slow for one-at-a-time updates.
        """
        st = self.state
        rw = self.rw["cell"]
        s = rw.scale * self.rng.standard_normal(st.v.shape)
        v_new = st.v + s
        eps_new = st.eps - s[None]
        logr_new = self.logr + s
        eta_new = self.eta - s[None]
        ok = logr_new < 0
        lp, l1 = log_expit(eta_new), log_expit(-eta_new)
        new_ll = self._marg_eval(self.collapsed, logr_new, lp, l1)
        dprior = (st.v ** 2 - v_new ** 2) / (2.0 * st.sigma2_v)
        dprior = dprior + ((st.eps ** 2 - eps_new ** 2) / (2.0 * st.sigma2_k[:, None, None])).sum(axis=0)
        acc = ok & (np.log(self.rng.uniform(size=s.shape)) < new_ll - self.marg + dprior)
        rw.record(acc, None, self.counting)
        st.v = np.where(acc, v_new, st.v)
        st.eps = np.where(acc[None], eps_new, st.eps)
        self.loglam = np.where(acc, self.loglam + s, self.loglam)
        self.eta = np.where(acc[None], eta_new, self.eta)
        self._set_detection()
        self._commit_rate(None, acc, logr_new, new_ll)

    # -- intercepts and coefficients ------------------------------------------

    def update_detection_intercepts(self, k: int):
        """Per-year random walk on ``mu_k[k]``; years are independent given the rest."""
        st = self.state
        rw = self.rw["mu_k"]
        delta = rw.scale[k] * self.rng.standard_normal(self.T)
        eta_new = self.eta[k] + delta[None, :]
        new_ll, old_ll = self._det_ll(k, None, eta_new)
        acc = np.log(self.rng.uniform(size=self.T)) < (new_ll - old_ll).sum(axis=0)
        rw.record(acc, (np.full(self.T, k), np.arange(self.T)), self.counting)
        st.mu_k[k] = np.where(acc, st.mu_k[k] + delta, st.mu_k[k])
        self._commit_det(k, None, np.broadcast_to(acc[None, :], eta_new.shape), eta_new, new_ll)

    def update_detection_coefficients(self, k: int):
        st = self.state
        X = self.panel.X[k]
        rw = self.rw["beta_k"][k]
        for j in range(X.shape[2]):
            delta = rw.scale[j] * self.rng.standard_normal()
            eta_new = self.eta[k] + delta * X[:, :, j]
            new_ll, old_ll = self._det_ll(k, None, eta_new)
            acc = math.log(self.rng.uniform()) < float((new_ll - old_ll).sum())
            rw.record(np.array(acc), (j,), self.counting)
            if acc:
                st.beta_k[k][j] += delta
                self._commit_det(k, None, True, eta_new, new_ll)

    def update_risk_coefficients(self):
        st = self.state
        rw = self.rw["gamma"]
        for j in range(len(st.gamma)):
            delta = rw.scale[j] * self.rng.standard_normal()
            change = delta * self.design[:, :, j]
            logr_new = self.logr + change
            new_ll, old_ll = self._rate_ll(None, logr_new)
            acc = math.log(self.rng.uniform()) < float((new_ll - old_ll).sum())
            rw.record(np.array(acc), (j,), self.counting)
            if acc:
                st.gamma[j] += delta
                self.loglam = self.loglam + change
                self._commit_rate(None, True, logr_new, new_ll)

    def _logmu_of(self, beta):
        mu = beta[0] + beta[1] * self.tvec
        if np.any(mu <= 0):
            return None
        return np.log(mu)

    def update_statewide_trend(self):
        """Block random walk on ``(beta0_mu, beta1_mu)``."""
        st = self.state
        prop = self.beta_rw.propose(self.rng, st.beta_mu)
        logmu = self._logmu_of(prop)
        accepted = False
        if logmu is not None:
            logr_new = logmu[None, :] + self.loglam
            new_ll, old_ll = self._rate_ll(None, logr_new)
            new_survey = lk.survey_loglik(self.survey, *prop)
            dlog = float((new_ll - old_ll).sum()) + new_survey - self.lp_survey
            if math.log(self.rng.uniform()) < dlog:
                accepted = True
                st.beta_mu = prop
                self.logmu = logmu
                self.lp_survey = new_survey
                self._commit_rate(None, True, logr_new, new_ll)
        self.beta_rw.record(accepted, st.beta_mu, self.counting)

    def update_global_scale(self):
        """Prevalence times ``e^s`` with every detection logit shifted by ``-s`` (N summed out)."""
        st = self.state
        rw = self.rw["scale"]
        s = float(rw.scale * self.rng.standard_normal())
        prop = st.beta_mu * math.exp(s)
        logmu = self._logmu_of(prop)
        accepted = False
        if logmu is not None:
            logr_new = logmu[None, :] + self.loglam
            eta_new = self.eta - s
            new_ll = self._marg_eval(self.collapsed, logr_new, log_expit(eta_new), log_expit(-eta_new))
            new_survey = lk.survey_loglik(self.survey, *prop)
            # the two trend coefficients scale together: Jacobian e^{2s}
            dlog = float(new_ll.sum() - self.marg.sum()) + new_survey - self.lp_survey + 2.0 * s
            if math.log(self.rng.uniform()) < dlog:
                accepted = True
                st.beta_mu = prop
                st.mu_k = st.mu_k - s
                self.logmu = logmu
                self.eta = eta_new
                self.lp_survey = new_survey
                self._set_detection()
                self._commit_rate(None, True, logr_new, new_ll)
        rw.record(np.array(accepted), None, self.counting)

    def shift_detection_means(self, k: int):
        """Move the per-year mean of ``eps^(k)`` into ``mu_k`` (predictors unchanged).

        Translating ``eps[k, :, t]`` by ``-d`` and ``mu_k[k, t]`` by ``+d`` leaves
        the likelihood alone, so ``d`` has the exact conditional
        ``N(mean_i eps[k, i, t], sigma2_k / n)``.
        """
        st = self.state
        sd = math.sqrt(st.sigma2_k[k] / self.n)
        d = st.eps[k].mean(axis=0) + sd * self.rng.standard_normal(self.T)
        st.eps[k] -= d[None, :]
        st.mu_k[k] += d

    def shift_risk_level(self):
        """``v + d`` with the statewide trend times ``e^-d``; every latent rate is unchanged."""
        st = self.state
        rw = self.rw["level"]
        d = float(rw.scale * self.rng.standard_normal())
        prop = st.beta_mu * math.exp(-d)
        new_survey = lk.survey_loglik(self.survey, *prop)
        v_new = st.v + d
        dprior = (np.sum(st.v ** 2) - np.sum(v_new ** 2)) / (2.0 * st.sigma2_v)
        # Jacobian of (beta_mu, v) -> (beta_mu e^-d, v + d) is e^{-2d}
        dlog = new_survey - self.lp_survey + dprior - 2.0 * d
        acc = math.log(self.rng.uniform()) < dlog
        rw.record(np.array(acc), None, self.counting)
        if acc:
            st.beta_mu = prop
            st.v = v_new
            self.logmu = self.logmu - d
            self.loglam = self.loglam + d
            self.lp_survey = new_survey

    def shift_risk_coefficients(self):
        """Exact translation ``gamma_j + d``, ``v - d * W_j``; latent rates are unchanged."""
        st = self.state
        for j in range(len(st.gamma)):
            w = self.design[:, :, j]
            ww = float(np.sum(w * w))
            if ww <= 0:
                continue
            d = float(np.sum(st.v * w)) / ww + math.sqrt(st.sigma2_v / ww) * self.rng.standard_normal()
            st.gamma[j] += d
            st.v = st.v - d * w

    def shift_detection_coefficients(self, k: int):
        """Exact translation ``beta_k[j] + d``, ``eps^(k) - d * X_j``; logits are unchanged."""
        st = self.state
        X = self.panel.X[k]
        for j in range(X.shape[2]):
            x = X[:, :, j]
            xx = float(np.sum(x * x))
            if xx <= 0:
                continue
            d = float(np.sum(st.eps[k] * x)) / xx + math.sqrt(st.sigma2_k[k] / xx) * self.rng.standard_normal()
            st.beta_k[k][j] += d
            st.eps[k] = st.eps[k] - d * x

    def update_trend_compensated(self):
        """Block move on the trend with ``v`` absorbing the change in ``log mu_t``.

        The map ``(beta, v) -> (beta', v + log mu(beta) - log mu(beta'))`` has unit
        Jacobian and leaves every latent rate fixed, so only the survey and the
        prior on ``v`` enter the ratio.
        """
        st = self.state
        brw = self.trend_rw
        prop = brw.propose(self.rng, st.beta_mu)
        logmu = self._logmu_of(prop)
        accepted = False
        if logmu is not None:
            shift = (self.logmu - logmu)[None, :]
            v_new = st.v + shift
            new_survey = lk.survey_loglik(self.survey, *prop)
            dprior = (np.sum(st.v ** 2) - np.sum(v_new ** 2)) / (2.0 * st.sigma2_v)
            if math.log(self.rng.uniform()) < new_survey - self.lp_survey + dprior:
                accepted = True
                st.beta_mu = prop
                st.v = v_new
                self.logmu = logmu
                self.loglam = self.loglam + shift
                self.lp_survey = new_survey
        brw.record(accepted, st.beta_mu, self.counting)

    def update_year_tradeoff(self):
        """Per-year ``v[:, t] + s_t`` with every ``mu_k[:, t] - s_t`` (N summed out)."""
        st = self.state
        rw = self.rw["year"]
        s = rw.scale * self.rng.standard_normal(self.T)
        logr_new = self.logr + s[None, :]
        eta_new = self.eta - s[None, None, :]
        new_ll = self._marg_eval(self.collapsed, logr_new, log_expit(eta_new), log_expit(-eta_new))
        v_new = st.v + s[None, :]
        dprior = (np.sum(st.v ** 2, axis=0) - np.sum(v_new ** 2, axis=0)) / (2.0 * st.sigma2_v)
        dlog = (new_ll - self.marg).sum(axis=0) + dprior
        acc = np.log(self.rng.uniform(size=self.T)) < dlog
        rw.record(acc, None, self.counting)
        st.v = np.where(acc[None, :], v_new, st.v)
        st.mu_k = np.where(acc[None, :], st.mu_k - s[None, :], st.mu_k)
        self.loglam = np.where(acc[None, :], self.loglam + s[None, :], self.loglam)
        self.eta = np.where(acc[None, None, :], eta_new, self.eta)
        self._set_detection()
        self._commit_rate(None, np.broadcast_to(acc[None, :], logr_new.shape), logr_new, new_ll)

    def draw_latent_counts(self):
        """Exact draw of every latent count given the rates (one or two outcomes)."""
        self.state.N = self.collapsed.draw_latent(self.rng, self.logr, self.logp, self.log1mp).astype(np.int64)
        self._set_N_terms()

    # -- temporal correlations and variances ----------------------------------

    def _update_phi(self, field, phi, tau2, rw, where):
        y = math.log(phi) - math.log1p(-phi)
        y_new = y + float(np.ravel(rw.scale)[0] if where is None else rw.scale[where]) * self.rng.standard_normal()
        phi_new = float(expit(y_new))
        if not 0.0 < phi_new < 1.0:
            acc = False
        else:
            cur = lk.icar_ar1_loglik(field, phi, tau2, self.graph)
            new = lk.icar_ar1_loglik(field, phi_new, tau2, self.graph)
            jac = (math.log(phi_new) + math.log1p(-phi_new)) - (math.log(phi) + math.log1p(-phi))
            acc = math.log(self.rng.uniform()) < new - cur + jac
        if where is None:
            rw.record(np.array(acc), None, self.counting)
        else:
            rw.record(np.array(acc), (where,), self.counting)
        return phi_new if acc else phi

    def update_temporal_correlations(self):
        st = self.state
        if "phi_u" in self.active:
            st.phi_u = self._update_phi(st.u, st.phi_u, st.tau2_u, self.rw["phi_u"], None)
            self.lp_u = lk.icar_ar1_loglik(st.u, st.phi_u, st.tau2_u, self.graph)
        if "phi_k" in self.active:
            for k in range(self.K):
                st.phi_k[k] = self._update_phi(st.f[k], st.phi_k[k], st.tau2_k[k], self.rw["phi_k"], k)
                self.lp_f[k] = lk.icar_ar1_loglik(st.f[k], st.phi_k[k], st.tau2_k[k], self.graph)

    def _draw_inv_gamma(self, shape, scale):
        return scale / self.rng.gamma(shape)

    def update_variances(self):
        """Conjugate inverse-gamma draws for the Gaussian effect variances."""
        st = self.state
        a, b = lk.PRIOR_SHAPE, lk.PRIOR_SCALE
        n, T = self.n, self.T
        rank = T * (n - 1)
        if "tau2_u" in self.active:
            q = lk.icar_quadratic_form(st.u, st.phi_u, self.graph)
            st.tau2_u = float(self._draw_inv_gamma(a + rank / 2.0, b + q / 2.0))
        if "tau2_k" in self.active:
            for k in range(self.K):
                q = lk.icar_quadratic_form(st.f[k], st.phi_k[k], self.graph)
                st.tau2_k[k] = self._draw_inv_gamma(a + rank / 2.0, b + q / 2.0)
        if "sigma2_v" in self.active:
            st.sigma2_v = float(self._draw_inv_gamma(a + n * T / 2.0, b + np.sum(st.v ** 2) / 2.0))
        if "sigma2_k" in self.active:
            for k in range(self.K):
                st.sigma2_k[k] = self._draw_inv_gamma(a + n * T / 2.0, b + np.sum(st.eps[k] ** 2) / 2.0)
        if {"tau2_u", "tau2_k"} & self.active:
            self._set_field_terms()

    # -- latent ACS covariates ------------------------------------------------

    def update_acs(self):
        st = self.state
        acs = self.panel.acs
        A = st.acs
        J, n, L = acs.est1.shape
        off = 1 - acs.t_start
        p_known = self.panel.W.shape[2]
        rw = self.rw["omega"]
        for j in range(J):
            for l in range(L):
                cur = A.omega[j, :, l].copy()
                prop = cur + rw.scale[j, :, l] * self.rng.standard_normal(n)
                inside = (prop > 0) & (prop < 100)
                prop_c = np.where(inside, prop, cur)
                d = self._acs_local_delta(j, l, cur, prop_c)
                t = l - off
                new_loglam = None
                if 0 <= t < self.T:
                    g = st.gamma[p_known + j]
                    new_loglam = self.loglam[:, t] + g * (prop_c - cur) / acs.scale[j]
                    logr = self.logmu[t] + new_loglam
                    ok = logr < 0
                    r = np.exp(np.minimum(logr, 0.0))
                    N = st.N[:, t]
                    with np.errstate(divide="ignore", invalid="ignore"):
                        new_ll = np.where(ok, self.lgc_lat[:, t] + N * logr + (self.P[:, t] - N) * np.log1p(-r), -np.inf)
                    d = d + new_ll - self.ll_lat[:, t]
                d = np.where(inside, d, -np.inf)
                acc = np.log(self.rng.uniform(size=n)) < d
                rw.record(acc, (np.full(n, j), np.arange(n), np.full(n, l)), self.counting)
                A.omega[j, acc, l] = prop_c[acc]
                if new_loglam is not None:
                    self.loglam[acc, t] = new_loglam[acc]
                    self.ll_lat[acc, t] = new_ll[acc]
        self.design = risk_design(self.panel, st)
        self._set_rates()
        self._refresh_lat_ll()

        # statewide means, independent across (variable, year)
        rw = self.rw["omega_bar"]
        cur = A.omega_bar
        prop = cur + rw.scale * self.rng.standard_normal(cur.shape)
        inside = (prop > 0) & (prop < 100)
        prop_c = np.where(inside, prop, cur)
        sd = np.sqrt(A.tau2)[:, :, None]
        old = lk.truncnorm_logpdf(A.omega, cur[:, None, :], sd, 0.0, 100.0).sum(axis=1)
        new = lk.truncnorm_logpdf(A.omega, prop_c[:, None, :], sd, 0.0, 100.0).sum(axis=1)
        acc = (np.log(self.rng.uniform(size=cur.shape)) < new - old) & inside
        rw.record(acc, None, self.counting)
        A.omega_bar = np.where(acc, prop_c, cur)

        # per-county variances on the log scale
        rw = self.rw["tau2_i"]
        cur = A.tau2
        prop = cur * np.exp(rw.scale * self.rng.standard_normal(cur.shape))
        mb = A.omega_bar[:, None, :]
        old = lk.truncnorm_logpdf(A.omega, mb, np.sqrt(cur)[:, :, None], 0.0, 100.0).sum(axis=2)
        new = lk.truncnorm_logpdf(A.omega, mb, np.sqrt(prop)[:, :, None], 0.0, 100.0).sum(axis=2)
        dlog = new - old + lk.inv_gamma_logpdf(prop) - lk.inv_gamma_logpdf(cur) + np.log(prop) - np.log(cur)
        acc = np.log(self.rng.uniform(size=cur.shape)) < dlog
        rw.record(acc, None, self.counting)
        A.tau2 = np.where(acc, prop, cur)
        self.lp_acs = lk.acs_loglik(acs, A)
        self.lp_prior = lk.prior_logdensity(st)

    def _acs_local_delta(self, j, l, cur, prop):
        """Change in ACS-layer terms when latent column ``l`` of variable ``j`` moves."""
        acs = self.panel.acs
        A = self.state.acs
        L = acs.est1.shape[2]
        sd = np.sqrt(A.tau2[j])
        d = (lk.truncnorm_logpdf(prop, A.omega_bar[j, l], sd, 0.0, 100.0)
             - lk.truncnorm_logpdf(cur, A.omega_bar[j, l], sd, 0.0, 100.0))
        e1 = acs.est1[j, :, l]
        o1 = ~np.isnan(e1)
        if np.any(o1):
            d = d.copy()
            d[o1] += (lk.truncnorm_logpdf(e1[o1], prop[o1], acs.se1[j, o1, l], 0.0, 100.0)
                      - lk.truncnorm_logpdf(e1[o1], cur[o1], acs.se1[j, o1, l], 0.0, 100.0))
        om = A.omega[j]
        for s in range(l, min(l + 5, L)):
            if s < 4:
                continue
            e5 = acs.est5[j, :, s]
            o5 = ~np.isnan(e5)
            if not np.any(o5):
                continue
            wmean = om[:, s - 4:s + 1].mean(axis=1)
            wnew = wmean + (prop - cur) / 5.0
            d = d.copy()
            d[o5] += (lk.truncnorm_logpdf(e5[o5], wnew[o5], acs.se5[j, o5, s], 0.0, 100.0)
                      - lk.truncnorm_logpdf(e5[o5], wmean[o5], acs.se5[j, o5, s], 0.0, 100.0))
        return d

    # -- driver ---------------------------------------------------------------

    @property
    def adapting(self) -> bool:
        return self.iteration < self.config.n_burnin

    def sweep(self):
        st = self.state
        act = self.active
        if "N" in act:
            self.update_latent_counts()
        if self.use_marginal:
            self.marginal = True
            self._refresh_data_terms()
        if "u" in act:
            self.update_risk_field()
        if "v" in act:
            self.update_iid_risk()
        for k in range(self.K):
            if "f" in act:
                self.update_detection_field(k)
            if "eps" in act:
                self.update_iid_detection(k)
            if "beta_k" in act and self.panel.X[k].shape[2]:
                self.update_detection_coefficients(k)
        if self.marginal and {"v", "eps"} <= act:
            self.update_cell_tradeoff()
        if "gamma" in act and len(st.gamma):
            self.update_risk_coefficients()
        if {"v", "gamma"} <= act:
            self.shift_risk_coefficients()
        if {"eps", "beta_k"} <= act:
            for k in range(self.K):
                self.shift_detection_coefficients(k)
        if {"v", "beta_mu"} <= act:
            self.shift_risk_level()
            self.update_trend_compensated()
        if {"eps", "mu_k"} <= act:
            for k in range(self.K):
                self.shift_detection_means(k)
        if self.marginal and {"v", "mu_k"} <= act:
            self.update_year_tradeoff()
        if "beta_mu" in act:
            self.update_statewide_trend()
        if "mu_k" in act:
            for k in range(self.K):
                self.update_detection_intercepts(k)
        if self.marginal and {"beta_mu", "mu_k"} <= act:
            self.update_global_scale()
        if self.marginal:
            self.marginal = False
            self.draw_latent_counts()
        self.update_temporal_correlations()
        self.update_variances()
        if "acs" in act:
            self.update_acs()
        if act - {"N"}:
            self.lp_prior = lk.prior_logdensity(st)

    def _adapt(self):
        for key, rw in self.rw.items():
            if isinstance(rw, list):
                for r in rw:
                    r.adapt()
            else:
                rate = np.nanmean(np.where(rw.tries > 0, rw.acc / np.maximum(rw.tries, 1), np.nan)) if np.any(rw.tries) else None
                if rate is not None:
                    self.acceptance_log.append((self.iteration, key, float(rate)))
                rw.adapt()
        for key, brw in (("beta_mu", self.beta_rw), ("trend", self.trend_rw)):
            if brw.tries:
                self.acceptance_log.append((self.iteration, key, brw.acc / brw.tries))
            brw.adapt()
        if "N" in self.active:
            self._adapt_slice()

    def acceptance_rates(self) -> dict[str, float]:
        out = {}
        for key, rw in self.rw.items():
            if isinstance(rw, list):
                tot_a = sum(r.total_acc for r in rw)
                tot_t = sum(r.total_tries for r in rw)
                if tot_t:
                    out[key] = tot_a / tot_t
            elif rw.total_tries:
                out[key] = rw.acceptance
        for key, brw in (("beta_mu", self.beta_rw), ("trend", self.trend_rw)):
            if brw.total_tries:
                out[key] = brw.acceptance
        return out


# --------------------------------------------------------------------------
# monitored quantities


def monitored_names(panel: SurveillancePanel) -> list[str]:
    regs, yrs = panel.region_ids, panel.years
    names = []
    for prefix in ("N", "lambda"):
        names += [f"{prefix}[{r},{y}]" for r in regs for y in yrs]
    for k, oname in enumerate(panel.outcome_names):
        names += [f"p[{oname},{r},{y}]" for r in regs for y in yrs]
    names += [f"mu[{y}]" for y in yrs]
    names += ["beta_mu[0]", "beta_mu[1]"]
    gnames = list(panel.w_names) + (list(panel.acs.names) if panel.acs is not None else [])
    names += [f"gamma[{g}]" for g in gnames]
    for k, oname in enumerate(panel.outcome_names):
        names += [f"mu_k[{oname},{y}]" for y in yrs]
        names += [f"beta_k[{oname},{x}]" for x in panel.x_names[k]]
    for k, oname in enumerate(panel.outcome_names):
        names += [f"sigma2_k[{oname}]", f"tau2_k[{oname}]", f"phi_k[{oname}]"]
    names += ["tau2_u", "phi_u", "sigma2_v"]
    if panel.acs is not None:
        names += [f"omega_bar[{v},{panel.acs.t_start + l}]" for v in panel.acs.names
                  for l in range(panel.acs.n_latent_years)]
    return names


def monitored_values(sampler: GibbsSampler) -> np.ndarray:
    st = sampler.state
    parts = [
        st.N.ravel().astype(float),
        np.exp(sampler.loglam).ravel(),
        np.exp(sampler.logp).reshape(-1),
        np.exp(sampler.logmu),
        st.beta_mu,
        st.gamma,
    ]
    for k in range(sampler.K):
        parts += [st.mu_k[k], st.beta_k[k]]
    for k in range(sampler.K):
        parts.append(np.array([st.sigma2_k[k], st.tau2_k[k], st.phi_k[k]]))
    parts.append(np.array([st.tau2_u, st.phi_u, st.sigma2_v]))
    if st.acs is not None:
        parts.append(st.acs.omega_bar.ravel())
    return np.concatenate(parts)


# --------------------------------------------------------------------------
# public entry points


def run_chain(panel: SurveillancePanel, survey: SurveyEstimates, graph: AdjacencyGraph,
              config: SamplerConfig, chain: int = 0, state: ModelState | None = None) -> ChainOutput:
    """Run one chain seeded with ``config.rng_seed + chain``."""
    seed = config.rng_seed + chain
    rng = np.random.default_rng(seed)
    sampler = GibbsSampler(panel, survey, graph, config, rng, state)
    names = monitored_names(panel)
    draws = np.empty((config.n_draws, len(names)))
    trace = np.empty(config.n_iterations)
    row = 0
    for it in range(config.n_iterations):
        sampler.iteration = it
        sampler.counting = it >= config.n_burnin
        sampler.sweep()
        if sampler.adapting and (it + 1) % config.adapt_interval == 0:
            sampler._adapt()
        trace[it] = sampler.tracked_logpost()
        if it >= config.n_burnin and (it - config.n_burnin) % config.thin == 0 and row < len(draws):
            draws[row] = monitored_values(sampler)
            row += 1
    draws = draws[:row]
    log.debug("chain %d (seed %d) done, acceptance %s, deferred centerings %d", chain, seed,
              sampler.acceptance_rates(), sampler.uncentered_years)
    return ChainOutput(
        names=names,
        draws=draws,
        logpost=trace,
        acceptance=sampler.acceptance_rates(),
        acceptance_log=sampler.acceptance_log,
        final_state=sampler.state,
        tracked_logpost=sampler.tracked_logpost(),
        seed=seed,
    )


def _run_chain_job(args):
    return run_chain(*args)


def run_chains(panel, survey, graph, config: SamplerConfig, state=None) -> list[ChainOutput]:
    """Run ``config.n_chains`` independent chains, in worker processes if ``config.workers > 1``."""
    jobs = [(panel, survey, graph, config, c, state) for c in range(config.n_chains)]
    if config.workers > 1 and config.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(config.workers, config.n_chains)) as ex:
            return list(ex.map(_run_chain_job, jobs))
    return [run_chain(*job) for job in jobs]


# --------------------------------------------------------------------------
# summaries and diagnostics


def effective_sample_size(x: np.ndarray) -> float:
    """Single-chain ESS from autocorrelations summed over initial positive pairs (Geyer)."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 4:
        return float(n)
    xc = x - x.mean()
    var = xc @ xc / n
    if var <= 0:
        return float(n)
    f = np.fft.rfft(xc, 2 * n)
    acov = np.fft.irfft(f * np.conj(f))[:n] / n
    rho = acov / var
    tau = -1.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return float(n / max(tau, 1.0 / n))


def summarize_draws(names: list[str], chains: list[np.ndarray], level: float = 0.95) -> PosteriorSummary:
    """Pool draw matrices (one per chain) into mean / sd / equal-tail bounds."""
    chains = [np.asarray(c, dtype=float) for c in chains]
    if not chains or sum(len(c) for c in chains) < 2:
        raise ValueError("need at least two retained draws to summarize")
    pooled = np.concatenate(chains, axis=0)
    alpha = (1.0 - level) / 2.0
    lower, upper = np.quantile(pooled, [alpha, 1.0 - alpha], axis=0)
    ess = np.zeros(pooled.shape[1])
    for c in chains:
        if len(c) >= 2:
            ess += np.array([effective_sample_size(c[:, q]) for q in range(c.shape[1])])
    return PosteriorSummary(
        names=list(names),
        mean=pooled.mean(axis=0),
        sd=pooled.std(axis=0, ddof=1),
        lower=lower,
        upper=upper,
        ess=ess,
        n_draws=len(pooled),
        level=level,
    )


def summarize(chains: list[ChainOutput], level: float = 0.95) -> PosteriorSummary:
    if not chains:
        raise ValueError("no chains to summarize")
    return summarize_draws(chains[0].names, [c.draws for c in chains], level)


def split_rhat(chains: list[np.ndarray]) -> np.ndarray:
    """Split-chain potential scale reduction per column.

    Each chain is cut in half and the halves treated as separate chains.
    """
    halves = []
    for c in chains:
        c = np.asarray(c, dtype=float)
        h = len(c) // 2
        if h < 2:
            raise ValueError("need at least four draws per chain for split R-hat")
        halves += [c[:h], c[h:2 * h]]
    x = np.stack(halves)  # (m, n, q)
    m, n = x.shape[:2]
    means = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean(axis=0)
    B = n * means.var(axis=0, ddof=1)
    V = (n - 1) / n * W + B / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(V / W)
    return np.where(W > 0, r, np.where(B > 0, np.inf, 1.0))
