"""Log-density kernels for every layer of the hierarchy.

All functions are vectorized over array arguments where that makes sense
and return ``-inf`` for configurations that violate a hard constraint.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln, log_ndtr, logsumexp, xlog1py, xlogy
from scipy import stats

from .core import (
    BOTH_SUPPRESSED,
    MINOR_SUPPRESSED,
    SUPPRESSION_WIDTH,
    AcsPanel,
    AcsState,
    DataError,
    ModelState,
    SurveillancePanel,
    SurveyEstimates,
)
from .graph import AdjacencyGraph

LOG_2PI = math.log(2.0 * math.pi)
PRIOR_SHAPE = 0.5
PRIOR_SCALE = 0.5
# Widest censored interval is {2, ..., 18}.
MAX_INTERVAL = 2 * SUPPRESSION_WIDTH - 1


# --------------------------------------------------------------------------
# binomial pieces


def log_binom_coef(n, y):
    return gammaln(n + 1.0) - gammaln(y + 1.0) - gammaln(n - y + 1.0)


def binomial_logpmf(y, n, p):
    """Exact binomial log pmf via log-gamma; ``-inf`` outside ``0..n``."""
    y = np.asarray(y, dtype=float)
    n = np.asarray(n, dtype=float)
    p = np.asarray(p, dtype=float)
    valid = (y >= 0) & (y <= n)
    ys = np.where(valid, y, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = log_binom_coef(n, ys) + xlogy(ys, p) + xlog1py(n - ys, -p)
    out = np.where(valid, out, -np.inf)
    return out.item() if out.ndim == 0 else out


def binomial_logcdf(y, n, p) -> float:
    """``log P(Y <= y)`` for ``Y ~ Binomial(n, p)`` (scalar)."""
    y = int(math.floor(y))
    n = int(n)
    if y < 0:
        return -math.inf
    if y >= n:
        return 0.0
    if y >= n * p and n - y <= 5000:
        # above the mean: complement of the (shorter) upper tail
        upper = float(logsumexp(binomial_logpmf(np.arange(y + 1, n + 1), n, p)))
        return min(0.0, math.log1p(-math.exp(upper))) if upper < 0 else -math.inf
    if y <= 5000:
        return min(0.0, float(logsumexp(binomial_logpmf(np.arange(y + 1), n, p))))
    return float(stats.binom.logcdf(y, n, p))


def log_binomial_interval(lo, hi, n, p):
    """``log P(lo <= Y <= hi)``, summing at most ``MAX_INTERVAL`` pmf terms.

    Vectorized; empty intervals (after clipping to ``0..n``) give ``-inf``.
    """
    lo, hi, n, p = np.broadcast_arrays(
        np.asarray(lo, dtype=float), np.asarray(hi, dtype=float),
        np.asarray(n, dtype=float), np.asarray(p, dtype=float),
    )
    width = int(np.max(hi - lo, initial=0)) + 1
    if width > MAX_INTERVAL:
        raise ValueError("interval wider than any censoring interval")
    offs = np.arange(width).reshape((width,) + (1,) * lo.ndim)
    ys = lo[None] + offs
    terms = binomial_logpmf(ys, n[None], p[None])
    terms = np.where(ys <= hi[None], terms, -np.inf)
    with np.errstate(divide="ignore"):
        out = logsumexp(terms, axis=0)
    return out.item() if np.ndim(out) == 0 else out


def censored_interval(stored, code):
    """Admissible total-count interval ``[lo, hi]`` for each censoring code."""
    stored = np.asarray(stored)
    code = np.asarray(code)
    lo = np.where(code == MINOR_SUPPRESSED, stored + 1, np.where(code == BOTH_SUPPRESSED, 2, stored))
    hi = np.where(
        code == MINOR_SUPPRESSED,
        stored + SUPPRESSION_WIDTH,
        np.where(code == BOTH_SUPPRESSED, 2 * SUPPRESSION_WIDTH, stored),
    )
    return lo, hi


def censored_loglik(stored, code, N, p):
    """Treatment-outcome log likelihood for arrays of cells.

    Code 0 is the plain pmf; codes 1 and 2 sum the pmf over the admissible
    totals, i.e. ``F(adult + 9) - F(adult)`` and ``F(18) - F(1)``.
    """
    stored, code, N, p = np.broadcast_arrays(
        np.asarray(stored), np.asarray(code), np.asarray(N), np.asarray(p, dtype=float)
    )
    out = np.asarray(binomial_logpmf(stored, N, p), dtype=float).copy()
    cens = code != 0
    if np.any(cens):
        lo, hi = censored_interval(stored[cens], code[cens])
        out[cens] = log_binomial_interval(lo, hi, N[cens], p[cens])
    return out.item() if out.ndim == 0 else out


def treatment_loglik(i: int, t: int, panel: SurveillancePanel, N_it: int, p: float) -> float:
    k = panel.censored_outcome
    if k is None:
        return float(binomial_logpmf(panel.counts[0, i, t], N_it, p))
    return float(censored_loglik(panel.counts[k, i, t], panel.censor_codes[i, t], N_it, p))


def death_loglik(i: int, t: int, panel: SurveillancePanel, N_it: int, p: float, k: int | None = None) -> float:
    """Uncensored outcome term; defaults to the last outcome (deaths)."""
    if k is None:
        k = panel.n_outcomes - 1
    return float(binomial_logpmf(panel.counts[k, i, t], N_it, p))


def outcome_loglik(panel: SurveillancePanel, k: int, N, p):
    """``(n, T)`` log likelihood of outcome ``k`` given latent counts and detection."""
    if panel.censor_codes is not None and k == panel.censored_outcome:
        return censored_loglik(panel.counts[k], panel.censor_codes, N, p)
    return binomial_logpmf(panel.counts[k], N, p)


def latent_count_loglik(N, P, mu, lam):
    """``Binomial(P, mu * lam)`` log pmf; ``-inf`` when the rate leaves (0, 1)."""
    rate = np.asarray(mu, dtype=float) * np.asarray(lam, dtype=float)
    ok = (rate > 0.0) & (rate < 1.0)
    out = np.where(ok, binomial_logpmf(N, P, np.where(ok, rate, 0.5)), -np.inf)
    return out.item() if out.ndim == 0 else out


# --------------------------------------------------------------------------
# truncated normals


def log_normal_mass(a, b):
    """``log(Phi(b) - Phi(a))`` for standardized bounds ``a < b``, stable in both tails."""
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    # Reflect so the interval sits in the lower tail, where log_ndtr is accurate.
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    lhi = log_ndtr(hi)
    llo = log_ndtr(lo)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = lhi + np.log1p(-np.exp(llo - lhi))
    return out.item() if out.ndim == 0 else out


def truncnorm_logpdf(x, mean, sd, lower, upper):
    x, mean, sd = np.broadcast_arrays(
        np.asarray(x, dtype=float), np.asarray(mean, dtype=float), np.asarray(sd, dtype=float)
    )
    z = (x - mean) / sd
    out = -0.5 * z * z - 0.5 * LOG_2PI - np.log(sd) - log_normal_mass((lower - mean) / sd, (upper - mean) / sd)
    out = np.where((x > lower) & (x < upper), out, -np.inf)
    return out.item() if out.ndim == 0 else out


def survey_means(survey: SurveyEstimates, beta0: float, beta1: float) -> np.ndarray:
    return beta0 + beta1 * survey.time_coefficient


def survey_loglik(survey: SurveyEstimates, beta0: float, beta1: float) -> float:
    """Sum of ``N_(0,1)`` truncated-normal log densities of the survey rows."""
    if np.any(survey.se <= 0):
        raise DataError("survey standard errors must be positive")
    return float(np.sum(truncnorm_logpdf(survey.estimate, survey_means(survey, beta0, beta1), survey.se, 0.0, 1.0)))


# --------------------------------------------------------------------------
# ICAR x AR(1) fields


def ar1_innovations(field: np.ndarray, phi: float) -> np.ndarray:
    """``d_1 = u_1``, ``d_t = u_t - phi u_{t-1}``; ``field`` is ``(n, T)``."""
    d = field.copy()
    d[:, 1:] -= phi * field[:, :-1]
    return d


def icar_quadratic_form(field: np.ndarray, phi: float, graph: AdjacencyGraph) -> float:
    """``sum_t d_t' (H - A) d_t`` by iterating over edges."""
    d = ar1_innovations(np.asarray(field, dtype=float), phi)
    e = graph.edges
    diff = d[e[:, 0]] - d[e[:, 1]]
    return float(np.sum(diff * diff))


def icar_ar1_loglik(field: np.ndarray, phi: float, tau2: float, graph: AdjacencyGraph) -> float:
    """Improper ICAR x AR(1) log kernel including the rank ``n - 1`` scale term."""
    field = np.asarray(field, dtype=float)
    n, T = field.shape
    return -0.5 * icar_quadratic_form(field, phi, graph) / tau2 - 0.5 * T * (n - 1) * math.log(tau2)


def icar_conditional(i: int, t: int, field: np.ndarray, phi: float, tau2: float, graph: AdjacencyGraph):
    """Conditional of ``field[i, t]`` from the slice-``t`` factor alone.

    ``t`` is a 0-based column. This is the familiar ICAR full conditional
    with an AR(1) lag; it ignores the factor for slice ``t + 1`` and so is
    the exact full conditional only in the last slice.
    """
    nb = graph.neighbors[i]
    w = len(nb)
    if t == 0:
        mean = field[nb, 0].sum() / w
    else:
        mean = phi * field[i, t - 1] + (field[nb, t] - phi * field[nb, t - 1]).sum() / w
    return float(mean), tau2 / w


def neighbor_sums(graph: AdjacencyGraph, x: np.ndarray) -> np.ndarray:
    """``A @ x`` along the first axis."""
    e = graph.edges
    out = np.zeros_like(x)
    np.add.at(out, e[:, 0], x[e[:, 1]])
    np.add.at(out, e[:, 1], x[e[:, 0]])
    return out


def icar_full_conditional(field: np.ndarray, phi: float, tau2: float, graph: AdjacencyGraph,
                          t: int, sites=None, nbr_sum=None):
    """Exact Gaussian full conditional of ``field[sites, t]`` under the joint kernel.

    Combines the slice-``t`` factor with the slice-``t+1`` factor in which
    ``field[:, t]`` appears through the lag. Returns ``(mean, var)`` arrays.
    ``nbr_sum`` may pass a precomputed ``A @ d`` for the innovations.
    """
    n, T = field.shape
    if sites is None:
        sites = np.arange(n)
    w = graph.neighbor_counts[sites].astype(float)
    d = ar1_innovations(field, phi) if nbr_sum is None else None
    if nbr_sum is None:
        cols = [t] if t + 1 >= T else [t, t + 1]
        nbr_sum = {c: neighbor_sums(graph, d[:, c]) for c in cols}
    lag = phi * field[sites, t - 1] if t > 0 else 0.0
    a = lag + nbr_sum[t][sites] / w
    if t + 1 >= T:
        return a, tau2 / w
    # The slice t+1 factor is Gaussian in d_{i,t+1} = u_{i,t+1} - phi u_it with mean m'.
    m_next = nbr_sum[t + 1][sites] / w
    mean = (a + phi * (field[sites, t + 1] - m_next)) / (1.0 + phi * phi)
    return mean, tau2 / (w * (1.0 + phi * phi))


# --------------------------------------------------------------------------
# ACS covariate layer


def acs_loglik(acs: AcsPanel, state: AcsState) -> float:
    """Measurement and process terms of the latent-covariate layer.

    1-year rows are centered on the latent value for that year, 5-year
    rows on the mean of the window ending at their year; the latent
    values themselves are truncated normal around the statewide mean.
    """
    omega = state.omega
    if np.any((omega <= 0) | (omega >= 100)):
        return -math.inf
    return float(np.sum(acs_cell_terms(acs, state)))


def acs_window_means(omega: np.ndarray) -> np.ndarray:
    """Trailing 5-year means; columns before index 4 are NaN."""
    out = np.full(omega.shape, np.nan)
    c = np.cumsum(omega, axis=-1)
    out[..., 4] = c[..., 4] / 5.0
    out[..., 5:] = (c[..., 5:] - c[..., :-5]) / 5.0
    return out


def acs_cell_terms(acs: AcsPanel, state: AcsState) -> np.ndarray:
    """``(J, n, L)`` per-cell log terms (observation rows assigned to their year)."""
    omega = state.omega
    proc = truncnorm_logpdf(omega, state.omega_bar[:, None, :], np.sqrt(state.tau2)[:, :, None], 0.0, 100.0)
    obs1 = ~np.isnan(acs.est1)
    t1 = np.zeros(omega.shape)
    t1[obs1] = truncnorm_logpdf(acs.est1[obs1], omega[obs1], acs.se1[obs1], 0.0, 100.0)
    obs5 = ~np.isnan(acs.est5)
    t5 = np.zeros(omega.shape)
    if np.any(obs5):
        wm = acs_window_means(omega)
        t5[obs5] = truncnorm_logpdf(acs.est5[obs5], wm[obs5], acs.se5[obs5], 0.0, 100.0)
    return proc + t1 + t5


# --------------------------------------------------------------------------
# priors


def inv_gamma_logpdf(x, shape: float = PRIOR_SHAPE, scale: float = PRIOR_SCALE):
    """Inverse-gamma log density, ``p(x) ∝ x^(-shape-1) exp(-scale/x)``; ``-inf`` for ``x <= 0``."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = shape * math.log(scale) - gammaln(shape) - (shape + 1.0) * np.log(x) - scale / x
    out = np.where(x > 0, out, -np.inf)
    return out.item() if out.ndim == 0 else out


def normal_logpdf_sum(x: np.ndarray, var: float) -> float:
    x = np.asarray(x, dtype=float)
    if var <= 0:
        return -math.inf
    return float(-0.5 * np.sum(x * x) / var - 0.5 * x.size * (LOG_2PI + math.log(var)))


def prior_logdensity(state: ModelState) -> float:
    """Priors on parameters plus the iid Gaussian random-effect terms.

    Regression coefficients and intercepts carry flat priors and add nothing.
    """
    variances = [np.atleast_1d(state.sigma2_k), np.atleast_1d(state.tau2_k),
                 np.atleast_1d(state.tau2_u), np.atleast_1d(state.sigma2_v)]
    if state.acs is not None:
        variances.append(np.ravel(state.acs.tau2))
    var = np.concatenate(variances)
    if np.any(var <= 0):
        return -math.inf
    phis = np.concatenate([np.atleast_1d(state.phi_k), np.atleast_1d(state.phi_u)])
    if np.any((phis <= 0) | (phis >= 1)):
        return -math.inf
    total = float(np.sum(inv_gamma_logpdf(var)))
    if state.acs is not None:
        ob = state.acs.omega_bar
        if np.any((ob <= 0) | (ob >= 100)):
            return -math.inf
        total -= ob.size * math.log(100.0)
    total += normal_logpdf_sum(state.v, state.sigma2_v)
    for k in range(state.eps.shape[0]):
        total += normal_logpdf_sum(state.eps[k], state.sigma2_k[k])
    return total
