import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from latentpop import likelihoods as lk
from latentpop.core import AcsPanel, AcsState, SurveyEstimates
from latentpop.graph import AdjacencyGraph, build_grid_adjacency

from conftest import make_panel, zero_state

mp.mp.dps = 50


def exact_log_interval(lo, hi, n, p):
    """High-precision log of sum of binomial pmf over lo..hi."""
    p = mp.mpf(p)
    total = mp.mpf(0)
    for j in range(max(lo, 0), min(hi, n) + 1):
        total += mp.binomial(n, j) * p**j * (1 - p) ** (n - j)
    return float(mp.log(total)) if total > 0 else -math.inf


# -- binomial --------------------------------------------------------------


def test_binomial_logpmf_examples():
    assert lk.binomial_logpmf(0, 7, 0.0) == 0.0
    assert lk.binomial_logpmf(1, 2, 0.5) == pytest.approx(math.log(0.5), abs=1e-14)
    direct = math.log(math.comb(10, 3) * 0.25**3 * 0.75**7)
    assert lk.binomial_logpmf(3, 10, 0.25) == pytest.approx(direct, abs=1e-12)
    assert lk.binomial_logpmf(5, 3, 0.5) == -math.inf


def test_binomial_pmf_normalizes():
    y = np.arange(0, 41)
    assert np.exp(lk.binomial_logpmf(y, 40, 0.37)).sum() == pytest.approx(1.0, abs=1e-13)


def test_binomial_large_population():
    # gammaln coefficients stay accurate at county scale
    assert lk.binomial_logpmf(65_000, 1_300_000, 0.05) == pytest.approx(
        stats.binom.logpmf(65_000, 1_300_000, 0.05), abs=1e-8
    )


def test_binomial_logcdf_examples():
    assert lk.binomial_logcdf(12, 12, 0.3) == 0.0
    assert lk.binomial_logcdf(0, 12, 0.3) == pytest.approx(12 * math.log(0.7), abs=1e-13)
    brute = math.log(sum(math.comb(20, j) * 0.3**j * 0.7 ** (20 - j) for j in range(6)))
    assert lk.binomial_logcdf(5, 20, 0.3) == pytest.approx(brute, abs=1e-13)
    assert lk.binomial_logcdf(30, 12, 0.3) == 0.0
    assert lk.binomial_logcdf(-1, 12, 0.3) == -math.inf


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 25), st.floats(0.001, 0.999), st.data())
def test_binomial_cdf_matches_bruteforce(n, p, data):
    y = data.draw(st.integers(0, n))
    brute = sum(math.comb(n, j) * p**j * (1 - p) ** (n - j) for j in range(y + 1))
    assert abs(math.exp(lk.binomial_logcdf(y, n, p)) - brute) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 60), st.floats(0.01, 0.99))
def test_binomial_cdf_monotone(n, p):
    vals = [lk.binomial_logcdf(y, n, p) for y in range(n + 1)]
    assert all(b >= a - 1e-14 for a, b in zip(vals, vals[1:]))


# -- censored treatment outcome -------------------------------------------


def test_treatment_uncensored_reduces_to_pmf():
    panel = make_panel(censor=True)
    y = panel.counts[0, 2, 2]
    assert lk.treatment_loglik(2, 2, panel, 10 + y, 0.4) == pytest.approx(lk.binomial_logpmf(y, 10 + y, 0.4))


def test_treatment_both_suppressed():
    panel = make_panel(censor=True)
    assert panel.censor_codes[0, 0] == 2
    val = lk.treatment_loglik(0, 0, panel, 20, 0.5)
    assert val == pytest.approx(exact_log_interval(2, 18, 20, 0.5), abs=1e-12)


def test_treatment_minor_suppressed_example():
    assert lk.censored_loglik(7, 1, 30, 0.3) == pytest.approx(exact_log_interval(8, 16, 30, 0.3), abs=1e-12)


def test_censored_empty_interval():
    assert lk.censored_loglik(0, 2, 1, 0.5) == -math.inf
    assert lk.censored_loglik(7, 1, 7, 0.5) == -math.inf


def test_censored_matches_enumeration_oracle():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(150):
        code = int(rng.integers(0, 3))
        N = int(rng.integers(2, 201))
        p = float(rng.uniform(0.005, 0.995))
        if code == 0:
            y = int(rng.integers(0, N + 1))
            lo = hi = y
        elif code == 1:
            y = int(rng.integers(0, max(N - 1, 1)))
            lo, hi = y + 1, y + 9
        else:
            y, lo, hi = 0, 2, 18
        want = exact_log_interval(lo, hi, N, p)
        got = lk.censored_loglik(y, code, N, p)
        if want == -math.inf:
            assert got == -math.inf
        else:
            worst = max(worst, abs(got - want))
    assert worst < 1e-10


def test_censored_vectorized_matches_scalar():
    stored = np.array([3, 0, 5, 11])
    code = np.array([0, 2, 1, 0])
    N = np.array([40, 25, 60, 11])
    p = np.array([0.1, 0.3, 0.2, 0.9])
    vec = lk.censored_loglik(stored, code, N, p)
    for j in range(4):
        assert vec[j] == pytest.approx(lk.censored_loglik(stored[j], code[j], N[j], p[j]), abs=1e-13)


def test_death_loglik_examples():
    panel = make_panel()
    assert lk.binomial_logpmf(0, 0, 0.3) == 0.0
    y = panel.counts[1, 0, 0]
    assert lk.death_loglik(0, 0, panel, 100 + y, 0.01) == pytest.approx(lk.binomial_logpmf(y, 100 + y, 0.01))
    assert lk.binomial_logpmf(2, 100, 0.01) == pytest.approx(stats.binom.logpmf(2, 100, 0.01), abs=1e-12)


def test_latent_count_loglik():
    assert lk.latent_count_loglik(3, 10, 1.0, 1.0) == -math.inf
    assert lk.latent_count_loglik(3, 10, 0.5, 0.0) == -math.inf
    assert lk.latent_count_loglik(0, 1000, 0.05, 1.0) == pytest.approx(1000 * math.log(0.95), abs=1e-10)
    assert lk.latent_count_loglik(50, 1000, 0.025, 2.0) == pytest.approx(stats.binom.logpmf(50, 1000, 0.05), abs=1e-10)


def test_outcome_loglik_shapes():
    panel = make_panel(censor=True)
    N = panel.observed_lower_bounds() + 5
    for k in range(panel.n_outcomes):
        out = lk.outcome_loglik(panel, k, N, 0.2)
        assert out.shape == N.shape and np.all(np.isfinite(out))


# -- truncated normals and the survey ------------------------------------


@pytest.mark.parametrize("a,b", [(-1.0, 2.0), (8.0, 12.0), (-40.0, -30.0), (30.0, 31.0), (-0.5, 0.5), (-3.0, 50.0)])
def test_log_normal_mass_tails(a, b):
    if a > 0:
        a, b = -b, -a
    want = mp.log(mp.ncdf(b) - mp.ncdf(a))
    assert lk.log_normal_mass(a, b) == pytest.approx(float(want), rel=1e-10)


def test_truncnorm_matches_scipy():
    x = np.array([0.03, 0.05, 0.2])
    got = lk.truncnorm_logpdf(x, 0.05, 0.01, 0.0, 1.0)
    want = stats.truncnorm.logpdf(x, (0 - 0.05) / 0.01, (1 - 0.05) / 0.01, loc=0.05, scale=0.01)
    assert np.allclose(got, want, atol=1e-10)
    assert lk.truncnorm_logpdf(1.5, 0.5, 0.1, 0.0, 1.0) == -math.inf


def test_survey_single_year_mean():
    s = SurveyEstimates.from_rows([(4, 4, 0.05, 0.01), (1, 1, 0.05, 0.01)])
    assert lk.survey_means(s, 0.05, 0.002)[0] == pytest.approx(0.058)


def test_survey_ohio_row_finite():
    s = SurveyEstimates.from_rows([(-3, 0, 0.05, 0.0025)])
    mean = 0.0535 - 0.0006 * (-1.5)
    want = stats.truncnorm.logpdf(0.05, -mean / 0.0025, (1 - mean) / 0.0025, loc=mean, scale=0.0025)
    got = lk.survey_loglik(s, 0.0535, -0.0006)
    assert np.isfinite(got) and got == pytest.approx(want, abs=1e-9)


def test_survey_wild_mean_is_finite():
    s = SurveyEstimates.from_rows([(1, 1, 0.05, 0.01), (2, 2, 0.05, 0.01)])
    assert np.isfinite(lk.survey_loglik(s, 1.3, 0.0))


def test_survey_mean_is_direct_average():
    for a in range(-5, 11):
        for b in range(a, min(a + 10, 10) + 1):
            s = SurveyEstimates.from_rows([(a, b, 0.05, 0.01)])
            direct = np.mean([0.05 + 0.001 * t for t in range(a, b + 1)])
            assert abs(lk.survey_means(s, 0.05, 0.001)[0] - direct) < 1e-12


def test_survey_information_decreases_with_noise():
    rows = [(-3, 0, 0.05, 0.0025), (1, 1, 0.055, 0.003), (2, 4, 0.045, 0.004)]
    b0, b1, h = 0.0535, -0.0006, 1e-7

    def grad(extra):
        s = SurveyEstimates.from_rows([(a, b, e, se + extra) for a, b, e, se in rows])
        return (lk.survey_loglik(s, b0 + h, b1) - lk.survey_loglik(s, b0 - h, b1)) / (2 * h)

    g = [abs(grad(x)) for x in (0.0, 0.001, 0.005)]
    assert g[0] > g[1] > g[2]


# -- ICAR x AR(1) ------------------------------------------------------------


def dense_kernel(field, phi, graph):
    Q = graph.precision_structure()
    d = lk.ar1_innovations(field, phi)
    return sum(d[:, t] @ Q @ d[:, t] for t in range(field.shape[1]))


def test_icar_zero_field():
    g = build_grid_adjacency(3, 3)
    assert lk.icar_quadratic_form(np.zeros((9, 2)), 0.5, g) == 0.0


def test_icar_two_region_example():
    g = AdjacencyGraph(2, np.array([[0, 1]]))
    x = 0.7
    assert lk.icar_quadratic_form(np.array([[x], [-x]]), 0.3, g) == pytest.approx((2 * x) ** 2)


def test_icar_sparse_equals_dense_lattice():
    rng = np.random.default_rng(0)
    g = build_grid_adjacency(3, 3)
    u = rng.standard_normal((9, 3))
    u -= u.mean(axis=0)
    assert lk.icar_quadratic_form(u, 0.6, g) == pytest.approx(dense_kernel(u, 0.6, g), abs=1e-10)
    want = -0.5 * dense_kernel(u, 0.6, g) / 0.4 - 0.5 * 3 * 8 * math.log(0.4)
    assert lk.icar_ar1_loglik(u, 0.6, 0.4, g) == pytest.approx(want, abs=1e-10)


def test_icar_conditional_examples():
    g = AdjacencyGraph(2, np.array([[0, 1]]))
    u = np.array([[0.3, 0.1], [-0.4, 0.6]])
    mean, var = lk.icar_conditional(0, 0, u, 0.5, 2.0, g)
    assert mean == pytest.approx(-0.4) and var == 2.0
    m0, v0 = lk.icar_conditional(0, 1, u, 0.0, 2.0, g)
    assert m0 == pytest.approx(0.6) and v0 == 2.0
    g9 = build_grid_adjacency(3, 3)
    assert lk.icar_conditional(4, 0, np.zeros((9, 1)), 0.5, 1.0, g9)[1] == 0.25


def _fd_conditional(field, i, t, phi, tau2, graph, h=1e-3):
    """Gaussian mean/var of field[i, t] from finite differences of the joint kernel."""

    def f(x):
        z = field.copy()
        z[i, t] = x
        return lk.icar_ar1_loglik(z, phi, tau2, graph)

    x0 = field[i, t]
    d1 = (f(x0 + h) - f(x0 - h)) / (2 * h)
    d2 = (f(x0 + h) - 2 * f(x0) + f(x0 - h)) / h**2
    var = -1.0 / d2
    return x0 + d1 * var, var


def test_icar_conditional_matches_joint_in_last_slice():
    g = AdjacencyGraph(3, np.array([[0, 1], [1, 2]]))
    rng = np.random.default_rng(5)
    u = rng.standard_normal((3, 3))
    for i in range(3):
        m, v = lk.icar_conditional(i, 2, u, 0.7, 0.8, g)
        fm, fv = _fd_conditional(u, i, 2, 0.7, 0.8, g)
        assert abs(m - fm) < 1e-8 and abs(v - fv) < 1e-8


def test_icar_full_conditional_matches_joint_everywhere():
    g = build_grid_adjacency(3, 3)
    rng = np.random.default_rng(6)
    u = rng.standard_normal((9, 4))
    for t in range(4):
        mean, var = lk.icar_full_conditional(u, 0.6, 1.3, g, t)
        for i in (0, 4, 7):
            fm, fv = _fd_conditional(u, i, t, 0.6, 1.3, g)
            assert abs(mean[i] - fm) < 1e-7 and abs(var[i] - fv) < 1e-7


# -- ACS covariate layer -------------------------------------------------------


def _acs_fixture(n=3, L=7, seed=2):
    rng = np.random.default_rng(seed)
    omega = rng.uniform(20, 60, size=(1, n, L))
    est1 = np.where(rng.uniform(size=(1, n, L)) < 0.6, omega + rng.normal(0, 2, (1, n, L)), np.nan)
    est5 = np.full((1, n, L), np.nan)
    est5[:, :, 4:] = omega[:, :, 4:] + 1.0
    acs = AcsPanel(("x",), -3, est1, np.full((1, n, L), 2.0), est5, np.full((1, n, L), 1.0),
                   np.array([40.0]), np.array([10.0]))
    state = AcsState(omega, np.full((1, L), 40.0), np.full((1, n), 25.0))
    return acs, state


def test_acs_direct_summation():
    acs, state = _acs_fixture()
    tn = lambda x, m, s: stats.truncnorm.logpdf(x, (0 - m) / s, (100 - m) / s, loc=m, scale=s)
    want = 0.0
    J, n, L = state.omega.shape
    for i in range(n):
        for l in range(L):
            w = state.omega[0, i, l]
            want += tn(w, 40.0, 5.0)
            if not np.isnan(acs.est1[0, i, l]):
                want += tn(acs.est1[0, i, l], w, 2.0)
            if l >= 4:
                want += tn(acs.est5[0, i, l], state.omega[0, i, l - 4:l + 1].mean(), 1.0)
    assert lk.acs_loglik(acs, state) == pytest.approx(want, abs=1e-9)


def test_acs_examples():
    acs, state = _acs_fixture()
    assert np.allclose(lk.acs_window_means(np.full((1, 1, 6), 33.0))[..., 4:], 33.0)
    state.omega[0, 0, 0] = 100.5
    assert lk.acs_loglik(acs, state) == -math.inf


# -- priors --------------------------------------------------------------------


def test_inverse_gamma_density():
    want = 0.5 * math.log(0.5) - math.lgamma(0.5) - 1.5 * math.log(1.0) - 0.5
    assert lk.inv_gamma_logpdf(1.0) == pytest.approx(want, abs=1e-14)
    assert lk.inv_gamma_logpdf(2.0) == pytest.approx(stats.invgamma.logpdf(2.0, 0.5, scale=0.5), abs=1e-12)
    assert lk.inv_gamma_logpdf(-1.0) == -math.inf


def test_prior_phi_out_of_range():
    panel = make_panel()
    state = zero_state(panel)
    state.phi_u = 1.2
    assert lk.prior_logdensity(state) == -math.inf


def test_prior_flat_in_coefficients():
    panel = make_panel()
    state = zero_state(panel)
    base = lk.prior_logdensity(state)
    state.gamma = state.gamma + 3.0
    state.mu_k = state.mu_k - 7.0
    state.beta_mu = state.beta_mu + 0.2
    state.beta_k = [b + 1.0 for b in state.beta_k]
    assert lk.prior_logdensity(state) == base


def test_prior_nonpositive_variance():
    panel = make_panel()
    state = zero_state(panel)
    state.sigma2_v = 0.0
    assert lk.prior_logdensity(state) == -math.inf
