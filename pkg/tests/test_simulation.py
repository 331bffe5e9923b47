import math

import numpy as np
import pytest

from latentpop.core import DataError, SurveyEstimates
from latentpop.simulation import (
    MODELS, ScenarioConfig, aggregate, baseline_estimate, fit_survey_trend, replicate_seeds,
    run_replicate, score, simulate_dataset,
)

FLAT = dict(tau2_u=0.0, sigma2_v=0.0, gamma=(0.0,), tau2_k=(0.0, 0.0), sigma2_k=(0.0, 0.0))


def test_generator_is_deterministic():
    cfg = ScenarioConfig(rows=3, cols=3, n_years=4)
    a = simulate_dataset(cfg, 7)
    b = simulate_dataset(cfg, 7)
    assert np.array_equal(a[0].counts, b[0].counts)
    assert np.array_equal(a[2].N, b[2].N)
    assert np.array_equal(a[1].estimate, b[1].estimate)
    c = simulate_dataset(cfg, 8)
    assert not np.array_equal(a[2].N, c[2].N)


def test_generated_data_respect_support():
    panel, survey, truth, graph = simulate_dataset(ScenarioConfig(), 3)
    assert np.all(panel.counts <= truth.N[None])
    assert np.all(truth.N <= panel.populations)
    rate = truth.mu[None, :] * truth.lam
    assert np.all((rate > 0) & (rate < 1))
    assert panel.censor_codes is None
    assert np.allclose(truth.u.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(truth.f.mean(axis=1), 0, atol=1e-12)
    assert graph.n_regions == 36 and panel.n_years == 5
    assert len(survey) == 5


def test_degenerate_config_gives_homogeneous_rates():
    cfg = ScenarioConfig(rows=4, cols=4, pop_min=200_000, pop_max=200_000, pop_growth=0.0, **FLAT)
    reps = np.stack([simulate_dataset(cfg, s)[2].N for s in range(40)])
    _, _, truth, _ = simulate_dataset(cfg, 0)
    assert np.all(truth.lam == 1.0)
    # N ~ Binomial(P, mu_t): compare moments over cells and seeds
    P = 200_000
    for t in range(cfg.n_years):
        x = reps[:, :, t].ravel()
        m = cfg.true_mu()[t]
        assert abs(x.mean() - P * m) < 4 * math.sqrt(P * m * (1 - m) / len(x))
        assert x.var(ddof=1) == pytest.approx(P * m * (1 - m), rel=0.25)


def test_perfect_detection_reproduces_latent_counts():
    cfg = ScenarioConfig(rows=3, cols=3, mu_k_start=(-1.0, 60.0), mu_k_slope=(0.0, 0.0), beta_k=(0.0, 0.0))
    panel, _, truth, _ = simulate_dataset(cfg, 1)
    assert np.array_equal(panel.counts[1], truth.N)


def test_config_validation():
    with pytest.raises(DataError):
        ScenarioConfig(survey_years=(3,))
    with pytest.raises(DataError):
        ScenarioConfig(n_outcomes=3)
    with pytest.raises(DataError):
        ScenarioConfig(phi_u=1.0)
    with pytest.raises(DataError):
        ScenarioConfig.from_mapping({"bogus": "1"})
    assert ScenarioConfig(survey_years=(2, 4)).scenario == "sparse"
    assert ScenarioConfig().scenario == "yearly"


def test_config_round_trips_through_mapping():
    cfg = ScenarioConfig(survey_years=(2, 4), gamma=(0.1, -0.2), seed=9)
    assert ScenarioConfig.from_mapping(cfg.to_mapping()) == cfg
    assert ScenarioConfig.from_mapping({"survey_years": "{2,5,8}", "n_years": "10"}).years_surveyed == (2, 5, 8)


def test_infeasible_generator_raises():
    cfg = ScenarioConfig(beta0_mu=0.6, tau2_u=3.0, max_retries=2)
    with pytest.raises(DataError):
        simulate_dataset(cfg, 0)


def test_baseline_constant_survey():
    survey = SurveyEstimates.from_rows([(t, t, 0.05, 0.001) for t in range(1, 5)])
    P = np.array([[1000, 2000, 3000, 4000], [10, 20, 30, 40]])
    N_hat, mu_hat = baseline_estimate(survey, P)
    assert np.allclose(mu_hat, 0.05)
    assert np.allclose(N_hat, 0.05 * P)


def test_baseline_two_point_line():
    survey = SurveyEstimates.from_rows([(1, 1, 0.05, 0.002), (3, 3, 0.07, 0.002)])
    _, mu_hat = baseline_estimate(survey, np.ones((1, 3), dtype=int))
    assert mu_hat[1] == pytest.approx(0.06, abs=1e-9)


def test_baseline_matches_brute_grid_on_multi_year_rows():
    from latentpop.likelihoods import survey_loglik

    # two-year rows with a declining level
    survey = SurveyEstimates.from_rows([(1, 2, 0.061, 0.004), (2, 3, 0.058, 0.004), (3, 4, 0.052, 0.003),
                                        (4, 5, 0.050, 0.003), (5, 6, 0.047, 0.004)])
    b0, b1 = fit_survey_trend(survey)
    assert b1 < 0
    best = survey_loglik(survey, b0, b1)
    for d0 in (-1e-4, 0, 1e-4):
        for d1 in (-1e-5, 0, 1e-5):
            assert survey_loglik(survey, b0 + d0, b1 + d1) <= best + 1e-12


def test_baseline_needs_two_rows():
    with pytest.raises(DataError):
        fit_survey_trend(SurveyEstimates.from_rows([(1, 1, 0.05, 0.01)]))


def test_score_perfect_and_permutation_invariant():
    rng = np.random.default_rng(0)
    N = rng.integers(0, 500, size=(6, 4)).astype(float)
    lam = rng.lognormal(0, 0.3, size=(6, 4))
    s = score(N, lam, N, lam, N - 1, N + 1)
    assert s == {"cp_mean": 1.0, "rmse_N": 0.0, "rmse_lambda": 0.0, "rel_mae_N": 0.0}
    N_hat = N + rng.normal(0, 20, size=N.shape)
    lo, hi = N_hat - 15, N_hat + 15
    perm = rng.permutation(N.size)
    a = score(N, lam, N_hat, lam * 1.1, lo, hi)
    b = score(*(x.ravel()[perm] for x in (N, lam, N_hat, lam * 1.1, lo, hi)))
    assert a == pytest.approx(b)
    assert 0 <= a["cp_mean"] <= 1


def test_score_relative_mae_guards_zero_truth():
    s = score(np.array([0.0, 10.0, 20.0]), np.ones(3), np.array([3.0, 12.0, 20.0]), np.ones(3))
    assert s["rel_mae_N"] == pytest.approx(0.2)
    assert math.isnan(s["cp_mean"])


def test_baseline_rmse_lambda_is_dispersion_of_truth():
    lam = np.array([0.8, 1.0, 1.3])
    s = score(np.ones(3), lam, np.ones(3), np.ones(3))
    assert s["rmse_lambda"] == pytest.approx(math.sqrt(np.mean((lam - 1) ** 2)))


def test_replicate_seeds_are_deterministic_and_distinct():
    assert replicate_seeds(5, 2) == replicate_seeds(5, 2)
    seeds = {replicate_seeds(5, r) for r in range(20)}
    assert len(seeds) == 20


def test_tiny_replicate_and_aggregate():
    cfg = ScenarioConfig(rows=3, cols=3, n_years=4, iterations=40, burnin=20, n_replicates=2)
    rows = run_replicate(cfg, 0) + run_replicate(cfg, 1)
    models = {r[2] for r in rows}
    assert models == set(MODELS)
    for model in MODELS:
        assert len([r for r in rows if r[2] == model and r[3] == "rmse_N"]) == 2
    agg = aggregate(rows)
    assert [a["model"] for a in agg] == ["proposed", "baseline", "single"]
    for a in agg:
        for key, val in a.items():
            if key.startswith("proposed_wins") and val != "":
                assert 0 <= val <= 2
    prop = next(a for a in agg if a["model"] == "proposed")
    assert 0 <= prop["cp_mean_mean"] <= 1


def test_sparse_label():
    cfg = ScenarioConfig(rows=3, cols=3, n_years=4, survey_years=(2, 4), iterations=20, burnin=10)
    rows = run_replicate(cfg, 0)
    assert {r[1] for r in rows} == {"sparse"}
