import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from latentpop.core import (
    DataError,
    SurveillancePanel,
    SurveyEstimates,
    detection_prob,
    inv_logit,
    logit,
    relative_risk,
    statewide_mean,
    survey_time_coefficient,
)
from latentpop.sampler import summarize_draws

from conftest import make_panel, zero_state


def test_logit_basics():
    assert logit(0.5) == 0.0
    assert inv_logit(0.0) == 0.5
    assert abs(inv_logit(logit(0.003)) - 0.003) < 1e-12


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1])
def test_logit_domain(p):
    with pytest.raises(DataError):
        logit(p)


@given(st.floats(1e-9, 1 - 1e-9))
def test_logit_roundtrip(p):
    assert abs(inv_logit(logit(p)) - p) < 1e-12


def test_detection_prob_examples(small_panel):
    panel = make_panel(with_x=False)
    state = zero_state(panel)
    assert detection_prob(state, 0, 0, 0, panel) == 0.5
    state.mu_k[0, 0] = -6.0
    assert math.isclose(detection_prob(state, 0, 0, 0, panel), 1 / (1 + math.exp(6)), rel_tol=1e-12)
    assert abs(detection_prob(state, 0, 0, 0, panel) - 0.00247) < 1e-5


def test_detection_prob_with_covariate():
    panel = make_panel()
    state = zero_state(panel)
    state.mu_k[1, 2] = -6.0
    x = panel.X[1][3, 2, 0]
    state.beta_k[1][0] = 0.5 / x
    assert math.isclose(detection_prob(state, 3, 2, 1, panel), inv_logit(-5.5), rel_tol=1e-12)


def test_relative_risk_examples():
    panel = make_panel(with_w=False)
    state = zero_state(panel)
    assert relative_risk(state, 0, 0, panel) == 1.0
    state.u[1, 1] = math.log(2.0)
    assert math.isclose(relative_risk(state, 1, 1, panel), 2.0)


def test_relative_risk_cancellation():
    panel = make_panel()
    state = zero_state(panel)
    w = panel.W[2, 0, 0]
    state.gamma[0] = -0.1 / w
    state.u[2, 0] = 0.05
    state.v[2, 0] = 0.05
    assert math.isclose(relative_risk(state, 2, 0, panel), 1.0, abs_tol=1e-12)


def test_inactive_covariate_contributes_zero():
    panel = make_panel()
    panel.w_mask[:2, 1] = False
    panel.W[:, :2, 1] = np.nan
    panel.validate()
    state = zero_state(panel)
    state.gamma[:] = [0.0, 3.0]
    assert relative_risk(state, 0, 0, panel) == 1.0
    assert relative_risk(state, 0, 2, panel) == pytest.approx(math.exp(3.0 * panel.W[0, 2, 1]))


def test_statewide_mean():
    assert math.isclose(statewide_mean(0.0535, -0.0006, 1), 0.0529)
    assert statewide_mean(0.07, 0.0, 17) == 0.07
    assert math.isclose(statewide_mean(0.05, 0.001, 10), 0.06)


def test_survey_time_coefficient():
    assert survey_time_coefficient(-3, 0) == -1.5
    assert survey_time_coefficient(4, 4) == 4.0


def test_survey_requires_two_spans():
    s = SurveyEstimates.from_rows([(1, 1, 0.05, 0.01), (1, 1, 0.06, 0.01)])
    with pytest.raises(DataError, match="two distinct"):
        s.check_identifiable()
    SurveyEstimates.from_rows([(-3, 0, 0.05, 0.0025), (1, 1, 0.05, 0.0025)]).check_identifiable()


@pytest.mark.parametrize("row", [(2, 1, 0.05, 0.01), (1, 1, 0.05, 0.0), (1, 1, 1.2, 0.01)])
def test_survey_row_validation(row):
    with pytest.raises(DataError):
        SurveyEstimates.from_rows([row])


def test_count_above_population_rejected():
    panel = make_panel()
    counts = panel.counts.copy()
    counts[1, 2, 0] = panel.populations[2, 0] + 1
    with pytest.raises(DataError, match="region 'r2'"):
        SurveillancePanel(panel.region_ids, panel.years, panel.populations, panel.outcome_names, counts)


def test_bad_censor_code_rejected():
    panel = make_panel()
    codes = np.zeros(panel.populations.shape, dtype=int)
    codes[0, 0] = 3
    with pytest.raises(DataError, match="censor codes"):
        SurveillancePanel(panel.region_ids, panel.years, panel.populations, panel.outcome_names,
                          panel.counts, censor_codes=codes)


def test_lower_bounds_with_censoring():
    panel = make_panel(censor=True)
    lb = panel.observed_lower_bounds()
    assert lb[0, 0] == max(2, panel.counts[1, 0, 0])
    assert lb[1, 1] == max(panel.counts[0, 1, 1] + 1, panel.counts[1, 1, 1])
    assert lb[2, 2] == panel.counts[:, 2, 2].max()


def test_select_outcomes_drops_censoring():
    panel = make_panel(censor=True)
    single = panel.select_outcomes([1])
    assert single.n_outcomes == 1
    assert single.censor_codes is None
    assert np.array_equal(single.counts[0], panel.counts[1])


def test_summary_constant_draws():
    draws = np.full((50, 1), 3.25)
    s = summarize_draws(["c"], [draws])
    assert s["c"]["mean"] == 3.25 and s["c"]["sd"] == 0.0
    assert s["c"]["lower"] == s["c"]["upper"] == 3.25


def test_summary_quantile_rule():
    draws = np.arange(1, 101, dtype=float)[:, None]
    s = summarize_draws(["x"], [draws])
    # numpy's default (linear) rule: 1 + 0.025 * 99 and 1 + 0.975 * 99
    assert s["x"]["lower"] == pytest.approx(3.475)
    assert s["x"]["upper"] == pytest.approx(97.525)
    assert s["x"]["lower"] <= s["x"]["upper"]


def test_summary_two_identical_chains():
    rng = np.random.default_rng(1)
    d = rng.standard_normal((200, 3))
    one = summarize_draws(list("abc"), [d])
    two = summarize_draws(list("abc"), [d, d])
    for stat in ("mean", "lower", "upper"):
        assert np.allclose(getattr(one, stat), getattr(two, stat))


def test_summary_needs_draws():
    with pytest.raises(ValueError):
        summarize_draws(["a"], [np.zeros((1, 1))])
