import numpy as np
import pytest
from scipy.special import log_expit, logsumexp

from latentpop import likelihoods as lk
from latentpop.collapsed import CollapsedCells
from latentpop.core import SurveillancePanel


def tiny_panel(K=2, censor=False, censored_outcome=0, seed=3):
    rng = np.random.default_rng(seed)
    n, T = 3, 2
    P = rng.integers(15, 40, size=(n, T))
    N = rng.binomial(P, 0.5)
    Y = rng.binomial(N[None], np.array([0.4, 0.3][:K])[:, None, None])
    codes = None
    if censor:
        codes = np.array([[0, 1], [2, 0], [1, 2]])
        ck = censored_outcome
        Y[ck][codes == 2] = 0
        Y[ck][codes == 1] = np.maximum(Y[ck][codes == 1] - 3, 0)
    return SurveillancePanel(
        region_ids=("a", "b", "c"), years=(1, 2), populations=P,
        outcome_names=tuple(f"o{k}" for k in range(K)), counts=Y,
        censor_codes=codes, censored_outcome=censored_outcome if censor else None,
    )


def brute_force(panel, logr, eta):
    """Sum over N of the latent binomial times every outcome term."""
    n, T = panel.populations.shape
    out = np.empty((n, T))
    post = {}
    r = np.exp(logr)
    p = 1.0 / (1.0 + np.exp(-eta))
    for i in range(n):
        for t in range(T):
            Ns = np.arange(panel.populations[i, t] + 1)
            terms = lk.binomial_logpmf(Ns, panel.populations[i, t], r[i, t])
            for k in range(panel.n_outcomes):
                if panel.censor_codes is not None and k == panel.censored_outcome:
                    terms = terms + lk.censored_loglik(panel.counts[k, i, t], panel.censor_codes[i, t], Ns, p[k, i, t])
                else:
                    terms = terms + lk.binomial_logpmf(panel.counts[k, i, t], Ns, p[k, i, t])
            out[i, t] = logsumexp(terms)
            post[(i, t)] = np.exp(terms - out[i, t])
    return out, post


@pytest.mark.parametrize("K,censor,ck", [(1, False, 0), (2, False, 0), (2, True, 0), (2, True, 1), (1, True, 0)])
def test_marginal_matches_enumeration(K, censor, ck):
    panel = tiny_panel(K, censor, ck)
    rng = np.random.default_rng(1)
    logr = np.log(rng.uniform(0.2, 0.8, size=panel.populations.shape))
    eta = rng.normal(-0.5, 0.5, size=(K,) + panel.populations.shape)
    cells = CollapsedCells(panel)
    got = cells.loglik(logr, log_expit(eta), log_expit(-eta))
    want, _ = brute_force(panel, logr, eta)
    assert np.max(np.abs(got - want)) < 1e-10


def test_subset_matches_full():
    panel = tiny_panel(2, True, 0)
    cells = CollapsedCells(panel)
    rng = np.random.default_rng(2)
    logr = np.log(rng.uniform(0.2, 0.8, size=(3, 2)))
    eta = rng.normal(size=(2, 3, 2))
    full = cells.loglik(logr, log_expit(eta), log_expit(-eta))
    S = np.array([0, 2])
    sub = cells.subset(S * 2 + 1)
    got = sub.loglik(logr[S, 1], log_expit(eta[:, S, 1]), log_expit(-eta[:, S, 1]))
    assert np.allclose(got, full[S, 1], atol=1e-13)


def test_exact_draw_matches_conditional():
    panel = tiny_panel(2, True, 0)
    cells = CollapsedCells(panel)
    logr = np.full((3, 2), np.log(0.5))
    eta = np.full((2, 3, 2), -0.4)
    _, post = brute_force(panel, logr, eta)
    rng = np.random.default_rng(9)
    draws = np.stack([cells.draw_latent(rng, logr, log_expit(eta), log_expit(-eta)) for _ in range(20000)])
    for (i, t), pmf in post.items():
        emp = np.bincount(draws[:, i, t].astype(int), minlength=len(pmf)) / len(draws)
        assert 0.5 * np.abs(emp - pmf).sum() < 0.02


def test_draws_respect_bounds():
    panel = tiny_panel(2, True, 1)
    cells = CollapsedCells(panel)
    rng = np.random.default_rng(4)
    lower = panel.observed_lower_bounds()
    for _ in range(200):
        N = cells.draw_latent(rng, np.full((3, 2), -0.7), np.full((2, 3, 2), -1.0), np.full((2, 3, 2), -0.4))
        assert np.all(N >= lower) and np.all(N <= panel.populations)


def test_more_than_two_outcomes_rejected():
    rng = np.random.default_rng(0)
    P = np.full((2, 2), 50)
    panel = SurveillancePanel(("a", "b"), (1, 2), P, ("x", "y", "z"), rng.binomial(10, 0.3, size=(3, 2, 2)))
    with pytest.raises(ValueError):
        CollapsedCells(panel)
