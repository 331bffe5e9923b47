"""Data containers, latent state and the shared link functions.

Index conventions used throughout the package:

* regions ``i`` and surveillance years are dense 0-based array positions;
  the *year index* ``t`` used in the statewide trend is 1-based, so array
  column ``j`` corresponds to ``t = j + 1``.
* survey rows carry year indices on the same 1-based scale and may be
  zero or negative (years before the first surveillance year).
* outcome ``k`` is the position in ``SurveillancePanel.outcome_names``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit

# Censoring codes attached to the censored (treatment) outcome.
OBSERVED = 0
MINOR_SUPPRESSED = 1
BOTH_SUPPRESSED = 2
SUPPRESSION_WIDTH = 9  # suppressed cells hold 1..9


class DataError(ValueError):
    """Invalid or inconsistent model input."""


def logit(p):
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise DataError("logit is only defined on the open interval (0, 1)")
    out = np.log(p) - np.log1p(-p)
    return out.item() if out.ndim == 0 else out


def inv_logit(x):
    out = expit(np.asarray(x, dtype=float))
    return out.item() if out.ndim == 0 else out


def statewide_mean(beta0: float, beta1: float, t):
    """Linear statewide prevalence ``beta0 + beta1 * t``.

    No range check; callers that need a proportion must test it.
    """
    return beta0 + beta1 * np.asarray(t, dtype=float)


def survey_time_coefficient(a, b):
    """Average of the integers ``a..b``: ``(b^2 + b - a^2 + a) / (2 (b - a + 1))``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return (b * b + b - a * a + a) / (2.0 * (b - a + 1.0))


@dataclass(frozen=True)
class SurveyEstimates:
    """Statewide multi-year prevalence estimates ``S_{a:b}`` with standard errors."""

    a: np.ndarray
    b: np.ndarray
    estimate: np.ndarray
    se: np.ndarray

    def __post_init__(self):
        arrs = [np.atleast_1d(np.asarray(x)) for x in (self.a, self.b, self.estimate, self.se)]
        a, b = (x.astype(np.int64) for x in arrs[:2])
        est, se = (x.astype(float) for x in arrs[2:])
        if not (len(a) == len(b) == len(est) == len(se)):
            raise DataError("survey columns differ in length")
        if np.any(a > b):
            raise DataError("survey row with a > b")
        if np.any(se <= 0):
            raise DataError("survey standard errors must be positive")
        if np.any((est <= 0) | (est >= 1)):
            raise DataError("survey estimates must lie in (0, 1)")
        for name, val in zip(("a", "b", "estimate", "se"), (a, b, est, se)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @classmethod
    def from_rows(cls, rows: Sequence[tuple[int, int, float, float]]) -> "SurveyEstimates":
        rows = list(rows)
        if not rows:
            raise DataError("no survey rows")
        a, b, s, se = zip(*rows)
        return cls(np.array(a), np.array(b), np.array(s), np.array(se))

    def __len__(self):
        return len(self.a)

    @property
    def time_coefficient(self) -> np.ndarray:
        return survey_time_coefficient(self.a, self.b)

    def check_identifiable(self):
        if len(set(self.time_coefficient.tolist())) < 2:
            raise DataError(
                "survey rows must cover at least two distinct time spans to identify the linear trend"
            )

    def pooled_estimate(self) -> float:
        w = 1.0 / self.se**2
        return float(np.sum(w * self.estimate) / np.sum(w))


@dataclass
class AcsPanel:
    """Latent-covariate layer for variables known only through 1- and 5-year estimates.

    Arrays are ``(J, n, L)`` over latent years; latent column ``l`` is year
    index ``t_start + l``. Missing estimates are NaN. ``center`` and
    ``scale`` standardize the latent values into design-matrix columns.
    """

    names: tuple[str, ...]
    t_start: int
    est1: np.ndarray
    se1: np.ndarray
    est5: np.ndarray
    se5: np.ndarray
    center: np.ndarray
    scale: np.ndarray

    @property
    def n_latent_years(self) -> int:
        return self.est1.shape[2]

    def validate(self, n_years: int):
        J, n, L = self.est1.shape
        if self.t_start + L - 1 != n_years:
            raise DataError("ACS latent years must end at the last surveillance year")
        if self.t_start > 1:
            raise DataError("ACS latent years must cover every surveillance year")
        for est, se, lab in ((self.est1, self.se1, "1-year"), (self.est5, self.se5, "5-year")):
            obs = ~np.isnan(est)
            if np.any(np.isnan(se[obs])) or np.any(se[obs] <= 0):
                raise DataError(f"ACS {lab} standard errors must be positive")
            if np.any((est[obs] <= 0) | (est[obs] >= 100)):
                raise DataError(f"ACS {lab} estimates must lie in (0, 100)")
        if np.any(~np.isnan(self.est5[:, :, :4])):
            raise DataError("5-year ACS estimates need four earlier latent years")
        if np.any(self.scale <= 0):
            raise DataError("ACS standardization scale must be positive")


@dataclass
class SurveillancePanel:
    """County-by-year surveillance counts and design matrices.

    ``counts[k]`` holds the stored count for outcome ``k``. For the censored
    outcome the stored value follows the censoring code: the full total when
    the code is 0, the adult count when it is 1, and 0 when it is 2.
    """

    region_ids: tuple[str, ...]
    years: tuple[int, ...]
    populations: np.ndarray
    outcome_names: tuple[str, ...]
    counts: np.ndarray
    censor_codes: np.ndarray | None = None
    censored_outcome: int | None = None
    X: tuple[np.ndarray, ...] = ()
    x_names: tuple[tuple[str, ...], ...] = ()
    W: np.ndarray | None = None
    w_mask: np.ndarray | None = None
    w_names: tuple[str, ...] = ()
    acs: AcsPanel | None = None

    def __post_init__(self):
        self.populations = np.asarray(self.populations, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        n, T = self.populations.shape
        K = self.counts.shape[0]
        if not self.X:
            self.X = tuple(np.zeros((n, T, 0)) for _ in range(K))
        self.X = tuple(np.asarray(x, dtype=float) for x in self.X)
        if not self.x_names:
            self.x_names = tuple(tuple(f"x{k}_{j}" for j in range(x.shape[2])) for k, x in enumerate(self.X))
        if self.W is None:
            self.W = np.zeros((n, T, 0))
        self.W = np.asarray(self.W, dtype=float)
        if self.w_mask is None:
            self.w_mask = np.ones((T, self.W.shape[2]), dtype=bool)
        self.w_mask = np.asarray(self.w_mask, dtype=bool)
        if not self.w_names:
            self.w_names = tuple(f"w{j}" for j in range(self.W.shape[2]))
        if self.censor_codes is not None:
            self.censor_codes = np.asarray(self.censor_codes, dtype=np.int64)
            if self.censored_outcome is None:
                self.censored_outcome = 0
        self.validate()

    @property
    def n_regions(self) -> int:
        return self.populations.shape[0]

    @property
    def n_years(self) -> int:
        return self.populations.shape[1]

    @property
    def n_outcomes(self) -> int:
        return self.counts.shape[0]

    @property
    def n_risk_covariates(self) -> int:
        """Width of the full risk design: known columns then latent ACS columns."""
        return self.W.shape[2] + (len(self.acs.names) if self.acs is not None else 0)

    @property
    def time_index(self) -> np.ndarray:
        return np.arange(1, self.n_years + 1, dtype=float)

    def validate(self):
        n, T = self.populations.shape
        K = self.n_outcomes
        if len(self.region_ids) != n or len(self.years) != T:
            raise DataError("region/year labels do not match array shapes")
        if self.counts.shape != (K, n, T):
            raise DataError(f"counts must have shape {(K, n, T)}")
        if np.any(self.populations <= 0):
            raise DataError("populations must be positive")
        if np.any(self.counts < 0):
            raise DataError("counts must be non-negative")
        if np.any(self.counts > self.populations[None]):
            k, i, t = np.argwhere(self.counts > self.populations[None])[0]
            raise DataError(
                f"count exceeds population for outcome {self.outcome_names[k]!r}, "
                f"region {self.region_ids[i]!r}, year {self.years[t]}"
            )
        if len(self.X) != K or any(x.shape[:2] != (n, T) for x in self.X):
            raise DataError("detection design matrices must be (n, T, q) per outcome")
        if any(np.isnan(x).any() for x in self.X):
            raise DataError("detection design matrices contain missing values")
        if self.W.shape[:2] != (n, T) or self.w_mask.shape != (T, self.W.shape[2]):
            raise DataError("risk design matrix / mask shape mismatch")
        active = np.broadcast_to(self.w_mask[None], self.W.shape)
        if np.isnan(self.W[active]).any():
            raise DataError("risk design matrix has missing values in active columns")
        if self.censor_codes is not None:
            if self.censor_codes.shape != (n, T):
                raise DataError("censor codes must be (n, T)")
            if not np.isin(self.censor_codes, (0, 1, 2)).all():
                raise DataError("censor codes must be 0, 1 or 2")
            if not 0 <= self.censored_outcome < K:
                raise DataError("censored outcome index out of range")
            stored = self.counts[self.censored_outcome]
            if np.any(stored[self.censor_codes == BOTH_SUPPRESSED] != 0):
                raise DataError("fully suppressed cells must store a zero count")
        if self.acs is not None:
            self.acs.validate(T)
            if self.acs.est1.shape[1] != n:
                raise DataError("ACS arrays have the wrong number of regions")

    def observed_lower_bounds(self) -> np.ndarray:
        """Smallest latent count compatible with every observed outcome, ``(n, T)``."""
        lower = self.counts.max(axis=0)
        if self.censor_codes is not None:
            k = self.censored_outcome
            others = np.delete(self.counts, k, axis=0)
            base = others.max(axis=0) if len(others) else np.zeros_like(lower)
            stored = self.counts[k]
            treat_lo = np.where(
                self.censor_codes == OBSERVED,
                stored,
                np.where(self.censor_codes == MINOR_SUPPRESSED, stored + 1, 2),
            )
            lower = np.maximum(base, treat_lo)
        return lower

    def select_outcomes(self, keep: Sequence[int]) -> "SurveillancePanel":
        """Panel restricted to the given outcomes (censoring dropped if its outcome is dropped)."""
        keep = list(keep)
        cens = None
        cens_k = None
        if self.censor_codes is not None and self.censored_outcome in keep:
            cens = self.censor_codes
            cens_k = keep.index(self.censored_outcome)
        return replace(
            self,
            outcome_names=tuple(self.outcome_names[k] for k in keep),
            counts=self.counts[keep],
            censor_codes=cens,
            censored_outcome=cens_k,
            X=tuple(self.X[k] for k in keep),
            x_names=tuple(self.x_names[k] for k in keep),
        )


@dataclass
class AcsState:
    omega: np.ndarray  # (J, n, L) latent percentages
    omega_bar: np.ndarray  # (J, L) statewide means
    tau2: np.ndarray  # (J, n) per-county process variances


@dataclass
class ModelState:
    """One full MCMC state."""

    N: np.ndarray  # (n, T) latent counts
    u: np.ndarray  # (n, T) spatio-temporal risk effect
    v: np.ndarray  # (n, T) iid risk effect
    f: np.ndarray  # (K, n, T) detection fields
    eps: np.ndarray  # (K, n, T) iid detection effects
    beta_mu: np.ndarray  # (2,) statewide trend intercept and slope
    gamma: np.ndarray  # (p,)
    mu_k: np.ndarray  # (K, T) detection intercepts
    beta_k: list[np.ndarray]
    sigma2_k: np.ndarray  # (K,)
    tau2_k: np.ndarray  # (K,)
    phi_k: np.ndarray  # (K,)
    tau2_u: float = 1.0
    phi_u: float = 0.5
    sigma2_v: float = 1.0
    acs: AcsState | None = None

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)


def risk_design(panel: SurveillancePanel, state: ModelState | None = None) -> np.ndarray:
    """Full ``(n, T, p)`` risk design with inactive entries zeroed.

    Latent ACS columns are standardized latent values from ``state``.
    """
    W = np.where(panel.w_mask[None], panel.W, 0.0)
    if panel.acs is None:
        return W
    if state is None or state.acs is None:
        raise DataError("panel has latent ACS covariates; a state is required")
    acs = panel.acs
    off = 1 - acs.t_start
    lat = state.acs.omega[:, :, off:off + panel.n_years]
    cols = (lat - acs.center[:, None, None]) / acs.scale[:, None, None]
    return np.concatenate([W, np.moveaxis(cols, 0, 2)], axis=2)


def statewide_means(panel: SurveillancePanel, state: ModelState) -> np.ndarray:
    """``mu_t`` for each surveillance year, shape ``(T,)``."""
    return statewide_mean(state.beta_mu[0], state.beta_mu[1], panel.time_index)


def log_relative_risk(panel: SurveillancePanel, state: ModelState, design: np.ndarray | None = None) -> np.ndarray:
    if design is None:
        design = risk_design(panel, state)
    return design @ state.gamma + state.u + state.v


def relative_risk(state: ModelState, i: int, t: int, panel: SurveillancePanel) -> float:
    """``lambda_it = exp(W_it gamma + u_it + v_it)`` for array position ``(i, t)``."""
    design = risk_design(panel, state)
    return float(np.exp(design[i, t] @ state.gamma + state.u[i, t] + state.v[i, t]))


def detection_logits(panel: SurveillancePanel, state: ModelState) -> np.ndarray:
    """``(K, n, T)`` linear predictors of the detection probabilities."""
    out = state.f + state.eps + state.mu_k[:, None, :]
    for k, x in enumerate(panel.X):
        if x.shape[2]:
            out[k] += x @ state.beta_k[k]
    return out


def detection_prob(state: ModelState, i: int, t: int, k: int, panel: SurveillancePanel) -> float:
    eta = state.mu_k[k, t] + state.f[k, i, t] + state.eps[k, i, t]
    x = panel.X[k]
    if x.shape[2]:
        eta += x[i, t] @ state.beta_k[k]
    return float(expit(eta))


@dataclass
class PosteriorSummary:
    """Per-quantity posterior summaries over pooled retained draws."""

    names: list[str]
    mean: np.ndarray
    sd: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    ess: np.ndarray
    n_draws: int
    level: float = 0.95
    index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.index:
            self.index = {name: k for k, name in enumerate(self.names)}

    def __getitem__(self, name: str) -> dict[str, float]:
        k = self.index[name]
        return {
            "mean": float(self.mean[k]),
            "sd": float(self.sd[k]),
            "lower": float(self.lower[k]),
            "upper": float(self.upper[k]),
            "ess": float(self.ess[k]),
        }

    def column(self, names: Sequence[str], stat: str = "mean") -> np.ndarray:
        arr = getattr(self, stat)
        return np.array([arr[self.index[nm]] for nm in names])
