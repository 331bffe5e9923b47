"""Latent population abundance from partially detecting surveillance counts."""

from .core import (
    AcsPanel,
    DataError,
    ModelState,
    PosteriorSummary,
    SurveillancePanel,
    SurveyEstimates,
    detection_prob,
    inv_logit,
    logit,
    relative_risk,
    statewide_mean,
)
from .graph import AdjacencyGraph, GraphError, build_grid_adjacency, load_adjacency
from .sampler import ChainOutput, SamplerConfig, run_chain, run_chains, summarize

__version__ = "0.1.0"
