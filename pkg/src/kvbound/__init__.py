"""Streaming attention estimators, JL projections and adversarial instances."""

from .attention import (
    DomainError, KvCache, SlidingWindowSpec, SoftmaxDist, TokenTriple, attention_as_expectation,
    exact_attention, sliding_window_attention_exact, softmax,
)
from .covering import covering_bound, greedy_cluster
from .instances import HardInstance, decode, read_instance, thresholds, write_instance
from .jl import JlProjector, dim_for, verify_pairwise
from .sampling import Reservoir, ScalarStreamState, gumbel_max_sample, lazy_gumbel_sample
from .window import WindowState, boost_config, boosted_estimate, window_process, window_sample

__version__ = "0.1.0"
