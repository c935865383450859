"""Desk-scale sparse-expert driving planner.

Entropy-regularized BEV channel selection, a bank of eight sparse-attention
experts with noisy top-k routing, a load-balanced training loop over
synthetic scenarios, and a FLOP-instrumented attention benchmark.
"""

__version__ = "0.1.0"

from .rng import RandomStream, seeded_stream
from .flops import FlopCount, FlopTrace, OpRecord, flop_ledger
from .gradcheck import GradReport, check_gradient, directional_check
from .attention import (
    AttentionInputs,
    AttentionPattern,
    MHCAProjections,
    analytic_flops,
    dense_reference,
    pattern_support,
    sparse_mhca,
    support_sizes,
)
