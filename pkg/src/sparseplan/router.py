"""Noise-enhanced gating, top-k expert selection, and output mixing.

Gate logits are g(x) = x W_gate + eta * (softplus(x W_noise) + eps) with
eta ~ N(0,1) drawn per (example, expert) during training and zero at
evaluation.  Selection follows the literal order softmax-then-TopK: the
routing scores are the k largest softmax probabilities themselves, so
they sum to less than one for k < N (an optional renormalize flag is
provided for ablation).  Ties always break toward the lowest expert
index, and the mixture only ever evaluates the selected experts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GateParams:
    W_gate: np.ndarray      # (d, N)
    W_noise: np.ndarray     # (d, N)
    eps_noise: float

    def __post_init__(self):
        if self.W_gate.shape != self.W_noise.shape:
            raise ValueError("gate and noise matrices must share a shape")
        if self.eps_noise <= 0.0:
            raise ValueError("eps_noise must be positive")

    @property
    def n_experts(self) -> int:
        return self.W_gate.shape[1]


@dataclass
class RoutingDecision:
    logits: np.ndarray      # (N,)
    probs: np.ndarray       # (N,), sums to 1
    selected: np.ndarray    # (k,) expert ids, descending score, ties -> lowest id
    scores: np.ndarray      # (k,) the kept softmax probabilities

    @property
    def k(self) -> int:
        return self.selected.shape[0]


@dataclass
class LoadStats:
    f: np.ndarray           # fraction of (example, slot) assignments per expert
    P: np.ndarray           # mean routing probability per expert


def pool_for_routing(ego) -> np.ndarray:
    """Scene-level routing vector: mean of the ego query over the
    sequence axis.  Accepts an EgoQuery or a (B, L, d) array."""
    seq = getattr(ego, "seq", ego)
    return np.asarray(seq, dtype=np.float64).mean(axis=1)


def _softplus(u):
    return np.logaddexp(0.0, u)


def gate_forward(x: np.ndarray, params: GateParams, mode: str,
                 rng=None, eta: np.ndarray | None = None):
    """Compute gate logits; returns (logits, cache).

    In train mode the noise draw eta may be passed explicitly (the
    training loop derives it from a counter-based stream so the same
    batch always sees the same noise); otherwise it is drawn from rng.
    Eval mode is noise-free and deterministic.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    x = np.asarray(x, dtype=np.float64)
    clean = x @ params.W_gate
    if mode == "eval":
        return clean, (x, params, None, None, None)
    if eta is None:
        if rng is None:
            raise ValueError("train mode needs rng or an explicit eta")
        eta = rng.normal(clean.shape)
    u = x @ params.W_noise
    scale = _softplus(u) + params.eps_noise
    return clean + eta * scale, (x, params, eta, u, scale)


def gate_backward(cache, d_logits):
    """Returns (d_x, dW_gate, dW_noise); eta is a constant per sample."""
    x, params, eta, u, _ = cache
    dW_gate = x.T @ d_logits
    d_x = d_logits @ params.W_gate.T
    if eta is None:
        return d_x, dW_gate, np.zeros_like(params.W_noise)
    du = d_logits * eta / (1.0 + np.exp(-u))     # softplus' = sigmoid
    dW_noise = x.T @ du
    d_x = d_x + du @ params.W_noise.T
    return d_x, dW_gate, dW_noise


def gate_logits(x, params: GateParams, mode: str, rng=None) -> np.ndarray:
    """Public one-shot form of gate_forward."""
    logits, _ = gate_forward(x, params, mode, rng=rng)
    return logits


def _softmax_rows(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def route_topk(logits: np.ndarray, k: int,
               renormalize: bool = False) -> list[RoutingDecision]:
    """Softmax over all N experts first, then keep the k largest
    probabilities as the routing scores.  Returns one decision per row."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    B, N = logits.shape
    if not 1 <= k <= N:
        raise ValueError(f"k must be in [1, {N}], got {k}")
    probs = _softmax_rows(logits)
    order = np.argsort(-probs, axis=-1, kind="stable")
    selected = order[:, :k]
    scores = np.take_along_axis(probs, selected, axis=-1)
    if renormalize:
        scores = scores / scores.sum(axis=-1, keepdims=True)
    return [
        RoutingDecision(logits=logits[b], probs=probs[b],
                        selected=selected[b], scores=scores[b])
        for b in range(B)
    ]


def route_backward(probs: np.ndarray, selected: np.ndarray,
                   d_scores: np.ndarray, d_probs: np.ndarray | None = None,
                   renormalize: bool = False) -> np.ndarray:
    """Gradient w.r.t. logits, treating the selected index set as constant.

    probs (B, N); selected/d_scores (B, k); d_probs optionally carries
    additional gradient on the full probability vector (the switch loss).
    """
    B, N = probs.shape
    dp = np.zeros((B, N)) if d_probs is None else d_probs.copy()
    kept = np.take_along_axis(probs, selected, axis=-1)
    if renormalize:
        total = kept.sum(axis=-1, keepdims=True)
        scores = kept / total
        d_kept = d_scores / total - (d_scores * scores).sum(axis=-1, keepdims=True) / total
    else:
        d_kept = d_scores
    np.put_along_axis(dp, selected, np.take_along_axis(dp, selected, axis=-1) + d_kept,
                      axis=-1)
    inner = (dp * probs).sum(axis=-1, keepdims=True)
    return probs * (dp - inner)


def mix_experts(decision: RoutingDecision, outputs: list) -> np.ndarray:
    """Routing-weighted sum of the selected experts' outputs.

    outputs must line up with decision.selected, in order; experts outside
    the selection are never evaluated, so nothing is masked here.
    """
    if len(outputs) != decision.k:
        raise ValueError(
            f"expected {decision.k} expert outputs, got {len(outputs)}"
        )
    mixed = decision.scores[0] * outputs[0]
    for s, out in zip(decision.scores[1:], outputs[1:]):
        mixed = mixed + s * out
    return mixed


def utilization_stats(decisions: list[RoutingDecision]) -> LoadStats:
    """Per-expert load fraction f and mean routing probability P."""
    if not decisions:
        raise ValueError("need at least one routing decision")
    k = decisions[0].k
    N = decisions[0].probs.shape[0]
    counts = np.zeros(N)
    prob_sum = np.zeros(N)
    for dec in decisions:
        if dec.k != k:
            raise ValueError("decisions must share one k")
        counts[dec.selected] += 1.0
        prob_sum += dec.probs
    return LoadStats(f=counts / (len(decisions) * k), P=prob_sum / len(decisions))
