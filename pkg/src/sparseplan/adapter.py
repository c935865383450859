"""Perception adapter: task scoring, entropy-regularized soft channel
selection, feature alignment, stub task heads, and ego-query assembly.

The channel selector solves

    maximize  s . lam + eps * Omega(lam)   s.t.  sum(lam) = tau

with Omega the elementwise binary entropy
-sum(lam ln lam + (1-lam) ln(1-lam)).  The KKT conditions give
lam_c = sigmoid((s_c + mu) / eps) with a scalar dual mu fixed by the mass
constraint, which a bisection find to |sum(lam) - tau| <= 1e-10.  The
selector is differentiable: by the implicit-function theorem

    d lam / d s = (1/eps) * (diag(g) - g g^T / sum(g)),   g = lam * (1 - lam)

which downstream training uses as the analytic backward path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionPattern, MHCAProjections, mhca_backward, mhca_forward
from .layers import linear_backward, linear_forward, tanh_backward, tanh_forward

_SOLVER_TOL = 1e-10
_SOLVER_MAX_ITERS = 200
_VAR_EPS = 1e-12


@dataclass
class FrameAgnosticBEV:
    """Standardized, temporally pooled feature grid (d x H x W).

    zero_variance flags channels that skipped a variance division at
    either standardization stage (they pass through zero-centered).
    """

    grid: np.ndarray
    zero_variance: np.ndarray


@dataclass(frozen=True)
class SelectionProblem:
    s: np.ndarray
    tau: float
    eps_entropy: float
    w: np.ndarray | None = None

    def __post_init__(self):
        d = self.s.shape[0]
        if not 0.0 < self.tau < d:
            raise ValueError(f"tau must lie strictly inside (0, {d})")
        if self.eps_entropy <= 0.0:
            raise ValueError("eps_entropy must be positive")
        if not np.all(np.isfinite(self.s)):
            raise ValueError("scores must be finite")


@dataclass
class SelectionWeights:
    lam: np.ndarray
    dual_mu: float


def _stable_sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def pool_bev(bev_seq: np.ndarray) -> FrameAgnosticBEV:
    """Standardize per channel over (T, H, W), average over T, then
    re-standardize over the spatial grid so each channel is exactly
    zero-mean unit-variance across positions.

    Channels with zero variance at either stage are centered but not
    scaled, and flagged in the diagnostics mask.
    """
    bev_seq = np.asarray(bev_seq, dtype=np.float64)
    if bev_seq.ndim != 4 or bev_seq.shape[0] < 1:
        raise ValueError("bev_seq must be (T, d, H, W) with T >= 1")
    mu = bev_seq.mean(axis=(0, 2, 3), keepdims=True)
    sd = bev_seq.std(axis=(0, 2, 3), keepdims=True)
    flat1 = sd[0, :, 0, 0] < _VAR_EPS
    scale = np.where(sd < _VAR_EPS, 1.0, sd)
    pooled = ((bev_seq - mu) / scale).mean(axis=0)

    mu2 = pooled.mean(axis=(1, 2), keepdims=True)
    sd2 = pooled.std(axis=(1, 2), keepdims=True)
    flat2 = sd2[:, 0, 0] < _VAR_EPS
    scale2 = np.where(sd2 < _VAR_EPS, 1.0, sd2)
    grid = (pooled - mu2) / scale2
    return FrameAgnosticBEV(grid=grid, zero_variance=flat1 | flat2)


def task_score(bev_tilde, w: np.ndarray) -> np.ndarray:
    """Per-channel task score: s_c = w_c * mean_{i,j} grid[c, i, j]."""
    grid = bev_tilde.grid if isinstance(bev_tilde, FrameAgnosticBEV) else bev_tilde
    grid = np.asarray(grid, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if grid.shape[0] != w.shape[0]:
        raise ValueError("weight length must equal the channel count")
    return w * grid.mean(axis=(1, 2))


def soft_topk(problem: SelectionProblem) -> SelectionWeights:
    """Solve the entropy-regularized selection problem.

    Bisection runs on the dual mu over an exact bracket derived from the
    score range; the monotone constraint function sum(sigmoid((s+mu)/eps))
    guarantees convergence for any finite scores.
    """
    s = np.asarray(problem.s, dtype=np.float64)
    tau, eps = float(problem.tau), float(problem.eps_entropy)
    d = s.shape[0]

    # exact bracket from the score range, widened by one sigmoid unit so
    # the endpoints stay strict under floating point
    pivot = eps * (np.log(tau / d) - np.log(1.0 - tau / d))
    lo = pivot - s.max() - eps
    hi = pivot - s.min() + eps

    def mass(mu):
        return _stable_sigmoid((s + mu) / eps).sum()

    if not (mass(lo) <= tau <= mass(hi)):  # cannot happen for finite s
        raise ValueError("soft_topk bisection failed to bracket the dual")

    mu = 0.5 * (lo + hi)
    for _ in range(_SOLVER_MAX_ITERS):
        g = mass(mu)
        if abs(g - tau) <= _SOLVER_TOL:
            break
        if g < tau:
            lo = mu
        else:
            hi = mu
        mu = 0.5 * (lo + hi)

    # Newton polish to machine precision: without it the residual dual
    # error shows up as noise when the Jacobian is finite-difference
    # checked at small eps.
    for _ in range(4):
        lam = _stable_sigmoid((s + mu) / eps)
        slope = (lam * (1.0 - lam)).sum() / eps
        if slope <= 0.0:
            break
        step = (lam.sum() - tau) / slope
        mu -= step
        if abs(step) <= 1e-17 * max(1.0, abs(mu)):
            break
    return SelectionWeights(lam=_stable_sigmoid((s + mu) / eps), dual_mu=float(mu))


def soft_topk_jacobian(weights: SelectionWeights, eps_entropy: float) -> np.ndarray:
    """d lam / d s via the implicit-function formula (see module docstring)."""
    g = weights.lam * (1.0 - weights.lam)
    total = g.sum()
    if total <= 0.0:  # fully saturated selection: locally flat
        return np.zeros((g.size, g.size))
    return (np.diag(g) - np.outer(g, g) / total) / eps_entropy


def soft_topk_vjp(weights: SelectionWeights, eps_entropy: float,
                  d_lam: np.ndarray) -> np.ndarray:
    """Backward: gradient w.r.t. scores given a gradient w.r.t. lam.

    The Jacobian is symmetric, so the VJP reuses the same formula without
    materializing the d x d matrix.
    """
    g = weights.lam * (1.0 - weights.lam)
    total = g.sum()
    if total <= 0.0:
        return np.zeros_like(d_lam)
    return (g * d_lam - g * (g @ d_lam) / total) / eps_entropy


def align_forward(bev: np.ndarray, lam: np.ndarray, mlp: dict):
    """Calibrate features: out = MLP(bev * lam) + bev.

    bev is (..., d, H, W) with lam broadcast over every non-channel axis;
    the MLP (two layers, tanh, hidden width d) acts on the channel vector
    at each position.  The untouched residual keeps a gradient shortcut.
    """
    bev = np.asarray(bev, dtype=np.float64)
    d = lam.shape[0]
    if bev.shape[-3] != d:
        raise ValueError("lambda length must equal the channel count")
    x = np.moveaxis(bev, -3, -1)                    # (..., H, W, d)
    z = x * lam
    h_pre, lin1 = linear_forward(z, mlp["W1"], mlp["b1"])
    h, tcache = tanh_forward(h_pre)
    y, lin2 = linear_forward(h, mlp["W2"], mlp["b2"])
    out = np.moveaxis(y + x, -1, -3)
    cache = (x, lam, lin1, tcache, lin2)
    return out, cache


def align_backward(cache, d_out):
    """Returns (d_lam, d_mlp); the BEV input is data, not a parameter."""
    x, lam, lin1, tcache, lin2 = cache
    dy = np.moveaxis(d_out, -3, -1)
    dh, dW2, db2 = linear_backward(lin2, dy)
    dh_pre = tanh_backward(tcache, dh)
    dz, dW1, db1 = linear_backward(lin1, dh_pre)
    d_lam = (dz * x).reshape(-1, lam.shape[0]).sum(axis=0)
    return d_lam, {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}


def align_features(bev, selection, mlp: dict) -> np.ndarray:
    """Public one-shot form of align_forward."""
    lam = selection.lam if isinstance(selection, SelectionWeights) else np.asarray(selection)
    out, _ = align_forward(bev, lam, mlp)
    return out


def stub_forward(queries: np.ndarray, tokens: np.ndarray,
                 proj: MHCAProjections, heads: int, trace=None):
    """One cross-attention layer from learnable task queries onto a token
    sequence, with the queries themselves as the residual path.

    queries: (L_task, d); tokens: (B, n_tokens, d).  Output (B, L_task, d).
    """
    B = tokens.shape[0]
    q = np.broadcast_to(queries, (B,) + queries.shape)
    attn, cache = mhca_forward(q, tokens, tokens, proj, heads,
                               AttentionPattern.dense(), trace=trace)
    return attn + q, cache


def stub_backward(cache, d_out):
    """Returns (d_queries, d_tokens, d_proj)."""
    dx_q, dx_k, dx_v, d_proj = mhca_backward(cache, d_out)
    d_queries = (dx_q + d_out).sum(axis=0)
    return d_queries, dx_k + dx_v, d_proj


def stub_head(aligned_grid: np.ndarray, queries: np.ndarray,
              proj: MHCAProjections, heads: int) -> np.ndarray:
    """Single-grid stub task head: flatten (d, H, W) to tokens and attend."""
    d = aligned_grid.shape[0]
    tokens = aligned_grid.reshape(d, -1).T[None]    # (1, H*W, d)
    out, _ = stub_forward(queries, tokens, proj, heads)
    return out[0]


@dataclass
class EgoQuery:
    """Concatenated (agent, map, ego-embedding) query sequence."""

    seq: np.ndarray             # (B, L, d)
    L_agent: int
    L_map: int

    def __post_init__(self):
        if self.seq.shape[1] != self.L_agent + self.L_map + 1:
            raise ValueError("sequence length must be L_agent + L_map + 1")


def build_ego_query(agent_q: np.ndarray, map_q: np.ndarray,
                    ego_embed: np.ndarray) -> EgoQuery:
    """Concatenate along the sequence axis in (agent, map, ego) order.

    2-D inputs are treated as batch-shared and broadcast; ego_embed is
    (1, d).  Feature dimensions must agree.
    """
    if ego_embed.shape != (1, agent_q.shape[-1]):
        raise ValueError("ego_embed must be (1, d) with the shared d")
    if map_q.shape[-1] != agent_q.shape[-1]:
        raise ValueError("agent and map queries must share the feature dim")
    batched = [a for a in (agent_q, map_q) if a.ndim == 3]
    B = batched[0].shape[0] if batched else 1
    agent = np.broadcast_to(agent_q, (B,) + agent_q.shape[-2:])
    mapq = np.broadcast_to(map_q, (B,) + map_q.shape[-2:])
    ego = np.broadcast_to(ego_embed, (B, 1, ego_embed.shape[-1]))
    seq = np.concatenate([agent, mapq, ego], axis=1)
    return EgoQuery(seq=seq, L_agent=agent_q.shape[-2], L_map=map_q.shape[-2])
