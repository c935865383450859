"""Sparse multi-head cross-attention with three support-set families.

Each query i attends only to a support set C_i of key indices:

  block(m)  : keys whose (rescaled) index falls in the same size-m block
              as the query index;
  window(w) : keys in [i-w, i+w], clamped to the valid index range;
  topk(k)   : the k keys with the largest pre-softmax scores for that
              query, ties broken toward the lowest index;
  dense     : every key.

Softmax is normalized over exactly C_i, so attention rows are stochastic
on their support.  Block support under cross-attention with L_q != L_kv
uses the rescaled key index j' = floor(j * L_q / L_kv) so blocks keep
their local-region meaning.

Forward kernels are vectorized per pattern (block attention really does
1/(L/m) of the dense score work, which is what the benchmark measures)
and optionally record their exact mathematical cost into a FlopTrace.
The backward pass is written by hand; for topk the gradient flows only
through the selected keys (the selection itself is treated as constant).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flops import FlopTrace


@dataclass(frozen=True)
class AttentionPattern:
    """Support-set family; param is m, w or k depending on kind."""

    kind: str
    param: int = 0

    _KINDS = ("dense", "block", "window", "topk")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown pattern kind {self.kind!r}")
        if self.kind == "block" and self.param < 1:
            raise ValueError("block size m must be >= 1")
        if self.kind == "window" and self.param < 0:
            raise ValueError("window half-width w must be >= 0")
        if self.kind == "topk" and self.param < 1:
            raise ValueError("topk k must be >= 1")

    @classmethod
    def dense(cls):
        return cls("dense")

    @classmethod
    def block(cls, m: int):
        return cls("block", int(m))

    @classmethod
    def window(cls, w: int):
        return cls("window", int(w))

    @classmethod
    def topk(cls, k: int):
        return cls("topk", int(k))

    @classmethod
    def parse(cls, text: str) -> "AttentionPattern":
        """Parse the CLI grammar `dense | block:<m> | window:<w> | topk:<k>`."""
        text = text.strip()
        if text == "dense":
            return cls.dense()
        try:
            kind, raw = text.split(":", 1)
            param = int(raw)
        except ValueError:
            raise ValueError(f"bad pattern spec {text!r}") from None
        if kind not in ("block", "window", "topk"):
            raise ValueError(f"bad pattern spec {text!r}")
        return cls(kind, param)

    def __str__(self):
        return self.kind if self.kind == "dense" else f"{self.kind}:{self.param}"


@dataclass(frozen=True)
class MHCAProjections:
    """Per-layer packed projection weights; head h owns columns
    [h*d_k, (h+1)*d_k) of wq/wk/wv."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray


@dataclass
class AttentionInputs:
    """Pre-projection query/key/value sequences, 2-D (L x d)."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    heads: int

    def __post_init__(self):
        d = self.q.shape[-1]
        if d % self.heads != 0:
            raise ValueError("d must be divisible by the head count")
        if self.k.shape != self.v.shape:
            raise ValueError("K and V must have the same shape")
        if self.k.shape[-1] != d:
            raise ValueError("Q and K must share the feature dimension")

    @property
    def d_k(self) -> int:
        return self.q.shape[-1] // self.heads


def _block_key_range(b: int, m: int, L_q: int, L_kv: int) -> tuple[int, int]:
    """Key index range [lo, hi) whose rescaled index lands in block b.

    With L_q == L_kv this is just [b*m, (b+1)*m) clipped; otherwise keys
    are rescaled by j' = floor(j * L_q / L_kv) before the block test.
    """
    if L_q == L_kv:
        return b * m, min((b + 1) * m, L_kv)
    # smallest j with floor(j*L_q/L_kv) >= b*m is ceil(b*m*L_kv/L_q)
    lo = -(-(b * m * L_kv) // L_q)
    hi = -(-((b + 1) * m * L_kv) // L_q)
    return lo, min(hi, L_kv)


def pattern_support(i: int, L_q: int, L_kv: int, pattern: AttentionPattern,
                    scores_row=None) -> np.ndarray:
    """Support set C_i for query i, as a sorted index array.

    For topk the pre-softmax score row must be supplied; ties go to the
    lowest index.  Raises if the support would be empty.
    """
    if not 0 <= i < L_q:
        raise ValueError("query index out of range")
    if pattern.kind == "dense":
        return np.arange(L_kv)
    if pattern.kind == "block":
        lo, hi = _block_key_range(i // pattern.param, pattern.param, L_q, L_kv)
        if hi <= lo:
            raise ValueError(
                f"empty block support for query {i} (m={pattern.param}, "
                f"L_q={L_q}, L_kv={L_kv})"
            )
        return np.arange(lo, hi)
    if pattern.kind == "window":
        lo = max(0, i - pattern.param)
        hi = min(L_kv - 1, i + pattern.param)
        if hi < lo:
            raise ValueError(
                f"empty window support for query {i} (w={pattern.param}, L_kv={L_kv})"
            )
        return np.arange(lo, hi + 1)
    # topk
    if scores_row is None:
        raise ValueError("topk support needs the pre-softmax scores row")
    scores_row = np.asarray(scores_row)
    if scores_row.shape != (L_kv,):
        raise ValueError("scores_row must have length L_kv")
    k = pattern.param
    if k > L_kv:
        raise ValueError(f"topk k={k} exceeds key count {L_kv}")
    order = np.argsort(-scores_row, kind="stable")
    return np.sort(order[:k])


def support_sizes(pattern: AttentionPattern, L_q: int, L_kv: int) -> np.ndarray:
    """|C_i| for every query, without needing scores (topk is always k)."""
    if pattern.kind == "dense":
        return np.full(L_q, L_kv, dtype=np.int64)
    if pattern.kind == "topk":
        if pattern.param > L_kv:
            raise ValueError(f"topk k={pattern.param} exceeds key count {L_kv}")
        return np.full(L_q, pattern.param, dtype=np.int64)
    if pattern.kind == "window":
        i = np.arange(L_q)
        lo = np.maximum(0, i - pattern.param)
        hi = np.minimum(L_kv - 1, i + pattern.param)
        sizes = hi - lo + 1
        if np.any(sizes <= 0):
            raise ValueError("empty window support")
        return sizes
    sizes = np.empty(L_q, dtype=np.int64)
    for i in range(L_q):
        lo, hi = _block_key_range(i // pattern.param, pattern.param, L_q, L_kv)
        if hi <= lo:
            raise ValueError("empty block support")
        sizes[i] = hi - lo
    return sizes


@dataclass(frozen=True)
class AttentionFlops:
    """Closed-form cost of one forward call at batch size 1."""

    score_macs: int
    value_macs: int
    proj_macs: int
    exponentials: int

    @property
    def multiply_adds(self) -> int:
        return self.score_macs + self.value_macs + self.proj_macs

    @property
    def total(self) -> int:
        return 2 * self.multiply_adds + self.exponentials


def analytic_flops(pattern: AttentionPattern, L_q: int, L_kv: int, d: int,
                   heads: int) -> AttentionFlops:
    """Predicted FLOP counts; must equal the instrumented ledger exactly."""
    d_k = d // heads
    pairs = int(support_sizes(pattern, L_q, L_kv).sum())
    return AttentionFlops(
        score_macs=heads * pairs * d_k,
        value_macs=heads * pairs * d_k,
        proj_macs=(2 * L_q + 2 * L_kv) * d * d,
        exponentials=heads * pairs,
    )


def _softmax_lastaxis(s):
    m = np.max(s, axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=-1, keepdims=True)


def _record_sizes(trace, sizes, B, heads, d_k):
    """Record score/softmax/value cost grouped by support size."""
    for size in np.unique(sizes):
        n = int((sizes == size).sum())
        count = B * heads * n
        trace.add("matmul", (1, d_k, int(size)), count, tag="attn-scores")
        trace.add("softmax", (int(size),), count)
        trace.add("matmul", (1, int(size), d_k), count, tag="attn-values")


def mhca_forward(x_q, x_k, x_v, proj: MHCAProjections, heads: int,
                 pattern: AttentionPattern, trace: FlopTrace | None = None):
    """Batched sparse MHCA forward.

    x_q: (B, L_q, d); x_k, x_v: (B, L_kv, d).  Returns (out, cache) where
    out is (B, L_q, d) and cache feeds mhca_backward.
    """
    B, L_q, d = x_q.shape
    L_kv = x_k.shape[1]
    d_k = d // heads
    scale = 1.0 / np.sqrt(d_k)

    Q = (x_q @ proj.wq).reshape(B, L_q, heads, d_k).transpose(0, 2, 1, 3)
    K = (x_k @ proj.wk).reshape(B, L_kv, heads, d_k).transpose(0, 2, 1, 3)
    V = (x_v @ proj.wv).reshape(B, L_kv, heads, d_k).transpose(0, 2, 1, 3)
    if trace is not None:
        trace.add("matmul", (L_q, d, d), B, tag="proj")
        trace.add("matmul", (L_kv, d, d), 2 * B, tag="proj")

    cache = {
        "x_q": x_q, "x_k": x_k, "x_v": x_v, "Q": Q, "K": K, "V": V,
        "proj": proj, "heads": heads, "pattern": pattern, "scale": scale,
    }

    if pattern.kind == "dense":
        S = np.einsum("bhid,bhjd->bhij", Q, K) * scale
        A = _softmax_lastaxis(S)
        O = np.einsum("bhij,bhjd->bhid", A, V)
        cache["A"] = A
        if trace is not None:
            _record_sizes(trace, support_sizes(pattern, L_q, L_kv), B, heads, d_k)

    elif pattern.kind == "block":
        m = pattern.param
        n_blocks = -(-L_q // m)
        O = np.empty((B, heads, L_q, d_k))
        blocks = []
        for b in range(n_blocks):
            q_lo, q_hi = b * m, min((b + 1) * m, L_q)
            k_lo, k_hi = _block_key_range(b, m, L_q, L_kv)
            if k_hi <= k_lo:
                raise ValueError(f"empty block support (m={m}, L_q={L_q}, L_kv={L_kv})")
            S = np.einsum("bhid,bhjd->bhij", Q[:, :, q_lo:q_hi], K[:, :, k_lo:k_hi]) * scale
            A = _softmax_lastaxis(S)
            O[:, :, q_lo:q_hi] = np.einsum("bhij,bhjd->bhid", A, V[:, :, k_lo:k_hi])
            blocks.append((q_lo, q_hi, k_lo, k_hi, A))
        cache["blocks"] = blocks
        if trace is not None:
            _record_sizes(trace, support_sizes(pattern, L_q, L_kv), B, heads, d_k)

    elif pattern.kind == "window":
        w = pattern.param
        offs = np.arange(-w, w + 1)
        raw = np.arange(L_q)[:, None] + offs[None, :]
        valid = (raw >= 0) & (raw < L_kv)
        if not valid.any(axis=1).all():
            raise ValueError(f"empty window support (w={w}, L_q={L_q}, L_kv={L_kv})")
        idx = np.clip(raw, 0, L_kv - 1)
        Kg = K[:, :, idx, :]                       # (B,h,L_q,2w+1,d_k)
        S = np.einsum("bhid,bhiwd->bhiw", Q, Kg) * scale
        S = np.where(valid[None, None], S, -np.inf)
        A = _softmax_lastaxis(S)
        A = np.where(valid[None, None], A, 0.0)
        Vg = V[:, :, idx, :]
        O = np.einsum("bhiw,bhiwd->bhid", A, Vg)
        cache.update(A=A, idx=idx, valid=valid, Kg=Kg, Vg=Vg)
        if trace is not None:
            _record_sizes(trace, support_sizes(pattern, L_q, L_kv), B, heads, d_k)

    else:  # topk
        k = pattern.param
        if k > L_kv:
            raise ValueError(f"topk k={k} exceeds key count {L_kv}")
        S_full = np.einsum("bhid,bhjd->bhij", Q, K) * scale
        order = np.argsort(-S_full, axis=-1, kind="stable")
        sel = np.sort(order[..., :k], axis=-1)     # (B,h,L_q,k)
        Sg = np.take_along_axis(S_full, sel, axis=-1)
        A = _softmax_lastaxis(Sg)
        Vg = np.take_along_axis(V[:, :, None], sel[..., None], axis=3)  # (B,h,L_q,k,d_k)
        O = np.einsum("bhik,bhikd->bhid", A, Vg)
        cache.update(A=A, sel=sel, Vg=Vg)
        if trace is not None:
            # selection scans every key's score; only kept pairs count as MACs
            trace.add("select", (L_kv,), B * heads * L_q)
            _record_sizes(trace, support_sizes(pattern, L_q, L_kv), B, heads, d_k)

    concat = O.transpose(0, 2, 1, 3).reshape(B, L_q, d)
    out = concat @ proj.wo + proj.bo
    if trace is not None:
        trace.add("matmul", (L_q, d, d), B, tag="proj")
    cache["concat"] = concat
    return out, cache


def mhca_backward(cache, d_out):
    """Backward for mhca_forward.

    Returns (dx_q, dx_k, dx_v, dproj) with dproj keyed like
    MHCAProjections fields.  Topk selection indices are constants.
    """
    proj: MHCAProjections = cache["proj"]
    pattern: AttentionPattern = cache["pattern"]
    heads, scale = cache["heads"], cache["scale"]
    Q, K, V = cache["Q"], cache["K"], cache["V"]
    x_q, x_k, x_v = cache["x_q"], cache["x_k"], cache["x_v"]
    B, h, L_q, d_k = Q.shape
    L_kv = K.shape[2]
    d = h * d_k

    dwo = np.einsum("bld,ble->de", cache["concat"], d_out)
    dbo = d_out.sum(axis=(0, 1))
    dconcat = d_out @ proj.wo.T
    dO = dconcat.reshape(B, L_q, heads, d_k).transpose(0, 2, 1, 3)

    dQ = np.zeros_like(Q)
    dK = np.zeros_like(K)
    dV = np.zeros_like(V)

    if pattern.kind == "dense":
        A = cache["A"]
        dA = np.einsum("bhid,bhjd->bhij", dO, V)
        dV = np.einsum("bhij,bhid->bhjd", A, dO)
        dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True))
        dQ = np.einsum("bhij,bhjd->bhid", dS, K) * scale
        dK = np.einsum("bhij,bhid->bhjd", dS, Q) * scale

    elif pattern.kind == "block":
        for q_lo, q_hi, k_lo, k_hi, A in cache["blocks"]:
            dOb = dO[:, :, q_lo:q_hi]
            dA = np.einsum("bhid,bhjd->bhij", dOb, V[:, :, k_lo:k_hi])
            dV[:, :, k_lo:k_hi] += np.einsum("bhij,bhid->bhjd", A, dOb)
            dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True))
            dQ[:, :, q_lo:q_hi] = np.einsum("bhij,bhjd->bhid", dS, K[:, :, k_lo:k_hi]) * scale
            dK[:, :, k_lo:k_hi] += np.einsum("bhij,bhid->bhjd", dS, Q[:, :, q_lo:q_hi]) * scale

    elif pattern.kind == "window":
        A, idx, Kg, Vg = cache["A"], cache["idx"], cache["Kg"], cache["Vg"]
        dA = np.einsum("bhid,bhiwd->bhiw", dO, Vg)
        dVg = np.einsum("bhiw,bhid->bhiwd", A, dO)
        dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True))
        dQ = np.einsum("bhiw,bhiwd->bhid", dS, Kg) * scale
        dKg = np.einsum("bhiw,bhid->bhiwd", dS, Q) * scale
        flat_idx = idx.ravel()
        for b in range(B):
            for hh in range(heads):
                np.add.at(dV[b, hh], flat_idx, dVg[b, hh].reshape(-1, d_k))
                np.add.at(dK[b, hh], flat_idx, dKg[b, hh].reshape(-1, d_k))

    else:  # topk
        A, sel, Vg = cache["A"], cache["sel"], cache["Vg"]
        dA = np.einsum("bhid,bhikd->bhik", dO, Vg)
        dVg = np.einsum("bhik,bhid->bhikd", A, dO)
        dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True))
        Kg = np.take_along_axis(K[:, :, None], sel[..., None], axis=3)
        dQ = np.einsum("bhik,bhikd->bhid", dS, Kg) * scale
        dKg = np.einsum("bhik,bhid->bhikd", dS, Q) * scale
        for b in range(B):
            for hh in range(heads):
                flat_sel = sel[b, hh].ravel()
                np.add.at(dV[b, hh], flat_sel, dVg[b, hh].reshape(-1, d_k))
                np.add.at(dK[b, hh], flat_sel, dKg[b, hh].reshape(-1, d_k))

    dQ_flat = dQ.transpose(0, 2, 1, 3).reshape(B, L_q, d)
    dK_flat = dK.transpose(0, 2, 1, 3).reshape(B, L_kv, d)
    dV_flat = dV.transpose(0, 2, 1, 3).reshape(B, L_kv, d)

    dproj = {
        "wq": np.einsum("bld,ble->de", x_q, dQ_flat),
        "wk": np.einsum("bld,ble->de", x_k, dK_flat),
        "wv": np.einsum("bld,ble->de", x_v, dV_flat),
        "wo": dwo,
        "bo": dbo,
    }
    dx_q = dQ_flat @ proj.wq.T
    dx_k = dK_flat @ proj.wk.T
    dx_v = dV_flat @ proj.wv.T
    return dx_q, dx_k, dx_v, dproj


def sparse_mhca(inputs: AttentionInputs, pattern: AttentionPattern,
                proj: MHCAProjections, trace: FlopTrace | None = None) -> np.ndarray:
    """Single-sequence sparse MHCA (L_q x d in, L_q x d out)."""
    out, _ = mhca_forward(inputs.q[None], inputs.k[None], inputs.v[None],
                          proj, inputs.heads, pattern, trace=trace)
    return out[0]


def dense_reference(inputs: AttentionInputs, proj: MHCAProjections) -> np.ndarray:
    """Straight-line full-support MHCA used as the oracle.

    Deliberately independent of the sparse kernels: per-head slices,
    per-row softmax, no pattern machinery.
    """
    q, k, v, heads = inputs.q, inputs.k, inputs.v, inputs.heads
    d = q.shape[-1]
    d_k = d // heads
    head_outs = []
    for hh in range(heads):
        cols = slice(hh * d_k, (hh + 1) * d_k)
        Qh = q @ proj.wq[:, cols]
        Kh = k @ proj.wk[:, cols]
        Vh = v @ proj.wv[:, cols]
        S = Qh @ Kh.T / np.sqrt(d_k)
        S = S - S.max(axis=1, keepdims=True)
        E = np.exp(S)
        A = E / E.sum(axis=1, keepdims=True)
        head_outs.append(A @ Vh)
    return np.concatenate(head_outs, axis=1) @ proj.wo + proj.bo
