"""The eight-expert bank: modality embeddings and ego-query fusion.

Experts come in three categories with a fixed attention-pattern family
per category: Environmental experts use block-sparse attention, ego-state
experts a sliding window, navigation experts global top-k.  Every expert
embeds its own slice of the scenario through one affine layer plus a
modality-specific normalization, then fuses with the ego query through
sparse cross-attention (queries = ego query, keys = values = embedding).

Modality normalizations:
  time_series   per-feature standardization over the window
  text_command  embedding-table lookup, unit-norm scaling (no affine)
  geometric / grid / waypoint   layer normalization over the feature dim
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionPattern, MHCAProjections, mhca_backward, mhca_forward
from .layers import (
    layernorm_backward,
    layernorm_forward,
    linear_backward,
    linear_forward,
    unitnorm_backward,
    unitnorm_forward,
)
from .scenario import COMMANDS, HISTORY_STEPS, Scenario

CATEGORY_PATTERN_FAMILY = {
    "Environmental": "block",
    "EgoState": "window",
    "Navigation": "topk",
}

EXPERT_NAMES = ("Tracking", "Mapping", "Velocity", "Yaw", "Acceleration",
                "ReferencePoint", "BEV", "Command")

# feature width of each modality's raw rows (grid rows carry d features)
_RAW_WIDTH = {
    "Tracking": 5,       # obstacle geometry: start xy, end xy, radius
    "Mapping": 3,        # driven-path geometry: xy, relative heading
    "Velocity": 1,
    "Yaw": 2,            # relative heading, yaw rate
    "Acceleration": 1,
    "ReferencePoint": 2,  # command-conditioned waypoints, ego frame
}

# nominal command turn rate for reference waypoints (the scenario's true
# turn rate is a latent the model must read out of the BEV channels)
_NOMINAL_TURN_RATE = 0.325


@dataclass(frozen=True)
class ExpertSpec:
    name: str
    category: str
    pattern: AttentionPattern
    modality: str

    def __post_init__(self):
        family = CATEGORY_PATTERN_FAMILY.get(self.category)
        if family is None:
            raise ValueError(f"unknown expert category {self.category!r}")
        if self.pattern.kind != family:
            raise ValueError(
                f"{self.category} experts must use {family} attention, "
                f"got {self.pattern.kind}"
            )
        if self.modality not in ("geometric", "time_series", "text_command",
                                 "grid", "waypoint"):
            raise ValueError(f"unknown modality {self.modality!r}")


@dataclass
class ExpertEmbedding:
    seq: np.ndarray     # (B, L_e, d)

    def __post_init__(self):
        if self.seq.shape[-2] < 1:
            raise ValueError("expert embedding needs at least one row")
        if not np.all(np.isfinite(self.seq)):
            raise ValueError("expert embedding must be finite")


def default_bank(block_m: int = 6, window_w: int = 3,
                 topk_k: int = 6) -> list[ExpertSpec]:
    """The eight named experts with category-consistent patterns."""
    block = AttentionPattern.block(block_m)
    window = AttentionPattern.window(window_w)
    topk = AttentionPattern.topk(topk_k)
    return [
        ExpertSpec("Tracking", "Environmental", block, "geometric"),
        ExpertSpec("Mapping", "Environmental", block, "geometric"),
        ExpertSpec("Velocity", "EgoState", window, "time_series"),
        ExpertSpec("Yaw", "EgoState", window, "time_series"),
        ExpertSpec("Acceleration", "EgoState", window, "time_series"),
        ExpertSpec("ReferencePoint", "Navigation", topk, "waypoint"),
        ExpertSpec("BEV", "Navigation", topk, "grid"),
        ExpertSpec("Command", "Navigation", topk, "text_command"),
    ]


def raw_width(spec: ExpertSpec, d: int) -> int:
    if spec.modality == "text_command":
        return 0        # lookup table, no affine input
    if spec.modality == "grid":
        return d
    return _RAW_WIDTH[spec.name]


def _to_window(series: np.ndarray, L_e: int) -> np.ndarray:
    """Last L_e rows of a history series, front-padded by repetition."""
    if len(series) >= L_e:
        return series[-L_e:]
    pad = np.repeat(series[:1], L_e - len(series), axis=0)
    return np.concatenate([pad, series], axis=0)


def modality_slice(spec: ExpertSpec, scenario: Scenario, L_e: int) -> np.ndarray:
    """Raw input rows for one expert, in the terminal-pose ego frame.

    Grid experts are fed by the perception pipeline (pooled aligned
    features), not by the scenario directly.
    """
    if spec.modality == "grid":
        raise ValueError("grid experts take pooled aligned features, not a scenario slice")
    x_e, y_e, yaw_e = scenario.ego_history[-1, :3]
    cos, sin = np.cos(-yaw_e), np.sin(-yaw_e)
    rot = np.array([[cos, -sin], [sin, cos]])

    def to_ego(points):
        return (points - np.array([x_e, y_e])) @ rot.T

    if spec.modality == "text_command":
        return np.int64(scenario.command)

    if spec.name == "Tracking":
        n_obs = scenario.obstacles.shape[0]
        rows = np.zeros((L_e, 5))
        for n in range(min(n_obs, L_e)):
            start = to_ego(scenario.obstacles[n, 0, :2])
            end = to_ego(scenario.obstacles[n, -1, :2])
            rows[n] = (*start, *end, scenario.obstacles[n, 0, 2])
        return rows

    if spec.name == "Mapping":
        pts = to_ego(scenario.ego_history[:, :2])
        rel_yaw = scenario.ego_history[:, 2] - yaw_e
        rows = np.concatenate([pts, rel_yaw[:, None]], axis=1)
        return _to_window(rows, L_e)

    if spec.name == "Velocity":
        return _to_window(scenario.ego_history[:, 3:4], L_e)

    if spec.name == "Yaw":
        rel_yaw = scenario.ego_history[:, 2] - yaw_e
        rows = np.stack([rel_yaw, scenario.ego_history[:, 5]], axis=1)
        return _to_window(rows, L_e)

    if spec.name == "Acceleration":
        return _to_window(scenario.ego_history[:, 4:5], L_e)

    if spec.name == "ReferencePoint":
        from .scenario import kinematic_rollout, turn_sign
        v_e = scenario.ego_history[-1, 3]
        omega = _NOMINAL_TURN_RATE * turn_sign(scenario.command)
        controls = np.tile([0.0, omega], (L_e, 1))
        return kinematic_rollout((0.0, 0.0, 0.0, v_e), controls, L_e, 0.5)

    raise ValueError(f"no slice rule for expert {spec.name!r}")


def init_expert_params(spec: ExpertSpec, d: int, stream) -> dict:
    """Embedding + attention parameters for one expert."""
    params = {}
    if spec.modality == "text_command":
        params["embed.table"] = stream.normal((len(COMMANDS), d)) / np.sqrt(d)
    else:
        width = raw_width(spec, d)
        params["embed.W"] = stream.normal((width, d)) / np.sqrt(width)
        params["embed.b"] = np.zeros(d)
    for name in ("wq", "wk", "wv", "wo"):
        params[f"attn.{name}"] = stream.normal((d, d)) / np.sqrt(d)
    params["attn.bo"] = np.zeros(d)
    return params


def embed_forward(raw, spec: ExpertSpec, params: dict, L_e: int | None = None):
    """Embed a raw modality slice into (B, L_e, d) rows.

    raw: (B, L_e, width) for array modalities, (B,) command ints for
    text_command (L_e must then be given for the repeat window).
    Returns (seq, cache).
    """
    if spec.modality == "text_command":
        table = params["embed.table"]
        commands = np.asarray(raw, dtype=np.int64).reshape(-1)
        if commands.min() < 0 or commands.max() >= table.shape[0]:
            raise ValueError("command id out of vocabulary")
        rows = table[commands]                       # (B, d)
        tiled = np.repeat(rows[:, None, :], L_e, axis=1)
        seq, ncache = unitnorm_forward(tiled)
        return seq, ("text", commands, L_e, ncache)

    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3:
        raise ValueError("raw modality rows must be (B, L_e, width)")
    if raw.shape[-1] != raw_width(spec, params["embed.W"].shape[1]):
        raise ValueError(
            f"{spec.name} expects width {raw_width(spec, params['embed.W'].shape[1])}, "
            f"got {raw.shape[-1]}"
        )
    pre, lcache = linear_forward(raw, params["embed.W"], params["embed.b"])
    if spec.modality == "time_series":
        seq, ncache = layernorm_forward(pre, axis=1)   # standardize over window
    else:
        seq, ncache = layernorm_forward(pre, axis=-1)
    return seq, ("affine", spec.modality, lcache, ncache)


def embed_backward(cache, d_seq):
    """Returns (d_raw, d_params)."""
    if cache[0] == "text":
        _, commands, L_e, ncache = cache
        d_tiled = unitnorm_backward(ncache, d_seq)
        d_rows = d_tiled.sum(axis=1)
        d_table = np.zeros((len(COMMANDS), d_rows.shape[-1]))
        np.add.at(d_table, commands, d_rows)
        return None, {"embed.table": d_table}
    _, modality, lcache, ncache = cache
    d_pre = layernorm_backward(ncache, d_seq)
    d_raw, dW, db = linear_backward(lcache, d_pre)
    return d_raw, {"embed.W": dW, "embed.b": db}


def embed_modality(raw, spec: ExpertSpec, params: dict,
                   L_e: int | None = None) -> ExpertEmbedding:
    """Public one-shot embedding; validates the modality contract."""
    seq, _ = embed_forward(raw, spec, params, L_e=L_e)
    return ExpertEmbedding(seq=seq)


def expert_projections(params: dict) -> MHCAProjections:
    return MHCAProjections(
        wq=params["attn.wq"], wk=params["attn.wk"], wv=params["attn.wv"],
        wo=params["attn.wo"], bo=params["attn.bo"],
    )


def expert_forward(ego_seq: np.ndarray, emb_seq: np.ndarray, spec: ExpertSpec,
                   params: dict, heads: int, trace=None):
    """Fuse the ego query with one expert's embedding.

    ego_seq (B, L, d) are the queries; the embedding rows serve as both
    keys and values under the expert's sparse pattern.  Returns
    (out, cache) with out shaped like ego_seq.
    """
    proj = expert_projections(params)
    return mhca_forward(ego_seq, emb_seq, emb_seq, proj, heads, spec.pattern,
                        trace=trace)


def expert_backward(cache, d_out):
    """Returns (d_ego, d_emb, d_params) with attn.-prefixed param keys."""
    dx_q, dx_k, dx_v, d_proj = mhca_backward(cache, d_out)
    d_params = {f"attn.{k}": v for k, v in d_proj.items()}
    return dx_q, dx_k + dx_v, d_params
