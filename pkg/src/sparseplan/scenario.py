"""Deterministic synthetic driving scenarios.

Each scenario is a pure function of (config, seed): a BEV-like feature
volume in which exactly `planted_channels` channels carry Gaussian-bump
templates encoding the scenario's geometry (turn curvature, trajectory
endpoint, obstacle positions) while the rest are pure noise, plus a
unicycle ego history, a navigation command, obstacle tracks, and the
kinematic ground-truth future.  The planted templates are stored next to
the noisy volume so training can score channel selection against a known
optimum, and the future control script is stored so the ground truth is
re-derivable from the terminal ego state.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .rng import seeded_stream

COMMANDS = ("left", "straight", "right")
HISTORY_STEPS = 12
GRID_EXTENT = 16.0     # metres from grid center to each edge
BUMP_SIGMA = 2.0       # metres
EGO_RADIUS = 1.0       # metres, shared by generation clearance and metrics


def turn_sign(command: int) -> int:
    """+1 for left (counter-clockwise), 0 straight, -1 right."""
    return {0: 1, 1: 0, 2: -1}[int(command)]


@dataclass(frozen=True)
class ScenarioConfig:
    T: int = 4
    d: int = 64
    H: int = 16
    W: int = 16
    horizon: int = 6
    dt: float = 0.5
    noise_level: float = 1.0
    planted_channels: int = 8
    obstacle_count: int = 4

    def __post_init__(self):
        for name in ("T", "d", "H", "W", "horizon", "obstacle_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.noise_level < 0:
            raise ValueError("noise_level must be non-negative")
        if not 1 <= self.planted_channels <= self.d:
            raise ValueError("planted_channels must be in [1, d]")

    def planted_indices(self) -> np.ndarray:
        """Strided channel indices; a function of the config only, so the
        same channels carry signal across a whole scenario set."""
        p = self.planted_channels
        return np.array([(i * self.d) // p for i in range(p)], dtype=np.int64)


@dataclass
class Scenario:
    bev_seq: np.ndarray        # (T, d, H, W)
    ego_history: np.ndarray    # (HISTORY_STEPS, 6): x, y, yaw, v, a, yaw_rate
    command: int
    obstacles: np.ndarray      # (obstacle_count, horizon, 3): x, y, radius
    gt_future: np.ndarray      # (horizon, 2)
    clean_bev: np.ndarray      # (T, planted_channels, H, W) noise-free templates
    planted_idx: np.ndarray    # (planted_channels,)
    future_controls: np.ndarray  # (horizon, 2): accel, yaw_rate

    @property
    def terminal_state(self) -> np.ndarray:
        """(x, y, yaw, v) at the end of history; the rollout start."""
        return self.ego_history[-1, :4].copy()


def rollout_states(state, controls, steps: int, dt: float) -> np.ndarray:
    """Explicit-Euler unicycle rollout; returns (steps, 4) of x, y, yaw, v."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x, y, yaw, v = (float(s) for s in state)
    controls = np.asarray(controls, dtype=np.float64).reshape(steps, 2)
    out = np.empty((steps, 4))
    for t in range(steps):
        a, omega = controls[t]
        x += v * np.cos(yaw) * dt
        y += v * np.sin(yaw) * dt
        v += a * dt
        yaw += omega * dt
        out[t] = (x, y, yaw, v)
    return out


def kinematic_rollout(state, controls, steps: int, dt: float) -> np.ndarray:
    """Future (x, y) positions after 1..steps Euler updates."""
    return rollout_states(state, controls, steps, dt)[:, :2]


def collision_check(traj, obstacles, ego_radius: float = EGO_RADIUS) -> float:
    """Fraction of timesteps with any obstacle closer than the radii sum.

    traj is (steps, 2); obstacles is (n, steps, 3) with per-step x, y,
    radius.  Raises on horizon mismatch.
    """
    traj = np.asarray(traj, dtype=np.float64)
    obstacles = np.asarray(obstacles, dtype=np.float64)
    if obstacles.size == 0:
        return 0.0
    if obstacles.shape[1] != traj.shape[0]:
        raise ValueError(
            f"obstacle tracks cover {obstacles.shape[1]} steps, "
            f"trajectory has {traj.shape[0]}"
        )
    delta = obstacles[:, :, :2] - traj[None, :, :]
    dist = np.hypot(delta[..., 0], delta[..., 1])
    hit = dist < (ego_radius + obstacles[:, :, 2])
    return float(hit.any(axis=0).mean())


def _gaussian_bump(xc, yc, center, amp):
    dx = xc - center[0]
    dy = yc - center[1]
    return amp * np.exp(-(dx * dx + dy * dy) / (2.0 * BUMP_SIGMA**2))


def generate_scenario(config: ScenarioConfig, seed: int) -> Scenario:
    """Generate one scenario deterministically from (config, seed)."""
    stream = seeded_stream(seed, "scenario")

    command = int(stream.integers(0, len(COMMANDS)))
    sign = turn_sign(command)

    # --- ego history: gentle noise controls with a late pre-turn hint
    x0, y0 = stream.uniform(2, low=-2.0, high=2.0)
    yaw0 = float(stream.uniform(low=-np.pi, high=np.pi))
    v0 = float(stream.uniform(low=4.0, high=8.0))
    hist_a = stream.uniform(HISTORY_STEPS, low=-0.3, high=0.3)
    ramp = np.linspace(0.0, 1.0, HISTORY_STEPS) ** 2
    hist_w = stream.uniform(HISTORY_STEPS, low=-0.05, high=0.05) + 0.15 * sign * ramp
    hist_controls = np.stack([hist_a, hist_w], axis=1)

    states = rollout_states((x0, y0, yaw0, v0), hist_controls, HISTORY_STEPS, config.dt)
    ego_history = np.concatenate([states, hist_controls], axis=1)
    x_e, y_e, yaw_e, v_e = states[-1]

    # --- future: constant controls; curvature magnitude is a latent the
    # planner can only read out of the planted BEV channels
    a_f = float(stream.uniform(low=-0.2, high=0.2))
    omega_mag = float(stream.uniform(low=0.25, high=0.40))
    omega = sign * omega_mag
    future_controls = np.tile([a_f, omega], (config.horizon, 1))
    gt_future = kinematic_rollout((x_e, y_e, yaw_e, v_e), future_controls,
                                  config.horizon, config.dt)

    # --- obstacles: offset laterally from the future path, then pushed
    # outward until the ground-truth trajectory is collision-free
    perp = np.array([-np.sin(yaw_e), np.cos(yaw_e)])
    steps_f = (np.arange(config.horizon) + 1) * config.dt
    obstacles = np.empty((config.obstacle_count, config.horizon, 3))
    obstacle_p0 = np.empty((config.obstacle_count, 2))
    obstacle_vel = np.empty((config.obstacle_count, 2))
    for n in range(config.obstacle_count):
        anchor = int(stream.integers(0, config.horizon))
        side = 1.0 if stream.uniform() < 0.5 else -1.0
        offset = float(stream.uniform(low=3.5, high=7.0))
        vel = stream.uniform(2, low=-0.6, high=0.6)
        radius = float(stream.uniform(low=0.5, high=1.2))
        p0 = gt_future[anchor] + side * offset * perp
        for _ in range(3):
            track = p0[None, :] + vel[None, :] * steps_f[:, None]
            gap = np.hypot(*(gt_future - track).T) - (EGO_RADIUS + radius)
            deficit = 0.5 - gap.min()
            if deficit <= 0:
                break
            p0 = p0 + side * deficit * perp
        obstacles[n, :, :2] = p0[None, :] + vel[None, :] * steps_f[:, None]
        obstacles[n, :, 2] = radius
        obstacle_p0[n] = p0
        obstacle_vel[n] = vel

    # --- BEV volume
    planted_idx = config.planted_indices()
    noise = config.noise_level * stream.normal((config.T, config.d, config.H, config.W))

    cell_x = x_e - GRID_EXTENT + (np.arange(config.W) + 0.5) * (2 * GRID_EXTENT / config.W)
    cell_y = y_e - GRID_EXTENT + (np.arange(config.H) + 0.5) * (2 * GRID_EXTENT / config.H)
    xc, yc = np.meshgrid(cell_x, cell_y)          # (H, W)

    rot = np.array([[np.cos(yaw_e), -np.sin(yaw_e)],
                    [np.sin(yaw_e), np.cos(yaw_e)]])
    hist_tail = np.arange(HISTORY_STEPS - config.T, HISTORY_STEPS)

    clean = np.zeros((config.T, config.planted_channels, config.H, config.W))
    roles = ["command", "goal", "obstacle"]
    for t in range(config.T):
        # curvature bump drifts forward with the ego over the frame window
        lead = 5.0 + v_e * config.dt * t
        cmd_center = np.array([x_e, y_e]) + rot @ np.array([lead, 14.0 * omega])
        age = (HISTORY_STEPS - 1 - hist_tail[t]) * config.dt
        for i in range(config.planted_channels):
            role = roles[i % len(roles)]
            amp = 3.5 + 0.5 * (i % 3)
            grid = _gaussian_bump(xc, yc, cmd_center, amp)
            if role == "goal":
                grid = grid + _gaussian_bump(xc, yc, gt_future[-1], 4.0)
            elif role == "obstacle":
                for n in range(config.obstacle_count):
                    pos = obstacle_p0[n] - obstacle_vel[n] * age
                    grid = grid + _gaussian_bump(xc, yc, pos, 3.0)
            clean[t, i] = grid

    bev_seq = noise
    bev_seq[:, planted_idx] += clean

    return Scenario(
        bev_seq=bev_seq,
        ego_history=ego_history,
        command=command,
        obstacles=obstacles,
        gt_future=gt_future,
        clean_bev=clean,
        planted_idx=planted_idx,
        future_controls=future_controls,
    )


def generate_set(config: ScenarioConfig, count: int, seed: int):
    """Generate `count` scenarios with per-scenario seeds derived from a
    dedicated stream; returns (scenarios, seeds)."""
    seeds = seeded_stream(seed, "scenario-seeds").integers(0, 2**63, count)
    scenarios = [generate_scenario(config, int(s)) for s in seeds]
    return scenarios, [int(s) for s in seeds]


_SCENARIO_ARRAYS = ("bev_seq", "ego_history", "obstacles", "gt_future",
                    "clean_bev", "planted_idx", "future_controls")


def save_scenario_set(out_dir, config: ScenarioConfig, scenarios, seeds):
    """Write per-scenario .npz blobs plus the manifest.json contract."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, sc in enumerate(scenarios):
        name = f"scenario_{i:05d}.npz"
        arrays = {k: getattr(sc, k) for k in _SCENARIO_ARRAYS}
        np.savez(out / name, command=np.int64(sc.command), **arrays)
        files.append(name)
    manifest = {
        "count": len(scenarios),
        "config": asdict(config),
        "seeds": list(seeds),
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out / "manifest.json"


def load_scenario_set(data_dir):
    """Read a manifest directory back into (config, scenarios, seeds)."""
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    config = ScenarioConfig(**manifest["config"])
    scenarios = []
    for name in manifest["files"]:
        with np.load(root / name) as blob:
            scenarios.append(Scenario(
                command=int(blob["command"]),
                **{k: blob[k] for k in _SCENARIO_ARRAYS},
            ))
    return config, scenarios, manifest["seeds"]
