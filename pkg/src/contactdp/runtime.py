"""Closed-loop execution: consistent cached-noise chunk inference.

One chunk = encode the slow window and draw the chunk's noise once, then for
each execution step fetch the force window grown by one sample, re-denoise the
matching prefix of the *same* cached noise, and execute the last predicted
action. Because the denoiser is causal and the sampler deterministic, each
re-denoise reproduces the previous rows exactly and only appends new ones.

``open_loop`` mode denoises once per chunk with the force window frozen at the
chunk boundary (zero-order hold), which is the no-fast-feedback baseline.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .compliance import StiffnessParams, wrap_angle
from .config import HorizonConfig
from .data import EpisodeRecord, build_episode_record
from .policy import ACTION_DIM, ChunkCache, DiffusionPolicy, ScriptedExpertPolicy
from .simworld import FAIL_SAFETY_STOP, PlanarContactSim, ScriptedExpert, TaskSpec, success

SAFETY_MAX_STEP = 0.05  # m of commanded translation per control step


class SafetyStop(RuntimeError):
    """Raised when a policy action is non-finite or implausibly large."""


@dataclass
class ControlStepResult:
    executed_action: np.ndarray       # anchor-relative action slice of the last row
    full_denoised_prefix: np.ndarray  # (prefix_len, target_dim), denormalized
    wall_time: float
    prefix_len: int


class EpisodeEnvAdapter:
    """Binds one simulator episode: keeps aligned observation history, anchors
    chunk windows, serves hold-extended force windows, executes and logs."""

    def __init__(self, sim: PlanarContactSim):
        self.sim = sim
        self.slow_obs: list[np.ndarray] = []
        self.proprio: list[np.ndarray] = []
        self.forces: list[np.ndarray] = []
        self.poses: list[np.ndarray] = []
        self.actions: list[np.ndarray] = []
        self.penetrations: list[float] = []
        self._window_start = 0

    def reset(self, seed: int) -> None:
        obs = self.sim.reset(seed)
        self.slow_obs = [obs["slow"]]
        self.proprio = [obs["proprio"]]
        self.forces = [obs["force"]]
        self.poses = [obs["proprio"].copy()]
        self.actions = []
        self.penetrations = [self.sim._penetration()]

    @property
    def now_index(self) -> int:
        return len(self.forces) - 1

    @property
    def current_pose(self) -> np.ndarray:
        return self.poses[-1]

    def slow_window(self, obs_steps: int) -> tuple[np.ndarray, np.ndarray]:
        idx = np.clip(np.arange(self.now_index - obs_steps + 1, self.now_index + 1), 0, None)
        frames = np.stack([self.slow_obs[i] for i in idx])
        prop = np.stack([self.proprio[i] for i in idx])
        return frames, prop

    def begin_chunk(self, obs_steps: int) -> None:
        self._window_start = self.now_index - obs_steps + 1

    def get_fast_observation(self, length: int) -> np.ndarray:
        """Force samples for chunk positions 1..length; indices before the
        episode start repeat the first sample, indices past the newest sample
        are zero-order-hold extensions of it."""
        idx = np.clip(np.arange(self._window_start, self._window_start + length), 0, self.now_index)
        return np.stack([self.forces[i] for i in idx])

    def execute(self, action_rel: np.ndarray, anchor_pose: np.ndarray) -> bool:
        """Convert an anchor-relative waypoint into a pose delta, apply it,
        and log the step. Returns the simulator's done flag."""
        if not np.all(np.isfinite(action_rel)):
            raise SafetyStop("non-finite action")
        waypoint = anchor_pose + np.asarray(action_rel, dtype=np.float64)
        delta = waypoint - self.current_pose
        delta[2] = wrap_angle(delta[2])
        if np.linalg.norm(delta[:2]) > SAFETY_MAX_STEP:
            raise SafetyStop(f"commanded step {np.linalg.norm(delta[:2]):.3f} m exceeds safety bound")
        return self.execute_delta(delta)

    def execute_delta(self, delta: np.ndarray) -> bool:
        pose_before = self.current_pose.copy()
        obs, force, done, info = self.sim.step(delta)
        self.actions.append(obs["proprio"] - pose_before)
        self.actions[-1][2] = wrap_angle(self.actions[-1][2])
        self.slow_obs.append(obs["slow"])
        self.proprio.append(obs["proprio"])
        self.forces.append(force)
        self.poses.append(obs["proprio"].copy())
        self.penetrations.append(info["penetration"])
        return done

    def logs(self) -> dict:
        steps = len(self.actions)
        return {
            "slow_obs": np.stack(self.slow_obs[:steps]),
            "proprio": np.stack(self.proprio[:steps]),
            "force": np.stack(self.forces[:steps]),
            "tool_pose": np.stack(self.poses[:steps]),
            "action": np.stack(self.actions) if steps else np.zeros((0, 3)),
            "penetration": np.array(self.penetrations[:steps]),
        }


def run_chunk(
    policy: DiffusionPolicy,
    adapter: EpisodeEnvAdapter,
    cache: ChunkCache,
    horizons: HorizonConfig,
    collect_attention: bool = False,
    attention_log: list | None = None,
) -> tuple[list[ControlStepResult], bool]:
    """Fast loop over one chunk; returns the step results and the done flag."""
    h_o, l = horizons.obs_steps, horizons.latency_steps
    results: list[ControlStepResult] = []
    done = False
    for i in range(horizons.exec_steps):
        t0 = time.perf_counter()
        prefix_len = h_o + i + l
        forces = adapter.get_fast_observation(prefix_len)
        if collect_attention:
            chunk, masses = policy.denoise_prefix(cache, forces, collect_attention=True)
            attention_log.append(
                {"masses": masses, "penetration": adapter.penetrations[-1]}
            )
        else:
            chunk = policy.denoise_prefix(cache, forces)
        action = chunk[-1, :ACTION_DIM]
        wall = time.perf_counter() - t0
        results.append(
            ControlStepResult(
                executed_action=action.copy(),
                full_denoised_prefix=chunk,
                wall_time=wall,
                prefix_len=prefix_len,
            )
        )
        done = adapter.execute(action, cache.anchor_pose)
        if done:
            break
    return results, done


def run_open_loop_chunk(
    policy: DiffusionPolicy,
    adapter: EpisodeEnvAdapter,
    cache: ChunkCache,
    horizons: HorizonConfig,
) -> tuple[list[ControlStepResult], bool]:
    """Denoise the whole chunk once at the boundary (force window frozen by
    zero-order hold) and execute its actions without re-planning."""
    h_o, l = horizons.obs_steps, horizons.latency_steps
    t0 = time.perf_counter()
    forces = adapter.get_fast_observation(horizons.chunk_steps)
    chunk = policy.denoise_prefix(cache, forces)
    wall = time.perf_counter() - t0
    results: list[ControlStepResult] = []
    done = False
    for i in range(horizons.exec_steps):
        row = h_o + l - 1 + i
        action = chunk[row, :ACTION_DIM]
        results.append(
            ControlStepResult(
                executed_action=action.copy(),
                full_denoised_prefix=chunk,
                wall_time=wall if i == 0 else 0.0,
                prefix_len=horizons.chunk_steps,
            )
        )
        done = adapter.execute(action, cache.anchor_pose)
        if done:
            break
    return results, done


def run_episode(
    policy,
    sim: PlanarContactSim,
    horizons: HorizonConfig,
    seed: int,
    mode: str = "closed_loop",
    compliance_params: StiffnessParams | None = None,
    config_hash: str = "",
    collect_attention: bool = False,
) -> tuple[EpisodeRecord, dict]:
    """Roll out a policy for one episode and return the logged record plus
    metrics. Accepts a chunked diffusion policy or a per-step scripted policy."""
    compliance_params = compliance_params or StiffnessParams()
    adapter = EpisodeEnvAdapter(sim)
    adapter.reset(seed)
    chunked = getattr(policy, "chunked", True)
    gen = torch.Generator().manual_seed(seed)
    attention_log: list = []
    step_results: list[ControlStepResult] = []
    done = False
    safety_stopped = False

    while not done:
        if chunked:
            frames, prop = adapter.slow_window(horizons.obs_steps)
            adapter.begin_chunk(horizons.obs_steps)
            cache = policy.start_chunk(
                frames, prop, adapter.current_pose, adapter.now_index, gen
            )
            try:
                if mode == "closed_loop":
                    results, done = run_chunk(
                        policy, adapter, cache, horizons,
                        collect_attention=collect_attention,
                        attention_log=attention_log,
                    )
                elif mode == "open_loop":
                    results, done = run_open_loop_chunk(policy, adapter, cache, horizons)
                else:
                    raise ValueError(f"unknown control mode {mode!r}")
            except SafetyStop as exc:
                sim.abort(FAIL_SAFETY_STOP)
                safety_stopped = True
                done = True
                results = []
            step_results.extend(results)
        else:
            done = adapter.execute_delta(policy.act(sim))

    ok, reason = success(sim.state, sim.task)
    record = build_episode_record(
        adapter.logs(),
        sim.task,
        seed,
        ok,
        reason,
        compliance_params,
        config_hash=config_hash,
        control_rate_hz=sim.control_rate_hz,
    )
    metrics = {
        "success": ok,
        "failure_reason": reason,
        "steps": len(adapter.actions),
        "peak_force": sim.state.peak_force,
        "safety_stopped": safety_stopped,
        "wall_times": [r.wall_time for r in step_results],
        "attention": attention_log,
        "penetration": adapter.logs()["penetration"],
    }
    return record, metrics


def run_scripted_episode(
    task: TaskSpec,
    seed: int,
    compliance_params: StiffnessParams,
    config_hash: str = "",
) -> tuple[EpisodeRecord, dict]:
    sim = PlanarContactSim(task)
    policy = ScriptedExpertPolicy(ScriptedExpert(task))
    return run_episode(
        policy,
        sim,
        HorizonConfig(),
        seed,
        mode="closed_loop",
        compliance_params=compliance_params,
        config_hash=config_hash,
    )
