"""Demonstration data pipeline: episode container, windowing, normalization.

Episode container format (one file per episode)::

    magic   8 bytes  b"CDPEP001"
    hlen    uint32 little-endian, byte length of the header
    header  UTF-8 JSON: {"fields": [{"name", "shape", "dtype"}...], "meta": {...}}
    payload raw little-endian arrays, C order, concatenated in header order

Field dtypes are declared per field: bulky observation streams are 32-bit
floats; forces, poses, actions and the compliance-derived columns are 64-bit
so that recomputing virtual targets from stored data reproduces the stored
values exactly. Write-then-read round-trips are bit-exact.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .compliance import (
    Pose,
    StiffnessParams,
    Wrench,
    adaptive_stiffness,
    build_stiffness_matrix,
    virtual_target,
    wrap_angle,
)
from .config import HorizonConfig
from .simworld import TaskSpec

logger = logging.getLogger(__name__)

MAGIC = b"CDPEP001"

# (name, on-disk dtype)
FIELD_SCHEMA = (
    ("slow_obs", "<f4"),
    ("proprio", "<f4"),
    ("force", "<f8"),
    ("tool_pose", "<f8"),
    ("action", "<f8"),
    ("virtual_target", "<f8"),
    ("stiffness", "<f8"),
    ("timestamps", "<f8"),
)


@dataclass
class EpisodeRecord:
    """One demonstration or evaluation episode, all arrays step-aligned."""

    slow_obs: np.ndarray        # (T, slow_dim)
    proprio: np.ndarray         # (T, 3)
    force: np.ndarray           # (T, 2) measured wrench
    tool_pose: np.ndarray       # (T, 3) pose before the step's action
    action: np.ndarray          # (T, 3) achieved per-step pose delta
    virtual_target: np.ndarray  # (T, 3)
    stiffness: np.ndarray       # (T,) adaptive stiffness scalar
    timestamps: np.ndarray      # (T,)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        lengths = {name: getattr(self, name).shape[0] for name, _ in FIELD_SCHEMA}
        if len(set(lengths.values())) != 1:
            raise ValueError(f"per-step arrays disagree on length: {lengths}")
        for name, _ in FIELD_SCHEMA:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in field {name}")

    def __len__(self) -> int:
        return self.slow_obs.shape[0]


def write_episode(path: str | Path, record: EpisodeRecord) -> None:
    fields = []
    payloads = []
    for name, dtype in FIELD_SCHEMA:
        arr = np.ascontiguousarray(getattr(record, name), dtype=dtype)
        fields.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        payloads.append(arr.tobytes())
    header = json.dumps(
        {"fields": fields, "meta": record.meta}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for p in payloads:
            fh.write(p)


def read_episode(path: str | Path) -> EpisodeRecord:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not an episode file (bad magic {magic!r})")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for f in header["fields"]:
            dt = np.dtype(f["dtype"])
            count = int(np.prod(f["shape"])) if f["shape"] else 1
            buf = fh.read(count * dt.itemsize)
            arrays[f["name"]] = np.frombuffer(buf, dtype=dt).reshape(f["shape"]).copy()
    return EpisodeRecord(meta=header["meta"], **arrays)


def episode_header(path: str | Path) -> dict:
    """Parse just the JSON header of an episode file."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not an episode file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(hlen).decode("utf-8"))


def build_episode_record(
    logs: dict,
    task: TaskSpec,
    seed: int,
    success: bool,
    failure_reason: str | None,
    compliance_params: StiffnessParams,
    config_hash: str = "",
    control_rate_hz: float = 10.0,
) -> EpisodeRecord:
    """Assemble a record from raw step logs, deriving the virtual-target and
    stiffness columns from the logged measured force and pose."""
    force = np.asarray(logs["force"], dtype=np.float64)
    pose = np.asarray(logs["tool_pose"], dtype=np.float64)
    steps = force.shape[0]
    vt = np.zeros((steps, 3))
    k_adp = np.zeros(steps)
    for j in range(steps):
        w = Wrench(force=force[j])
        k_adp[j] = adaptive_stiffness(w.magnitude(), compliance_params)
        stiff = build_stiffness_matrix(w, compliance_params)
        vt[j] = virtual_target(Pose.from_array(pose[j]), w, stiff).as_array()
    return EpisodeRecord(
        slow_obs=np.asarray(logs["slow_obs"], dtype=np.float32),
        proprio=np.asarray(logs["proprio"], dtype=np.float32),
        force=force,
        tool_pose=pose,
        action=np.asarray(logs["action"], dtype=np.float64),
        virtual_target=vt,
        stiffness=k_adp,
        timestamps=np.arange(steps, dtype=np.float64) / control_rate_hz,
        meta={
            "task": task.to_dict(),
            "task_kind": task.kind,
            "seed": int(seed),
            "success": bool(success),
            "failure_reason": failure_reason,
            "config_hash": config_hash,
            "control_rate_hz": control_rate_hz,
        },
    )


# -- action-space conventions ------------------------------------------------


def compute_relative_actions(poses: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Pose differences from an anchor pose: positions subtracted, angles
    wrapped into (-pi, pi]."""
    poses = np.asarray(poses, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    rel = np.empty_like(poses)
    rel[:, :2] = poses[:, :2] - anchor[:2]
    rel[:, 2] = wrap_angle(poses[:, 2] - anchor[2])
    return rel


def target_dim_for(aux: str) -> int:
    return {"none": 3, "force": 5, "virtual_target": 7}[aux]


@dataclass
class TrainingWindow:
    slow_frames: np.ndarray  # (h_o, slow_dim)
    proprio: np.ndarray      # (h_o, 3)
    forces: np.ndarray       # (h_a, 2)
    target: np.ndarray       # (h_a, target_dim) action chunk, possibly augmented
    anchor_pose: np.ndarray  # (3,)
    anchor_index: int


def make_windows(
    episode: EpisodeRecord,
    horizons: HorizonConfig,
    aux: str = "virtual_target",
) -> list[TrainingWindow]:
    """All stride-1 training windows of an episode.

    The anchor is the last slow-obs step; chunk position s covers simulator
    step ``anchor - obs_steps + s``. Forces and actions at position s share
    that step's timestamp. Positions past the episode end repeat the terminal
    pose (zero residual motion) and hold the last force sample.
    """
    h_o, h_a = horizons.obs_steps, horizons.chunk_steps
    steps = len(episode)
    if steps < h_a:
        logger.warning("episode shorter than the action horizon (%d < %d); skipped", steps, h_a)
        return []

    windows = []
    for anchor in range(h_o - 1, steps):
        js = np.arange(h_a) + anchor - h_o + 1
        step_idx = np.minimum(js, steps - 1)
        waypoint_idx = np.minimum(js + 1, steps - 1)
        anchor_pose = episode.tool_pose[anchor]
        actions = compute_relative_actions(episode.tool_pose[waypoint_idx], anchor_pose)
        if aux == "none":
            target = actions
        elif aux == "force":
            target = np.concatenate([actions, episode.force[step_idx]], axis=1)
        elif aux == "virtual_target":
            target = np.concatenate(
                [
                    actions,
                    episode.virtual_target[step_idx],
                    episode.stiffness[step_idx, None],
                ],
                axis=1,
            )
        else:
            raise ValueError(f"unknown aux mode {aux!r}")
        windows.append(
            TrainingWindow(
                slow_frames=episode.slow_obs[anchor - h_o + 1 : anchor + 1].astype(np.float64),
                proprio=episode.proprio[anchor - h_o + 1 : anchor + 1].astype(np.float64),
                forces=episode.force[step_idx],
                target=target,
                anchor_pose=anchor_pose.copy(),
                anchor_index=anchor,
            )
        )
    return windows


# -- normalization ------------------------------------------------------------


@dataclass
class NormalizationStats:
    """Frozen training-set statistics: percentile bounds for denoising targets
    (min-max to [-1, 1]), mean/std for force and slow-observation inputs."""

    target_lower: np.ndarray
    target_upper: np.ndarray
    force_mean: np.ndarray
    force_std: np.ndarray
    slow_mean: np.ndarray
    slow_std: np.ndarray
    proprio_mean: np.ndarray
    proprio_std: np.ndarray

    DEGENERATE_EPS = 1e-12

    def _width(self):
        return self.target_upper - self.target_lower

    def normalize_target(self, x: np.ndarray) -> np.ndarray:
        w = self._width()
        degenerate = w < self.DEGENERATE_EPS
        safe_w = np.where(degenerate, 1.0, w)
        out = 2.0 * (x - self.target_lower) / safe_w - 1.0
        return np.where(degenerate, 0.0, out)

    def denormalize_target(self, x: np.ndarray) -> np.ndarray:
        w = self._width()
        degenerate = w < self.DEGENERATE_EPS
        out = self.target_lower + (x + 1.0) / 2.0 * np.where(degenerate, 1.0, w)
        return np.where(degenerate, self.target_lower, out)

    def normalize_force(self, f: np.ndarray) -> np.ndarray:
        return (f - self.force_mean) / self.force_std

    def normalize_slow(self, s: np.ndarray) -> np.ndarray:
        return (s - self.slow_mean) / self.slow_std

    def normalize_proprio(self, p: np.ndarray) -> np.ndarray:
        return (p - self.proprio_mean) / self.proprio_std

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


def compute_normalization_stats(
    episodes: list[EpisodeRecord],
    horizons: HorizonConfig,
    aux: str = "virtual_target",
) -> NormalizationStats:
    targets, forces, slows, proprios = [], [], [], []
    for ep in episodes:
        for w in make_windows(ep, horizons, aux):
            targets.append(w.target)
            forces.append(w.forces)
            slows.append(w.slow_frames)
            proprios.append(w.proprio)
    if not targets:
        raise ValueError("no training windows; dataset too small for the horizons")
    targets = np.concatenate(targets, axis=0)
    forces = np.concatenate(forces, axis=0)
    slows = np.concatenate(slows, axis=0)
    proprios = np.concatenate(proprios, axis=0)

    lower, upper = np.percentile(targets, [1.0, 99.0], axis=0)

    def safe_std(x):
        s = x.std(axis=0)
        return np.where(s < 1e-12, 1.0, s)

    return NormalizationStats(
        target_lower=lower,
        target_upper=upper,
        force_mean=forces.mean(axis=0),
        force_std=safe_std(forces),
        slow_mean=slows.mean(axis=0),
        slow_std=safe_std(slows),
        proprio_mean=proprios.mean(axis=0),
        proprio_std=safe_std(proprios),
    )


# -- demonstration generation --------------------------------------------------


def generate_demos(
    task: TaskSpec,
    n: int,
    seed: int,
    out_dir: str | Path,
    compliance_params: StiffnessParams | None = None,
    config_hash: str = "",
    min_success_rate: float = 0.8,
) -> dict:
    """Run the scripted expert until ``n`` successful episodes are collected
    and write them (plus a manifest) to ``out_dir``. Failed attempts are
    discarded and resampled; aborts if the running success rate drops below
    ``min_success_rate``."""
    from .runtime import run_scripted_episode  # deferred: runtime depends on this module

    compliance_params = compliance_params or StiffnessParams()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    files, episode_seeds = [], []
    attempts = 0
    successes = 0
    while successes < n:
        attempt_seed = seed + attempts
        attempts += 1
        record, metrics = run_scripted_episode(
            task, attempt_seed, compliance_params, config_hash=config_hash
        )
        if metrics["success"]:
            fname = f"episode_{successes:05d}.bin"
            write_episode(out_dir / fname, record)
            files.append(fname)
            episode_seeds.append(attempt_seed)
            successes += 1
        if attempts >= 10 and successes / attempts < min_success_rate:
            raise RuntimeError(
                f"expert success rate {successes}/{attempts} below "
                f"{min_success_rate:.0%} on task {task.kind!r}; aborting demo generation"
            )

    manifest = {
        "task": task.to_dict(),
        "n_episodes": n,
        "seed_base": seed,
        "episode_seeds": episode_seeds,
        "attempts": attempts,
        "success_flags": [True] * n,
        "files": files,
        "config_hash": config_hash,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return manifest


def load_dataset(dataset_dir: str | Path) -> tuple[list[EpisodeRecord], dict]:
    dataset_dir = Path(dataset_dir)
    manifest = json.loads((dataset_dir / "manifest.json").read_text(encoding="utf-8"))
    episodes = [read_episode(dataset_dir / f) for f in manifest["files"]]
    return episodes, manifest


def train_val_split(
    episodes: list[EpisodeRecord], val_fraction: float
) -> tuple[list[EpisodeRecord], list[EpisodeRecord]]:
    """Deterministic split by episode index; statistics must only ever be
    computed on the training part."""
    n_val = int(round(len(episodes) * val_fraction))
    if n_val == 0:
        return episodes, []
    return episodes[:-n_val], episodes[-n_val:]
