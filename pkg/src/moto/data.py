"""Trajectories, the on-disk episode container, and the growing trajectory store.

Alignment convention: entry t of a trajectory holds the observation at time t,
the action that *led to* it, and the reward that *arrived with* it. The reset
observation is not stored, so an episode of N policy decisions has T = N
entries and entry 0 pairs the first action with its outcome.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError

MAGIC = b"MOTODS1\n"
FORMAT = "moto-ds-v1"


@dataclass
class Trajectory:
    """One episode. All arrays share length T >= 2.

    obs: uint8, (T, C, H, W); actions: float32, (T, A), in [-1, 1];
    rewards: float32, (T,); success: bool, (T,).
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    success: np.ndarray
    episode_success: bool

    def __post_init__(self):
        t = len(self.obs)
        if t < 2:
            raise DataError(f"trajectory length must be >= 2, got {t}")
        for name in ("actions", "rewards", "success"):
            if len(getattr(self, name)) != t:
                raise DataError(f"trajectory field {name} has length "
                                f"{len(getattr(self, name))}, expected {t}")
        if self.obs.dtype != np.uint8 or self.obs.ndim != 4:
            raise DataError("obs must be uint8 with shape (T, C, H, W)")
        self.actions = np.asarray(self.actions, dtype=np.float32)
        self.rewards = np.asarray(self.rewards, dtype=np.float32)
        self.success = np.asarray(self.success, dtype=bool)
        self.episode_success = bool(self.episode_success)

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())

    def obs_float(self) -> np.ndarray:
        """Observations as float32 in [0, 1], shape (T, C, H, W)."""
        return self.obs.astype(np.float32) / 255.0


_FIELD_DTYPES = {"obs": "|u1", "actions": "<f4", "rewards": "<f4", "success": "|b1"}


def save_dataset(trajectories, path: str, env_info: dict | None = None,
                 manifest_extra: dict | None = None, write_manifest: bool = True) -> dict:
    """Write episodes to a self-describing binary container plus a text manifest.

    Layout: 8-byte magic, little-endian uint64 header length, JSON header
    (episode index with per-field dtype/shape/offset), then raw array bytes.
    Identical inputs produce byte-identical files.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise DataError("refusing to write an empty dataset")
    episodes = []
    blobs = []
    offset = 0
    for traj in trajectories:
        entry = {"length": len(traj), "episode_success": traj.episode_success, "fields": {}}
        for name, dtype in _FIELD_DTYPES.items():
            arr = np.ascontiguousarray(getattr(traj, name)).astype(dtype)
            raw = arr.tobytes()
            entry["fields"][name] = {"dtype": dtype, "shape": list(arr.shape), "offset": offset}
            blobs.append(raw)
            offset += len(raw)
        episodes.append(entry)
    header = {
        "format": FORMAT,
        "env": env_info or {},
        "n_episodes": len(episodes),
        "episodes": episodes,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)

    manifest = {
        "format": FORMAT,
        "n_episodes": len(trajectories),
        "n_transitions": int(sum(len(t) for t in trajectories)),
        "mean_return": round(float(np.mean([t.episode_return for t in trajectories])), 6),
        "success_rate": round(float(np.mean([t.episode_success for t in trajectories])), 6),
    }
    for key, value in (env_info or {}).items():
        manifest[f"env_{key}"] = value
    manifest.update(manifest_extra or {})
    if write_manifest:
        with open(manifest_path(path), "w") as f:
            for key in sorted(manifest):
                f.write(f"{key}: {manifest[key]}\n")
    return manifest


def manifest_path(dataset_path: str) -> str:
    return dataset_path + ".manifest.txt"


def load_manifest(dataset_path: str) -> dict:
    out = {}
    with open(manifest_path(dataset_path)) as f:
        for line in f:
            if ":" in line:
                key, value = line.split(":", 1)
                out[key.strip()] = value.strip()
    return out


def load_dataset(path: str) -> tuple[list[Trajectory], dict]:
    """Read a container written by save_dataset; returns (episodes, env info)."""
    if not os.path.exists(path):
        raise DataError(f"dataset file not found: {path}")
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise DataError(f"{path}: not a {FORMAT} container (bad magic)")
        header_len = int.from_bytes(f.read(8), "little")
        try:
            header = json.loads(f.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DataError(f"{path}: corrupt header ({e})")
        if header.get("format") != FORMAT:
            raise DataError(f"{path}: unsupported format {header.get('format')!r}")
        data = f.read()
    trajectories = []
    for entry in header["episodes"]:
        arrays = {}
        for name, meta in entry["fields"].items():
            dtype = np.dtype(meta["dtype"])
            shape = tuple(meta["shape"])
            start = meta["offset"]
            count = int(np.prod(shape))
            end = start + count * dtype.itemsize
            if end > len(data):
                raise DataError(f"{path}: truncated data section")
            arrays[name] = np.frombuffer(data[start:end], dtype=dtype).reshape(shape).copy()
        trajectories.append(Trajectory(
            obs=arrays["obs"], actions=arrays["actions"], rewards=arrays["rewards"],
            success=arrays["success"], episode_success=entry["episode_success"]))
    return trajectories, header.get("env", {})


class SegmentBatch:
    """Fixed-length sub-trajectories stacked for training.

    obs (B, L, C, H, W) uint8; actions (B, L, A); rewards (B, L);
    success (B, L); episode_success (B,).
    """

    def __init__(self, obs, actions, rewards, success, episode_success):
        self.obs = obs
        self.actions = actions
        self.rewards = rewards
        self.success = success
        self.episode_success = episode_success

    def __len__(self):
        return len(self.obs)


class TrajectoryStore:
    """Append-only episode store with uniform fixed-length segment sampling."""

    def __init__(self, trajectories=None):
        self._trajectories: list[Trajectory] = []
        for traj in trajectories or []:
            self.append(traj)

    def __len__(self) -> int:
        return len(self._trajectories)

    def __getitem__(self, idx: int) -> Trajectory:
        return self._trajectories[idx]

    @property
    def trajectories(self) -> tuple:
        return tuple(self._trajectories)

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self._trajectories)

    def append(self, traj: Trajectory) -> None:
        if not isinstance(traj, Trajectory):
            raise DataError(f"store accepts Trajectory, got {type(traj).__name__}")
        self._trajectories.append(traj)

    def sample_segments(self, batch: int, seq_len: int, rng: np.random.Generator) -> SegmentBatch:
        """Draw `batch` segments of length seq_len, uniform over (episode, start) pairs.

        Segments never cross episode boundaries; episodes shorter than seq_len
        are never sampled.
        """
        counts = np.array([max(0, len(t) - seq_len + 1) for t in self._trajectories])
        total = int(counts.sum())
        if total == 0:
            raise DataError(f"no episode is long enough for seq_len={seq_len}")
        cumulative = np.cumsum(counts)
        flat = rng.integers(0, total, size=batch)
        ep_idx = np.searchsorted(cumulative, flat, side="right")
        start = flat - (cumulative[ep_idx] - counts[ep_idx])
        obs, actions, rewards, success, ep_ok = [], [], [], [], []
        for e, s in zip(ep_idx, start):
            traj = self._trajectories[e]
            sl = slice(int(s), int(s) + seq_len)
            obs.append(traj.obs[sl])
            actions.append(traj.actions[sl])
            rewards.append(traj.rewards[sl])
            success.append(traj.success[sl])
            ep_ok.append(traj.episode_success)
        return SegmentBatch(
            obs=np.stack(obs), actions=np.stack(actions), rewards=np.stack(rewards),
            success=np.stack(success), episode_success=np.array(ep_ok, dtype=bool))
