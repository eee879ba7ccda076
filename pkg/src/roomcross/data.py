"""Episodes, datasets and the conversion of raw observations to network inputs."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from .nn import NetworkSpec
from .sensors import STUDENT_DEPTH_RANGE

CAMERA_TAGS = ("center", "left", "right")
OBS_KINDS = ("depth", "rgb", "both")


def provenance_code(tag: str) -> int:
    if tag == "expert-initial":
        return 0
    if tag == "recovery":
        return 1
    if tag.startswith("dagger-"):
        return 1 + int(tag.split("-", 1)[1])
    raise ValueError(f"unknown provenance tag {tag!r}")


def provenance_tag(code: int) -> str:
    if code == 0:
        return "expert-initial"
    if code == 1:
        return "recovery"
    return f"dagger-{code - 1}"


@dataclass
class Episode:
    """One flight: per-frame pose (x, y, z, yaw), expert label, applied command
    and the student observations (depth (T, H, W) and/or rgb (T, H, W, 3))."""

    room_id: int
    poses: np.ndarray
    expert: np.ndarray
    applied: np.ndarray
    depth: Optional[np.ndarray] = None
    rgb: Optional[np.ndarray] = None
    camera: str = "center"
    provenance: str = "expert-initial"
    episode_id: int = 0

    def __post_init__(self):
        n = len(self.poses)
        if n < 1:
            raise ValueError("an episode needs at least one frame")
        for name in ("expert", "applied", "depth", "rgb"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise ValueError(f"episode {name} has {len(arr)} frames, poses have {n}")
        if self.camera not in CAMERA_TAGS:
            raise ValueError(f"unknown camera tag {self.camera!r}")
        provenance_code(self.provenance)

    def __len__(self):
        return len(self.poses)

    @property
    def obs_kind(self) -> str:
        if self.depth is not None and self.rgb is not None:
            return "both"
        return "depth" if self.depth is not None else "rgb"

    @property
    def start_pose(self) -> np.ndarray:
        return self.poses[0]


@dataclass
class Dataset:
    episodes: List[Episode] = field(default_factory=list)

    def __len__(self):
        return len(self.episodes)

    @property
    def total_frames(self) -> int:
        return sum(len(e) for e in self.episodes)

    def aggregate(self, new: List[Episode]) -> "Dataset":
        """Append-only union; existing episodes keep their order and identity."""
        next_id = max((e.episode_id for e in self.episodes), default=-1) + 1
        added = []
        for e in new:
            added.append(replace(e, episode_id=next_id))
            next_id += 1
        return Dataset(self.episodes + added)

    def provenance_counts(self) -> dict:
        counts = {}
        for e in self.episodes:
            counts[e.provenance] = counts.get(e.provenance, 0) + 1
        return counts


def observation_kind(spec: NetworkSpec) -> str:
    """Which raw observation a network consumes.

    Frames shaped (channels, height, width) are depth with one channel and rgb
    with three; flat frames are depth.
    """
    if len(spec.input_shape) == 3:
        return "depth" if spec.input_shape[0] == 1 else "rgb"
    return "depth"


def frame_features(obs: np.ndarray, spec: NetworkSpec, kind: str, dtype=np.float32) -> np.ndarray:
    """Normalize a stack of raw frames (T, H, W[, 3]) to (T, *input_shape)."""
    obs = np.asarray(obs)
    T = obs.shape[0]
    dtype = np.dtype(dtype).type
    if kind == "depth":
        x = obs.astype(dtype) / dtype(STUDENT_DEPTH_RANGE)
        x = x[:, None] if len(spec.input_shape) == 3 else x.reshape(T, -1)
    else:
        x = obs.astype(dtype) / dtype(255.0)
        x = x.transpose(0, 3, 1, 2) if len(spec.input_shape) == 3 else x.reshape(T, -1)
    if x.shape[1:] != spec.input_shape:
        raise ValueError(f"observation frames give {x.shape[1:]}, network expects {spec.input_shape}")
    return x


def stack_frames(x: np.ndarray, k: int = 5) -> np.ndarray:
    """Concatenate each frame with its k-1 predecessors, oldest first, along axis 1.

    Frames before the start repeat frame 0.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    T = len(x)
    idx = np.arange(T)[:, None] + np.arange(-(k - 1), 1)[None, :]
    idx = np.maximum(idx, 0)
    stacked = x[idx]  # (T, k, ...)
    return stacked.reshape((T, k * x.shape[1]) + x.shape[2:])


def episode_inputs(episode: Episode, spec: NetworkSpec, dtype=np.float32) -> np.ndarray:
    """Network inputs (T, *step_shape) for every frame of an episode."""
    kind = observation_kind(spec)
    obs = episode.depth if kind == "depth" else episode.rgb
    if obs is None:
        raise ValueError(f"episode {episode.episode_id} has no {kind} observations for {spec.variant}")
    x = frame_features(obs, spec, kind, dtype)
    if spec.frames_per_step > 1:
        x = stack_frames(x, spec.frames_per_step)
    return x
