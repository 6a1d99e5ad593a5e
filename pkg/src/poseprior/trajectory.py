"""Pose trajectories, their JSON-lines file format, and sliding-window sampling."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np


class TrajectoryFormatError(ValueError):
    """A trajectory file line could not be parsed or violates the schema."""


class Joint(NamedTuple):
    x: float
    y: float
    confidence: float


@dataclass(eq=False)
class PoseTrajectory:
    """One tracked person.

    ``joints`` has shape ``(len, K, 3)`` holding ``(x, y, confidence)`` per
    joint, aligned with ``frames``. Missing joints are stored as ``(0, 0, 0)``.
    """

    scene_id: str
    video_id: str
    track_id: int
    frames: np.ndarray
    joints: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64)
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if self.frames.ndim != 1 or len(self.frames) < 1:
            raise ValueError("a trajectory needs at least one frame")
        if self.joints.ndim != 3 or self.joints.shape[-1] != 3:
            raise ValueError(f"joints must have shape (len, K, 3), got {self.joints.shape}")
        if len(self.joints) != len(self.frames):
            raise ValueError("joints and frames differ in length")
        if np.any(np.diff(self.frames) <= 0):
            raise ValueError("frame indices must be strictly increasing")
        if not np.all(np.isfinite(self.joints)):
            raise ValueError("joint values must be finite")
        if np.any(self.joints[..., 2] < 0) or np.any(self.joints[..., 2] > 1):
            raise ValueError("confidences must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.frames)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PoseTrajectory):
            return NotImplemented
        return (
            self.key == other.key
            and np.array_equal(self.frames, other.frames)
            and self.joints.shape == other.joints.shape
            and np.array_equal(self.joints, other.joints)
        )

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.scene_id, self.video_id, self.track_id)

    @property
    def num_joints(self) -> int:
        return self.joints.shape[1]

    def joint(self, i: int, j: int) -> Joint:
        x, y, c = self.joints[i, j]
        return Joint(float(x), float(y), float(c))


@dataclass(eq=False)
class WindowSample:
    source: tuple[str, str, int]
    start_frame: int
    poses: np.ndarray  # (T, K, 3)
    covered_frames: np.ndarray = field(repr=False)

    @property
    def num_poses(self) -> int:
        return len(self.poses)


def _parse_record(record: dict, lineno: int) -> PoseTrajectory:
    try:
        joints = np.asarray(record["joints"], dtype=np.float64)
        if joints.ndim != 3 or joints.shape[-1] != 3:
            raise ValueError(f"joints must be a list of [[x, y, c], ...] poses, got shape {joints.shape}")
        joints[..., 2] = np.clip(joints[..., 2], 0.0, 1.0)
        return PoseTrajectory(
            scene_id=str(record["scene"]),
            video_id=str(record["video"]),
            track_id=int(record["track"]),
            frames=np.asarray(record["frames"], dtype=np.int64),
            joints=joints,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise TrajectoryFormatError(f"line {lineno}: {exc}") from exc


def load_trajectories(path: str | os.PathLike) -> list[PoseTrajectory]:
    """Read a JSON-lines trajectory file.

    Confidences outside [0, 1] are clamped. Blank lines are skipped. Raises
    :class:`TrajectoryFormatError` naming the offending line, also when the
    joint count changes within one file.
    """
    trajectories = []
    num_joints = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TrajectoryFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise TrajectoryFormatError(f"line {lineno}: expected a JSON object")
            traj = _parse_record(record, lineno)
            if num_joints is None:
                num_joints = traj.num_joints
            elif traj.num_joints != num_joints:
                raise TrajectoryFormatError(
                    f"line {lineno}: {traj.num_joints} joints per pose, file started with {num_joints}"
                )
            trajectories.append(traj)
    return trajectories


def trajectory_to_record(traj: PoseTrajectory) -> dict:
    return {
        "scene": traj.scene_id,
        "video": traj.video_id,
        "track": int(traj.track_id),
        "frames": [int(f) for f in traj.frames],
        "joints": traj.joints.tolist(),
    }


def write_trajectories(path: str | os.PathLike, trajectories: Iterable[PoseTrajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(json.dumps(trajectory_to_record(traj), separators=(",", ":")))
            fh.write("\n")


def window_offsets(length: int, window: int, stride: int) -> list[int]:
    """Start offsets of the windows covering a trajectory of ``length`` poses.

    Offsets step by ``stride`` from 0. If the last regular window stops short
    of the trajectory end, one extra window aligned to the end is appended so
    every frame is covered.
    """
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if length < window:
        return []
    offsets = list(range(0, length - window + 1, stride))
    if offsets[-1] != length - window:
        offsets.append(length - window)
    return offsets


def dilated_indices(window: int, poses_per_window: int) -> np.ndarray:
    """Indices of the poses kept inside one window (every window/T-th frame)."""
    return (np.arange(poses_per_window) * window) // poses_per_window


def sample_windows(
    traj: PoseTrajectory, window: int = 16, stride: int = 2, poses_per_window: int = 8
) -> list[WindowSample]:
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if poses_per_window < 2 or window < poses_per_window:
        raise ValueError(f"need window >= poses_per_window >= 2, got {window} and {poses_per_window}")
    picks = dilated_indices(window, poses_per_window)
    samples = []
    for off in window_offsets(len(traj), window, stride):
        samples.append(
            WindowSample(
                source=traj.key,
                start_frame=int(traj.frames[off]),
                poses=traj.joints[off + picks],
                covered_frames=traj.frames[off : off + window].copy(),
            )
        )
    return samples
