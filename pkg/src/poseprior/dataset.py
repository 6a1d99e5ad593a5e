"""Stacked window arrays: trajectories -> decomposed windows -> motion-embedded network inputs."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .motion import MotionPrior, fuse, pose_scales
from .preprocess import decompose_array, degenerate_mask
from .trajectory import PoseTrajectory, sample_windows

log = logging.getLogger(__name__)


@dataclass
class WindowArrays:
    """All windows of a trajectory set, decomposed and stacked along axis 0."""

    normalized: np.ndarray  # (W, T, K, 2)
    confidences: np.ndarray  # (W, T, K)
    centers: np.ndarray  # (W, T, 2)
    boxes: np.ndarray  # (W, T, 2)
    sources: list  # (scene, video, track) per window
    start_frames: np.ndarray  # (W,)
    covered: list  # frame indices scored by each window
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.normalized)

    def displacements(self) -> np.ndarray:
        from .motion import displacements

        return displacements(self.centers, self.boxes)

    def subset(self, idx) -> "WindowArrays":
        idx = np.asarray(idx)
        return WindowArrays(
            normalized=self.normalized[idx],
            confidences=self.confidences[idx],
            centers=self.centers[idx],
            boxes=self.boxes[idx],
            sources=[self.sources[i] for i in idx],
            start_frames=self.start_frames[idx],
            covered=[self.covered[i] for i in idx],
        )


def build_windows(
    trajectories: Sequence[PoseTrajectory], window: int = 16, stride: int = 2, poses_per_window: int = 8
) -> WindowArrays:
    """Sample and decompose every window; windows holding a degenerate pose are dropped."""
    poses, sources, starts, covered = [], [], [], []
    for traj in trajectories:
        for w in sample_windows(traj, window, stride, poses_per_window):
            poses.append(w.poses)
            sources.append(w.source)
            starts.append(w.start_frame)
            covered.append(w.covered_frames)
    k = trajectories[0].num_joints if trajectories else 0
    if not poses:
        return WindowArrays(
            normalized=np.zeros((0, poses_per_window, k, 2)),
            confidences=np.zeros((0, poses_per_window, k)),
            centers=np.zeros((0, poses_per_window, 2)),
            boxes=np.zeros((0, poses_per_window, 2)),
            sources=[],
            start_frames=np.zeros(0, dtype=np.int64),
            covered=[],
        )
    stacked = np.stack(poses)
    keep = ~degenerate_mask(stacked).any(axis=1)
    dropped = int((~keep).sum())
    if dropped:
        log.info("dropping %d window(s) containing a pose without confident joints", dropped)
    stacked = stacked[keep]
    center, box, normalized, conf = decompose_array(stacked)
    kept = np.flatnonzero(keep)
    return WindowArrays(
        normalized=normalized,
        confidences=conf,
        centers=center,
        boxes=box,
        sources=[sources[i] for i in kept],
        start_frames=np.asarray(starts, dtype=np.int64)[kept],
        covered=[covered[i] for i in kept],
        dropped=dropped,
    )


def motion_inputs(
    windows: WindowArrays, prior: MotionPrior | None, fuse_mode: str = "divide"
) -> tuple[np.ndarray, np.ndarray]:
    """Network inputs and per-pose scales. ``prior=None`` disables motion embedding (s = 1)."""
    if prior is None:
        scales = np.ones(windows.normalized.shape[:2])
        return windows.normalized.copy(), scales
    _, scales = pose_scales(windows.centers, windows.boxes, prior)
    return fuse(windows.normalized, scales[..., None, None], fuse_mode), scales
