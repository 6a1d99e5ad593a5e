"""Split raw poses into a global box (center, size) and a box-normalized local pose."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .trajectory import WindowSample

BOX_EPS = 1e-6


class DegeneratePoseError(ValueError):
    """Raised when a pose has no joint with positive confidence."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True, eq=False)
class DecomposedPose:
    center: np.ndarray  # (2,)
    box: np.ndarray  # (2,) width, height
    normalized: np.ndarray  # (K, 2)
    confidences: np.ndarray  # (K,)

    def __eq__(self, other):
        if not isinstance(other, DecomposedPose):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("center", "box", "normalized", "confidences")
        )


def decompose_array(poses: np.ndarray):
    """Vectorized decomposition of ``(..., K, 3)`` raw poses.

    Returns ``(center, box, normalized, confidences)`` with shapes ``(..., 2)``,
    ``(..., 2)``, ``(..., K, 2)`` and ``(..., K)``. Zero-confidence joints do not
    take part in the box and are mapped to ``(0, 0)``. Raises
    :class:`DegeneratePoseError` with ``offset`` set to the flat index of the
    first pose without any confident joint.
    """
    poses = np.asarray(poses, dtype=np.float64)
    xy = poses[..., :2]
    conf = poses[..., 2]
    valid = conf > 0
    has_any = valid.any(axis=-1)
    if not np.all(has_any):
        bad = int(np.flatnonzero(~has_any.ravel())[0])
        raise DegeneratePoseError(f"pose at offset {bad} has no joint with positive confidence", offset=bad)
    v = valid[..., None]
    lo = np.where(v, xy, np.inf).min(axis=-2)
    hi = np.where(v, xy, -np.inf).max(axis=-2)
    center = 0.5 * (lo + hi)
    box = np.maximum(hi - lo, BOX_EPS)
    normalized = np.where(v, (xy - lo[..., None, :]) / box[..., None, :], 0.0)
    return center, box, normalized, conf.copy()


def decompose(pose: np.ndarray) -> DecomposedPose:
    """Decompose one ``(K, 3)`` pose of ``(x, y, confidence)`` joints."""
    pose = np.asarray(pose, dtype=np.float64)
    if pose.ndim != 2 or pose.shape[-1] != 3:
        raise ValueError(f"expected a (K, 3) pose, got shape {pose.shape}")
    try:
        center, box, normalized, conf = decompose_array(pose)
    except DegeneratePoseError:
        raise DegeneratePoseError("pose has no joint with positive confidence") from None
    return DecomposedPose(center, box, normalized, conf)


def recompose(d: DecomposedPose) -> np.ndarray:
    """Inverse of :func:`decompose`: raw ``(K, 3)`` joints from a decomposed pose."""
    lo = d.center - 0.5 * d.box
    xy = np.where((d.confidences > 0)[:, None], lo + d.normalized * d.box, 0.0)
    return np.concatenate([xy, d.confidences[:, None]], axis=1)


def decompose_sequence(window: WindowSample) -> list[DecomposedPose]:
    out = []
    for i, pose in enumerate(window.poses):
        try:
            out.append(decompose(pose))
        except DegeneratePoseError:
            raise DegeneratePoseError(
                f"window {window.source} @ {window.start_frame}: pose at offset {i} is degenerate", offset=i
            ) from None
    return out


def degenerate_mask(poses: np.ndarray) -> np.ndarray:
    """True for every pose in ``(..., K, 3)`` with no confident joint."""
    return ~(np.asarray(poses)[..., 2] > 0).any(axis=-1)
