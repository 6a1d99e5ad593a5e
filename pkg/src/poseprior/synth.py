"""Synthetic walking skeletons with speed anomalies, for end-to-end checks without real footage."""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import build_windows
from .scoring import ScoreSeries, auc, frame_scores
from .trajectory import PoseTrajectory

# COCO-17 joint layout in units of body height, origin at the body center, y down
COCO17_TEMPLATE = np.array(
    [
        [0.00, -0.42],  # nose
        [-0.03, -0.46],  # left eye
        [0.03, -0.46],  # right eye
        [-0.06, -0.44],  # left ear
        [0.06, -0.44],  # right ear
        [-0.12, -0.30],  # left shoulder
        [0.12, -0.30],  # right shoulder
        [-0.18, -0.12],  # left elbow
        [0.18, -0.12],  # right elbow
        [-0.20, 0.04],  # left wrist
        [0.20, 0.04],  # right wrist
        [-0.08, 0.05],  # left hip
        [0.08, 0.05],  # right hip
        [-0.09, 0.28],  # left knee
        [0.09, 0.28],  # right knee
        [-0.10, 0.50],  # left ankle
        [0.10, 0.50],  # right ankle
    ]
)


@dataclass
class SynthSpec:
    n_normal: int = 200
    n_anomalous: int = 200
    normal_speed: float = 0.01
    anomaly_speed_multiplier: float = 5.0
    skeleton: np.ndarray = field(default_factory=lambda: COCO17_TEMPLATE.copy(), repr=False)
    jitter_std: float = 0.004
    length: int = 64
    n_scenes: int = 4
    height_range: tuple = (60.0, 200.0)
    heading_std: float = 0.2
    confidence_range: tuple = (0.5, 1.0)
    seed: int = 0

    def __post_init__(self):
        self.skeleton = np.asarray(self.skeleton, dtype=np.float64)
        if self.anomaly_speed_multiplier <= 1:
            raise ValueError("anomaly_speed_multiplier must exceed 1")
        if self.n_normal < 0 or self.n_anomalous < 0:
            raise ValueError("trajectory counts must be non-negative")
        if self.jitter_std < 0 or self.normal_speed <= 0:
            raise ValueError("jitter_std must be non-negative and normal_speed positive")
        if self.length < 2 or self.n_scenes < 1:
            raise ValueError("length must be at least 2 and n_scenes positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["skeleton"] = self.skeleton.tolist()
        d["height_range"] = list(self.height_range)
        d["confidence_range"] = list(self.confidence_range)
        return d


def _walk(rng, spec: SynthSpec, speed: float) -> np.ndarray:
    """Joints ``(length, K, 3)`` of one skeleton walking with Rayleigh-distributed step lengths."""
    height = rng.uniform(*spec.height_range)
    body = spec.skeleton * height
    span = body.max(axis=0) - body.min(axis=0)
    sigma_px = speed * float(span.sum())
    steps = rng.rayleigh(sigma_px, size=spec.length - 1)
    heading = rng.uniform(0, 2 * np.pi) + np.cumsum(rng.normal(0.0, spec.heading_std, spec.length - 1))
    moves = np.stack([steps * np.cos(heading), steps * np.sin(heading)], axis=1)
    start = rng.uniform(0.0, 1000.0, size=2)
    centers = start + np.concatenate([np.zeros((1, 2)), np.cumsum(moves, axis=0)])
    k = len(body)
    xy = centers[:, None, :] + body[None] + rng.normal(0.0, spec.jitter_std * height, (spec.length, k, 2))
    conf = rng.uniform(*spec.confidence_range, size=(spec.length, k, 1))
    return np.concatenate([xy, conf], axis=2)


def generate(spec: SynthSpec) -> tuple[list[PoseTrajectory], dict[tuple[str, str], np.ndarray]]:
    """One single-person video per trajectory; anomalous videos are labelled 1 on every frame.

    Returns the trajectories and a ``{(scene, video): labels}`` map.
    """
    rng = np.random.default_rng(spec.seed)
    kinds = np.array([0] * spec.n_normal + [1] * spec.n_anomalous)
    rng.shuffle(kinds)
    trajectories, labels = [], {}
    for i, anomalous in enumerate(kinds):
        speed = spec.normal_speed * (spec.anomaly_speed_multiplier if anomalous else 1.0)
        scene = f"{i % spec.n_scenes + 1:02d}"
        video = f"{scene}_{i:04d}"
        trajectories.append(
            PoseTrajectory(scene, video, 0, np.arange(spec.length), _walk(rng, spec, speed))
        )
        labels[(scene, video)] = np.full(spec.length, int(anomalous), dtype=np.int64)
    return trajectories, labels


def write_labels(path: str | os.PathLike, labels: dict[tuple[str, str], np.ndarray]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["scene", "video", "frame", "label"])
        for (scene, video), lab in labels.items():
            for frame, value in enumerate(lab):
                w.writerow([scene, video, frame, int(value)])


def read_labels(path: str | os.PathLike) -> dict[tuple[str, str], np.ndarray]:
    rows: dict[tuple[str, str], dict[int, int]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault((row["scene"], row["video"]), {})[int(row["frame"])] = int(row["label"])
    out = {}
    for key, frames in rows.items():
        lab = np.full(max(frames) + 1, -1, dtype=np.int64)
        for f, v in frames.items():
            lab[f] = v
        out[key] = lab
    return out


def displacement_series(
    trajectories, labels, window: int = 16, stride: int = 2, poses_per_window: int = 8
) -> list[ScoreSeries]:
    """Per-frame scores from the mean normalized displacement of each window, no learning involved."""
    wins = build_windows(trajectories, window, stride, poses_per_window)
    window_scores = wins.displacements().mean(axis=1)
    per_video: dict[tuple[str, str], list] = {key: [] for key in labels}
    for src, cov, a in zip(wins.sources, wins.covered, window_scores):
        per_video.setdefault((src[0], src[1]), []).append((cov, src[2], float(a)))
    series = []
    for (scene, video), items in per_video.items():
        lab = labels.get((scene, video))
        length = len(lab) if lab is not None else max(int(c.max()) for c, _, _ in items) + 1
        series.append(ScoreSeries(scene, video, frame_scores(items, length), lab))
    return series


def oracle_auc_floor(spec: SynthSpec, window: int = 16, stride: int = 2, poses_per_window: int = 8) -> float:
    """Frame-level AUC of thresholding raw window displacement on data generated from ``spec``.

    Certifies the benchmark is separable before any model is trained. Only
    meaningful for clearly faster anomalies, so multipliers below 3 are refused.
    """
    if spec.anomaly_speed_multiplier < 3:
        raise ValueError("the displacement oracle needs anomaly_speed_multiplier >= 3")
    trajectories, labels = generate(spec)
    series = displacement_series(trajectories, labels, window, stride, poses_per_window)
    scores = np.concatenate([s.frame_scores for s in series])
    labs = np.concatenate([s.labels for s in series])
    return auc(scores, labs)
