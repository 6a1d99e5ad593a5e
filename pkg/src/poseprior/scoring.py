"""Frame-level anomaly scores: window reconstruction error, per-frame aggregation, scene normalization, AUC."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import stt
from .dataset import WindowArrays, build_windows, motion_inputs
from .motion import MotionPrior


class MetricError(ValueError):
    pass


@dataclass
class ScoreSeries:
    scene_id: str
    video_id: str
    frame_scores: np.ndarray
    labels: np.ndarray | None = None
    normalized: bool = False

    def __post_init__(self):
        self.frame_scores = np.asarray(self.frame_scores, dtype=np.float64)
        if not np.all(np.isfinite(self.frame_scores)):
            raise ValueError(f"{self.video_id}: non-finite frame score")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.frame_scores):
                raise ValueError(
                    f"{self.video_id}: {len(self.labels)} labels for {len(self.frame_scores)} frames"
                )


def window_score(recon: np.ndarray, target: np.ndarray) -> float:
    """L1 reconstruction error of one window, summed over all joints and both axes."""
    recon = np.asarray(recon, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if recon.shape != target.shape:
        raise ValueError(f"shape mismatch {recon.shape} vs {target.shape}")
    d = np.abs(recon - target)
    if np.isnan(d).any():
        raise FloatingPointError("NaN in window score input")
    return float(d.sum())


def window_scores(recon: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Batched :func:`window_score` over axis 0."""
    d = np.abs(np.asarray(recon, dtype=np.float64) - target)
    if np.isnan(d).any():
        raise FloatingPointError("NaN in window score input")
    return d.reshape(len(d), -1).sum(axis=1)


def frame_scores(items: Iterable[tuple[Sequence[int], object, float]], video_length: int) -> np.ndarray:
    """Per-frame score from ``(covered_frames, person, score)`` window records.

    Overlapping windows of one person are averaged per frame; the frame score
    is the maximum over persons. Frames no window covers score 0.
    """
    sums: dict[object, np.ndarray] = {}
    counts: dict[object, np.ndarray] = {}
    for frames, person, score in items:
        frames = np.asarray(frames, dtype=np.int64)
        frames = frames[(frames >= 0) & (frames < video_length)]
        if person not in sums:
            sums[person] = np.zeros(video_length)
            counts[person] = np.zeros(video_length)
        sums[person][frames] += score
        counts[person][frames] += 1
    out = np.zeros(video_length)
    for person, s in sums.items():
        c = counts[person]
        mean = np.divide(s, c, out=np.zeros(video_length), where=c > 0)
        np.maximum(out, mean, out=out)
    return out


def normalize_per_scene(series: Sequence[ScoreSeries]) -> list[ScoreSeries]:
    """Min-max rescale every scene's frames to [0, 1]; constant scenes become all zeros."""
    lo: dict[str, float] = {}
    hi: dict[str, float] = {}
    for s in series:
        if len(s.frame_scores):
            lo[s.scene_id] = min(lo.get(s.scene_id, np.inf), float(s.frame_scores.min()))
            hi[s.scene_id] = max(hi.get(s.scene_id, -np.inf), float(s.frame_scores.max()))
    out = []
    for s in series:
        a, b = lo.get(s.scene_id, 0.0), hi.get(s.scene_id, 0.0)
        scaled = (s.frame_scores - a) / (b - a) if b > a else np.zeros_like(s.frame_scores)
        out.append(replace(s, frame_scores=scaled, normalized=True))
    return out


def auc(scores, labels) -> float:
    """ROC-AUC as the Mann-Whitney rank statistic; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != len(labels):
        raise MetricError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both positive and negative frames")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def labelled_arrays(series: Sequence[ScoreSeries]) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate all frames that carry a known (0/1) label."""
    scores, labels = [], []
    for s in series:
        if s.labels is None:
            continue
        known = s.labels >= 0
        scores.append(s.frame_scores[known])
        labels.append(s.labels[known])
    if not scores:
        raise MetricError("no labelled frames")
    return np.concatenate(scores), np.concatenate(labels)


def evaluate(series: Sequence[ScoreSeries]) -> dict:
    """Overall AUC across all scenes plus per-scene and per-video AUC where both classes occur."""
    scores, labels = labelled_arrays(series)
    report = {"auc": auc(scores, labels), "frames": int(len(scores)), "scenes": {}, "videos": {}}
    by_scene: dict[str, list[ScoreSeries]] = {}
    for s in series:
        by_scene.setdefault(s.scene_id, []).append(s)
        if s.labels is not None:
            known = s.labels >= 0
            try:
                report["videos"][s.video_id] = auc(s.frame_scores[known], s.labels[known])
            except MetricError:
                pass
    for scene, group in sorted(by_scene.items()):
        try:
            report["scenes"][scene] = auc(*labelled_arrays(group))
        except MetricError:
            pass
    return report


# ---------------------------------------------------------------------------
# model inference
# ---------------------------------------------------------------------------


def reconstruct(inputs: np.ndarray, params, config: stt.STTConfig, batch_size: int = 256) -> np.ndarray:
    out = [stt.forward(inputs[i : i + batch_size], params, config) for i in range(0, len(inputs), batch_size)]
    if not out:
        return np.zeros_like(inputs)
    return np.concatenate(out)


def model_window_scores(
    windows: WindowArrays,
    params,
    config: stt.STTConfig,
    prior: MotionPrior | None,
    fuse_mode: str = "divide",
    batch_size: int = 256,
) -> np.ndarray:
    dtype = params["embed.e"].dtype
    inputs, _ = motion_inputs(windows, prior, fuse_mode)
    recon = reconstruct(inputs.astype(dtype), params, config, batch_size)
    return window_scores(recon, windows.normalized)


def assemble_series(
    windows: WindowArrays,
    scores: np.ndarray,
    labels: dict[tuple[str, str], np.ndarray] | None = None,
    video_lengths: dict[tuple[str, str], int] | None = None,
) -> list[ScoreSeries]:
    """Group window scores by video into per-frame series.

    Videos listed in ``labels`` or ``video_lengths`` but without any window
    still get an all-zero series.
    """
    labels = labels or {}
    lengths = dict(video_lengths or {})
    items: dict[tuple[str, str], list] = {}
    for src, cov, a in zip(windows.sources, windows.covered, scores):
        key = (src[0], src[1])
        items.setdefault(key, []).append((cov, src[2], float(a)))
        lengths[key] = max(lengths.get(key, 0), int(cov.max()) + 1)
    for key, lab in labels.items():
        lengths[key] = max(lengths.get(key, 0), len(lab))
    series = []
    for key in sorted(lengths):
        n = lengths[key]
        lab = labels.get(key)
        if lab is not None and len(lab) < n:
            lab = np.concatenate([lab, np.full(n - len(lab), -1, dtype=np.int64)])
        series.append(ScoreSeries(key[0], key[1], frame_scores(items.get(key, []), n), lab))
    return series


def score_trajectories(
    trajectories,
    params,
    config: stt.STTConfig,
    prior: MotionPrior | None,
    *,
    fuse_mode: str = "divide",
    window: int = 16,
    stride: int = 2,
    labels=None,
    video_lengths=None,
    normalize: bool = True,
    batch_size: int = 256,
) -> list[ScoreSeries]:
    """Full inference: windows -> reconstruction errors -> per-frame, per-scene-normalized series."""
    wins = build_windows(trajectories, window, stride, config.num_poses)
    scores = model_window_scores(wins, params, config, prior, fuse_mode, batch_size)
    series = assemble_series(wins, scores, labels, video_lengths)
    return normalize_per_scene(series) if normalize else series


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def write_scores(path: str | os.PathLike, series: Sequence[ScoreSeries]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["scene", "video", "frame", "score", "label"])
        for s in series:
            labels = s.labels if s.labels is not None else np.full(len(s.frame_scores), -1)
            for frame, (score, lab) in enumerate(zip(s.frame_scores, labels)):
                w.writerow([s.scene_id, s.video_id, frame, repr(float(score)), int(lab)])


def read_scores(path: str | os.PathLike) -> list[ScoreSeries]:
    rows: dict[tuple[str, str], list[tuple[int, float, int]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault((row["scene"], row["video"]), []).append(
                (int(row["frame"]), float(row["score"]), int(row["label"]))
            )
    series = []
    for (scene, video), items in rows.items():
        n = max(f for f, _, _ in items) + 1
        scores = np.zeros(n)
        labels = np.full(n, -1, dtype=np.int64)
        for f, sc, lab in items:
            scores[f] = sc
            labels[f] = lab
        series.append(ScoreSeries(scene, video, scores, labels if (labels >= 0).any() else None))
    return series


def attach_labels(series: Sequence[ScoreSeries], labels: dict[tuple[str, str], np.ndarray]) -> list[ScoreSeries]:
    out = []
    for s in series:
        lab = labels.get((s.scene_id, s.video_id))
        if lab is None:
            out.append(s)
            continue
        aligned = np.full(len(s.frame_scores), -1, dtype=np.int64)
        n = min(len(lab), len(aligned))
        aligned[:n] = lab[:n]
        out.append(replace(s, labels=aligned))
    return out


def plot_series(series: Sequence[ScoreSeries], out_dir: str | os.PathLike) -> list[Path]:
    """One PNG per video: score curve with anomalous frames shaded."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for s in series:
        fig, ax = plt.subplots(figsize=(8, 2.6))
        frames = np.arange(len(s.frame_scores))
        if s.labels is not None:
            ax.fill_between(frames, 0, 1, where=s.labels == 1, step="mid", color="tab:red", alpha=0.25,
                            transform=ax.get_xaxis_transform(), label="anomaly")
        ax.plot(frames, s.frame_scores, color="tab:blue", lw=1.2, label="score")
        ax.set_xlim(0, max(len(frames) - 1, 1))
        ax.set_xlabel("frame")
        ax.set_ylabel("anomaly score")
        ax.set_title(f"scene {s.scene_id} / video {s.video_id}")
        ax.legend(loc="upper right", fontsize=8)
        fig.tight_layout()
        path = out_dir / f"{s.scene_id}__{s.video_id}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written
