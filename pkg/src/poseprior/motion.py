"""Motion prior: displacement statistics, prior fitting, and pose scaling by motion probability.

The normalized displacement of a pose is the distance its box center travels
to the next pose, divided by ``w + h`` of the starting box. A continuous prior
is fitted to these values over normal training data; at embedding time each
pose's displacement is turned into a scale ``s = alpha * pdf(v) / pdf(mode) +
beta`` and the normalized pose is divided by it, so rare motion enlarges the
pose the network sees.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import special

from .preprocess import DecomposedPose

ALPHA = 0.9
BETA = 0.1
FAMILIES = ("rayleigh", "gaussian", "uniform")
FUSE_MODES = ("divide", "multiply", "add")
HIST_BINS = 100


class PriorFitError(ValueError):
    pass


# ---------------------------------------------------------------------------
# displacement
# ---------------------------------------------------------------------------


def displacement(prev: DecomposedPose, cur: DecomposedPose) -> float:
    dx, dy = cur.center - prev.center
    return math.hypot(dx, dy) / (prev.box[0] + prev.box[1])


def displacements(centers: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Normalized displacements along axis -2: ``(..., T, 2)`` -> ``(..., T-1)``."""
    step = np.diff(centers, axis=-2)
    v = np.sqrt(step[..., 0] ** 2 + step[..., 1] ** 2)
    return v / (boxes[..., :-1, 0] + boxes[..., :-1, 1])


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def bin_width(self) -> float:
        return float(self.edges[1] - self.edges[0])

    def to_dict(self) -> dict:
        return {"edges": self.edges.tolist(), "counts": self.counts.tolist()}


def histogram_edges(max_value: float, bins: int = HIST_BINS) -> np.ndarray:
    width = max_value / bins if max_value > 0 else 1.0
    return np.arange(bins + 1) * width


def histogram_of(values: np.ndarray, edges: np.ndarray) -> Histogram:
    """Fixed-width counts; the last bin is closed on the right, values past it land in it."""
    values = np.asarray(values, dtype=np.float64).ravel()
    width = edges[1] - edges[0]
    idx = np.minimum((values / width).astype(np.int64), len(edges) - 2)
    return Histogram(edges=edges, counts=np.bincount(idx, minlength=len(edges) - 1))


def window_displacements(windows: Iterable[Sequence[DecomposedPose]]) -> np.ndarray:
    out = []
    for w in windows:
        centers = np.stack([p.center for p in w])
        boxes = np.stack([p.box for p in w])
        out.append(displacements(centers, boxes))
    if not out:
        raise ValueError("no windows given")
    return np.concatenate(out)


def collect_statistics(windows: Iterable[Sequence[DecomposedPose]], bins: int = HIST_BINS) -> Histogram:
    """Histogram of all adjacent-pose displacements, bin width ``max(v) / bins``."""
    v = window_displacements(windows)
    return histogram_of(v, histogram_edges(float(v.max()), bins))


# ---------------------------------------------------------------------------
# priors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MotionPrior:
    """A fitted displacement distribution on ``[0, inf)``.

    The gaussian family is truncated at zero and renormalized so that it is a
    proper density over displacements; its parameters are still the moments
    of the samples.
    """

    family: str
    params: dict = field(hash=False)
    mode_density: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown prior family {self.family!r}")
        if not self.mode_density:
            object.__setattr__(self, "mode_density", float(self.pdf(self.mode())))

    def mode(self) -> float:
        p = self.params
        if self.family == "rayleigh":
            return p["sigma"]
        if self.family == "gaussian":
            return max(p["mu"], 0.0)
        return p["lo"]

    def pdf(self, v):
        v = np.asarray(v, dtype=np.float64)
        p = self.params
        if self.family == "rayleigh":
            s2 = p["sigma"] ** 2
            dens = v / s2 * np.exp(-(v * v) / (2 * s2))
        elif self.family == "gaussian":
            mu, sigma = p["mu"], p["sigma"]
            mass = special.ndtr(mu / sigma)
            dens = np.exp(-0.5 * ((v - mu) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi) * mass)
        else:
            lo, hi = p["lo"], p["hi"]
            dens = np.where((v >= lo) & (v <= hi), 1.0 / (hi - lo), 0.0)
        return np.where(v >= 0, dens, 0.0)

    def relative_density(self, v):
        """``pdf(v) / pdf(mode)`` in ``[0, 1]``, evaluated without overflow for large ``v``."""
        v = np.asarray(v, dtype=np.float64)
        p = self.params
        if self.family == "rayleigh":
            r = np.minimum(v / p["sigma"], 1e150)  # past ~40 sigma the density is 0 anyway
            out = r * np.exp(0.5 * (1.0 - r * r))
        elif self.family == "gaussian":
            mu, sigma = p["mu"], p["sigma"]
            m = self.mode()
            z = np.minimum(np.abs(v - mu) / sigma, 1e150)
            out = np.exp(-0.5 * (z * z - ((m - mu) / sigma) ** 2))
        else:
            out = np.where((v >= p["lo"]) & (v <= p["hi"]), 1.0, 0.0)
        return np.clip(np.where(v >= 0, out, 0.0), 0.0, 1.0)

    def to_dict(self) -> dict:
        return {"family": self.family, "params": dict(self.params), "mode_density": self.mode_density}

    @classmethod
    def from_dict(cls, d: dict) -> "MotionPrior":
        return cls(d["family"], {k: float(v) for k, v in d["params"].items()}, float(d["mode_density"]))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MotionPrior":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def fit_prior(samples, family: str = "rayleigh") -> MotionPrior:
    """Maximum-likelihood (rayleigh) or moment (gaussian, uniform) fit on raw displacements."""
    v = np.asarray(samples, dtype=np.float64).ravel()
    if family not in FAMILIES:
        raise ValueError(f"unknown prior family {family!r}; expected one of {FAMILIES}")
    if len(v) < 2:
        raise PriorFitError(f"need at least 2 samples, got {len(v)}")
    if not np.all(np.isfinite(v)) or np.any(v < 0):
        raise PriorFitError("displacement samples must be finite and non-negative")
    if family == "rayleigh":
        sigma = math.sqrt(float(np.sum(v * v)) / (2 * len(v)))
        if sigma <= 0:
            raise PriorFitError("all samples are zero; rayleigh scale is degenerate")
        return MotionPrior("rayleigh", {"sigma": sigma})
    if family == "gaussian":
        mu, sigma = float(v.mean()), float(v.std())
        if sigma <= 0:
            raise PriorFitError("identical samples; gaussian spread is degenerate")
        return MotionPrior("gaussian", {"mu": mu, "sigma": sigma})
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        raise PriorFitError("identical samples; uniform support is empty")
    return MotionPrior("uniform", {"lo": lo, "hi": hi})


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ScaledPose:
    scaled: np.ndarray  # (K, 2)
    scale: float
    displacement: float


def scale_factor(v, prior: MotionPrior, alpha: float = ALPHA, beta: float = BETA):
    """Map displacement(s) to a scale in ``[beta, alpha + beta]``, largest at the prior's mode."""
    s = alpha * prior.relative_density(v) + beta
    return float(s) if np.ndim(s) == 0 else s


def fuse(normalized: np.ndarray, s, mode: str = "divide") -> np.ndarray:
    """Combine normalized coordinates with scale(s); ``s`` broadcasts against ``normalized``."""
    if mode == "divide":
        return normalized / s
    if mode == "multiply":
        return normalized * s
    if mode == "add":
        return normalized + s
    raise ValueError(f"unknown fuse mode {mode!r}; expected one of {FUSE_MODES}")


def pose_scales(centers: np.ndarray, boxes: np.ndarray, prior: MotionPrior) -> tuple[np.ndarray, np.ndarray]:
    """Per-pose displacement and scale for ``(..., T, 2)`` windows.

    The first pose has no predecessor and borrows the first displacement.
    """
    if centers.shape[-2] < 2:
        raise ValueError("a window needs at least 2 poses to measure motion")
    v = displacements(centers, boxes)
    v = np.concatenate([v[..., :1], v], axis=-1)
    return v, scale_factor(v, prior)


def embed_window(window: Sequence[DecomposedPose], prior: MotionPrior, mode: str = "divide") -> list[ScaledPose]:
    if len(window) < 2:
        raise ValueError("a window needs at least 2 poses to measure motion")
    centers = np.stack([p.center for p in window])
    boxes = np.stack([p.box for p in window])
    v, s = pose_scales(centers, boxes, prior)
    return [
        ScaledPose(scaled=fuse(p.normalized, si, mode), scale=float(si), displacement=float(vi))
        for p, si, vi in zip(window, s, v)
    ]
