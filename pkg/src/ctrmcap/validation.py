"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

from typing import Any, Sequence

import numpy as np
from sklearn.utils.validation import check_array

from .data import VideoSample


def check_frames(frames: Any, d_v: int | None = None, max_frames: int | None = None) -> np.ndarray:
    """Validate one video as a finite float64 [T, d_v] matrix."""
    arr = check_array(frames, dtype=np.float64, ensure_2d=True, ensure_all_finite=True)
    if d_v is not None and arr.shape[1] != d_v:
        raise ValueError(f"expected {d_v} features per frame, got {arr.shape[1]}")
    if max_frames is not None and arr.shape[0] > max_frames:
        raise ValueError(f"{arr.shape[0]} frames exceed max_frames={max_frames}")
    return arr


def check_videos(X: Any, d_v: int | None = None, max_frames: int | None = None) -> list[np.ndarray]:
    """Accept samples or raw frame matrices; return validated frame matrices."""
    if isinstance(X, (VideoSample, np.ndarray)) and not (isinstance(X, np.ndarray) and X.ndim == 3):
        raise TypeError("X must be a sequence of videos, not a single video")
    videos = [x.frames if isinstance(x, VideoSample) else x for x in X]
    if not videos:
        raise ValueError("X contains no videos")
    out = [check_frames(v, d_v, max_frames) for v in videos]
    widths = {v.shape[1] for v in out}
    if len(widths) > 1:
        raise ValueError(f"videos disagree on feature width: {sorted(widths)}")
    return out


def check_samples(X: Any) -> list[VideoSample]:
    """Training input must be annotated samples."""
    samples = list(X)
    if not samples:
        raise ValueError("X contains no samples")
    bad = [i for i, s in enumerate(samples) if not isinstance(s, VideoSample)]
    if bad:
        raise TypeError(f"items {bad[:5]} are not VideoSample instances")
    check_videos(samples)
    return samples


def check_probability(value: float, name: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_positive_int(value: Any, name: str, allow_zero: bool = False) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < 0 or (value == 0 and not allow_zero):
        raise ValueError(f"{name} must be {'non-negative' if allow_zero else 'positive'}, got {value}")
    return int(value)


def same_length(a: Sequence, b: Sequence, what: str) -> None:
    if len(a) != len(b):
        raise ValueError(f"{what}: {len(a)} != {len(b)}")
