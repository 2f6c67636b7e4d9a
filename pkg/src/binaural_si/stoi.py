"""Intrusive intelligibility labels.

``stoi_intrusive`` follows the usual short-time objective intelligibility
recipe (VAD, one-third-octave envelopes, 384 ms segments, SDR clipping,
band/segment correlation) run directly on the 16 kHz STFT grid.
``better_ear_label`` takes the better of the two ears and stands in for the
binaural measure when no externally computed labels are available.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioBuffer
from .errors import DataError, ShapeError

log = logging.getLogger(__name__)

_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class StoiConfig:
    band_count: int = 15
    lowest_center_hz: float = 150.0
    window_s: float = 0.0256
    n_fft: int = 512
    segment_length: int = 30
    sdr_clip_db: float = -15.0
    vad_range_db: float = 40.0

    def __post_init__(self):
        for name in ("band_count", "lowest_center_hz", "window_s", "n_fft", "vad_range_db"):
            if not getattr(self, name) > 0:
                raise DataError(f"StoiConfig.{name} must be positive")
        if self.segment_length < 2:
            raise DataError("StoiConfig.segment_length must be >= 2")


def third_octave_bands(cfg: StoiConfig, sample_rate: int) -> np.ndarray:
    """Rectangular band matrix ``(bands, n_fft//2+1)``; empty bands are dropped."""
    freqs = np.arange(cfg.n_fft // 2 + 1) * sample_rate / cfg.n_fft
    centers = cfg.lowest_center_hz * 2.0 ** (np.arange(cfg.band_count) / 3.0)
    rows = []
    for cf in centers:
        lo = int(np.argmin(np.abs(freqs - cf * 2.0 ** (-1 / 6))))
        hi = int(np.argmin(np.abs(freqs - cf * 2.0 ** (1 / 6))))
        if hi <= lo:
            log.warning("one-third-octave band at %.0f Hz has no FFT bins; dropped", cf)
            continue
        row = np.zeros(len(freqs))
        row[lo:hi] = 1.0
        rows.append(row)
    return np.array(rows)


def _frames(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(x, frame)[::hop]


def _mono(buf) -> np.ndarray:
    if isinstance(buf, AudioBuffer):
        if buf.channels != 1:
            raise ShapeError(f"expected a mono buffer, got {buf.channels} channels")
        return buf.samples[0]
    return np.asarray(buf, dtype=np.float64).ravel()


def stoi_intrusive(clean, degraded, cfg: StoiConfig = StoiConfig(), sample_rate: int = 16000) -> float:
    """Short-time objective intelligibility of ``degraded`` against ``clean`` in [0, 1]."""
    x = _mono(clean)
    y = _mono(degraded)
    if isinstance(clean, AudioBuffer):
        sample_rate = clean.sample_rate
    if len(x) != len(y):
        raise ShapeError(f"clean and degraded lengths differ: {len(x)} vs {len(y)}")
    frame = int(round(cfg.window_s * sample_rate))
    hop = frame // 2
    if len(x) < frame:
        raise DataError(f"signal of {len(x)} samples is shorter than one analysis frame")
    window = np.hanning(frame + 2)[1:-1]
    xf = _frames(x, frame, hop) * window
    yf = _frames(y, frame, hop) * window

    energy = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    if not np.any(np.linalg.norm(xf, axis=1) > 0):
        raise DataError("clean signal is silent")
    keep = energy > energy.max() - cfg.vad_range_db
    xf, yf = xf[keep], yf[keep]
    n_seg = cfg.segment_length
    if len(xf) < n_seg:
        raise DataError(f"only {len(xf)} active frames; need at least {n_seg} for one segment")

    bands = third_octave_bands(cfg, sample_rate)
    x_env = np.sqrt(bands @ (np.abs(np.fft.rfft(xf, cfg.n_fft, axis=1)) ** 2).T)  # (J, frames)
    y_env = np.sqrt(bands @ (np.abs(np.fft.rfft(yf, cfg.n_fft, axis=1)) ** 2).T)

    # (J, segments, N)
    xs = np.lib.stride_tricks.sliding_window_view(x_env, n_seg, axis=1)
    ys = np.lib.stride_tricks.sliding_window_view(y_env, n_seg, axis=1)
    ny = np.linalg.norm(ys, axis=2, keepdims=True)
    alpha = np.linalg.norm(xs, axis=2, keepdims=True) / np.where(ny > 0, ny, 1.0)
    clip = 1.0 + 10.0 ** (-cfg.sdr_clip_db / 20.0)
    yn = np.minimum(ys * alpha, xs * clip)

    xc = xs - xs.mean(axis=2, keepdims=True)
    yc = yn - yn.mean(axis=2, keepdims=True)
    denom = np.linalg.norm(xc, axis=2) * np.linalg.norm(yc, axis=2)
    # a flat envelope carries no correlation information; count it as 0
    corr = np.where(denom > 0, np.sum(xc * yc, axis=2) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(np.clip(np.mean(corr), 0.0, 1.0))


def better_ear_label(clean: AudioBuffer, degraded: AudioBuffer, cfg: StoiConfig = StoiConfig()) -> float:
    """Max over channels of the per-ear intrusive score."""
    if clean.samples.shape != degraded.samples.shape:
        raise ShapeError(f"clean {clean.samples.shape} and degraded {degraded.samples.shape} differ in shape")
    return max(
        stoi_intrusive(clean.samples[c], degraded.samples[c], cfg, clean.sample_rate) for c in range(clean.channels)
    )


def ingest_labels(path) -> dict[str, float]:
    """Read a JSON-lines label file of ``{"utterance_id": ..., "score": ...}`` objects."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"label file not found: {path}")
    labels: dict[str, float] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                uid = obj["utterance_id"]
                score = float(obj["score"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed label line ({exc})") from exc
            if not isinstance(uid, str):
                raise DataError(f"{path}:{lineno}: utterance_id must be a string")
            if uid in labels:
                raise DataError(f"{path}:{lineno}: duplicate utterance_id {uid!r}")
            if not (math.isfinite(score) and 0.0 <= score <= 1.0):
                raise DataError(f"{path}:{lineno}: score {score} for {uid!r} outside [0, 1]")
            labels[uid] = score
    return labels


def write_labels(path, labels: dict[str, float]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for uid, score in labels.items():
            fh.write(json.dumps({"utterance_id": uid, "score": score}) + "\n")
