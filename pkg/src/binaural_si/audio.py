"""Audio buffers, WAV I/O, framing, RIR convolution and log-mel features."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .errors import DataError, ShapeError

PIPELINE_SAMPLE_RATE = 16000

# log-mel benchmark front end
MEL_FRAME = 400  # 25 ms
MEL_HOP = 160  # 10 ms
MEL_NFFT = 512
MEL_BANDS = 40
DELTA_WIDTH = 2


@dataclass(frozen=True)
class AudioBuffer:
    """Multi-channel signal, ``samples`` has shape ``(channels, length)``."""

    samples: np.ndarray
    sample_rate: int = PIPELINE_SAMPLE_RATE

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2:
            raise ShapeError(f"samples must be 1-D or 2-D, got shape {x.shape}")
        if x.shape[0] < 1 or x.shape[1] < 1:
            raise DataError(f"empty audio buffer of shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DataError("audio buffer contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise DataError(f"invalid sample rate {self.sample_rate}")
        x.flags.writeable = False
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    def __len__(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def channel(self, c: int) -> "AudioBuffer":
        return AudioBuffer(self.samples[c : c + 1], self.sample_rate)


@dataclass(frozen=True)
class FrameSequence:
    """Stacked-channel frame vectors, ``frames`` has shape ``(N, C * L)``."""

    frames: np.ndarray
    frame_length: int
    hop: int
    channels: int

    def __len__(self) -> int:
        return self.frames.shape[0]

    def per_channel(self) -> np.ndarray:
        """View of the frames as ``(N, C, L)``."""
        return self.frames.reshape(len(self), self.channels, self.frame_length)


@dataclass(frozen=True)
class MelFeatures:
    features: np.ndarray  # (N, M)

    @property
    def n_coefficients(self) -> int:
        return self.features.shape[1]


def read_wav(path, pipeline: bool = True) -> AudioBuffer:
    """Read a 16-bit PCM or 32-bit float WAV file.

    Integer samples are scaled by 1/32768. With ``pipeline=True`` anything
    other than 16 kHz is rejected.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such WAV file: {path}")
    try:
        rate, data = scipy.io.wavfile.read(path)
    except (ValueError, EOFError) as exc:
        raise DataError(f"malformed WAV file {path}: {exc}") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise DataError(f"unsupported encoding {data.dtype} in {path}; expected int16 or float32")
    if pipeline and rate != PIPELINE_SAMPLE_RATE:
        raise DataError(f"unsupported sample rate {rate} Hz in {path}; pipeline requires {PIPELINE_SAMPLE_RATE} Hz")
    samples = samples.T if samples.ndim == 2 else samples[None, :]
    return AudioBuffer(samples, rate)


def write_wav(path, buffer: AudioBuffer, encoding: str = "float32") -> None:
    """Write ``buffer`` as ``int16`` (clipped, rounded) or ``float32`` PCM."""
    path = Path(path)
    if not path.parent.is_dir():
        raise DataError(f"target directory does not exist: {path.parent}")
    x = buffer.samples.T
    if encoding == "int16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    elif encoding == "float32":
        data = x.astype(np.float32)
    else:
        raise DataError(f"unsupported encoding {encoding!r}")
    if data.shape[1] == 1:
        data = data[:, 0]
    tmp = path.with_name(path.name + ".tmp")
    scipy.io.wavfile.write(tmp, buffer.sample_rate, data)
    os.replace(tmp, path)


def frame_signal(buffer: AudioBuffer, frame_length: int, hop: int) -> FrameSequence:
    """Split into ``ceil(Ns / hop)`` overlapping frames, zero-padded at the end.

    Frame ``l`` holds channel 0 samples ``l*hop ... l*hop + L - 1`` followed by
    the same span of channel 1, and so on.
    """
    if not (frame_length >= hop >= 1):
        raise DataError(f"need frame_length >= hop >= 1, got L={frame_length}, R={hop}")
    n_ch, n_samples = buffer.samples.shape
    n_frames = math.ceil(n_samples / hop)
    padded_len = (n_frames - 1) * hop + frame_length
    padded = np.zeros((n_ch, padded_len))
    padded[:, :n_samples] = buffer.samples
    windows = np.lib.stride_tricks.sliding_window_view(padded, frame_length, axis=1)[:, ::hop]
    frames = np.ascontiguousarray(windows[:, :n_frames].transpose(1, 0, 2)).reshape(n_frames, n_ch * frame_length)
    return FrameSequence(frames, frame_length, hop, n_ch)


def unframe(seq: FrameSequence, n_samples: int) -> AudioBuffer:
    """Inverse of :func:`frame_signal` for disjoint tilings (``L == R``)."""
    if seq.frame_length != seq.hop:
        raise DataError("unframe requires frame_length == hop")
    x = seq.per_channel().transpose(1, 0, 2).reshape(seq.channels, -1)
    return AudioBuffer(x[:, :n_samples])


def convolve_rir(speech: AudioBuffer, rir: AudioBuffer) -> AudioBuffer:
    """Convolve mono speech with each RIR channel, truncated to the speech length."""
    if speech.sample_rate != rir.sample_rate:
        raise DataError(f"sample-rate mismatch: speech {speech.sample_rate} Hz, RIR {rir.sample_rate} Hz")
    if speech.channels != 1:
        raise ShapeError(f"speech must be mono, got {speech.channels} channels")
    a = speech.samples[0]
    out = np.stack([scipy.signal.fftconvolve(a, h)[: len(a)] for h in rir.samples])
    return AudioBuffer(out, speech.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int = MEL_BANDS,
    n_fft: int = MEL_NFFT,
    sample_rate: int = PIPELINE_SAMPLE_RATE,
    fmin: float = 0.0,
    fmax: float | None = None,
) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape ``(n_mels, n_fft//2 + 1)``."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def stft_magnitude(x: np.ndarray, frame: int, hop: int, n_fft: int) -> np.ndarray:
    """Hann-windowed magnitude spectrogram over full frames only, ``(N, n_fft//2+1)``."""
    if len(x) < frame:
        raise DataError(f"signal of {len(x)} samples is shorter than one {frame}-sample frame")
    window = scipy.signal.get_window("hann", frame)
    frames = np.lib.stride_tricks.sliding_window_view(x, frame)[::hop]
    return np.abs(np.fft.rfft(frames * window, n=n_fft, axis=1))


def deltas(feat: np.ndarray, width: int = DELTA_WIDTH) -> np.ndarray:
    """Regression deltas along time (axis 0) with edge replication."""
    denom = 2 * sum(n * n for n in range(1, width + 1))
    padded = np.pad(feat, ((width, width), (0, 0)), mode="edge")
    n_frames = feat.shape[0]
    out = np.zeros_like(feat)
    for n in range(1, width + 1):
        out += n * (padded[width + n : width + n + n_frames] - padded[width - n : width - n + n_frames])
    return out / denom


def _log_mel_with_deltas(x: np.ndarray, fbank: np.ndarray) -> np.ndarray:
    spec = stft_magnitude(x, MEL_FRAME, MEL_HOP, MEL_NFFT)
    logmel = np.log(np.maximum(spec @ fbank.T, 1e-10))
    d1 = deltas(logmel)
    d2 = deltas(d1)
    return np.concatenate([logmel, d1, d2], axis=1)


def mel_features(buffer: AudioBuffer, mode: str = "single") -> MelFeatures:
    """Log-mel + delta + double-delta features (120 per channel).

    ``mode="single"`` uses channel 0, ``mode="concat"`` stacks both channels
    of a binaural buffer into 240 coefficients per frame.
    """
    if buffer.sample_rate != PIPELINE_SAMPLE_RATE:
        raise DataError(f"mel features need {PIPELINE_SAMPLE_RATE} Hz input, got {buffer.sample_rate}")
    fbank = mel_filterbank()
    if mode == "single":
        feats = _log_mel_with_deltas(buffer.samples[0], fbank)
    elif mode == "concat":
        if buffer.channels != 2:
            raise ShapeError(f"concat mode needs a 2-channel buffer, got {buffer.channels} channel(s)")
        feats = np.concatenate([_log_mel_with_deltas(ch, fbank) for ch in buffer.samples], axis=1)
    else:
        raise DataError(f"unknown mel mode {mode!r}; expected 'single' or 'concat'")
    return MelFeatures(feats)
