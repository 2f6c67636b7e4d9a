"""Synthetic stand-ins for speech, binaural RIR and noise corpora.

Used by the ``toy`` preset and the tests so the full pipeline runs without
downloading LibriSpeech, AIR or MUSAN.  The "speech" is a train of voiced
syllables: harmonic complexes with a jittered pitch, shaped by two or three
random formant resonances and a raised-cosine envelope, separated by pauses.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import scipy.signal

from .audio import AudioBuffer, write_wav

FS = 16000


def synth_speech(rng: np.random.Generator, duration: float, fs: int = FS) -> np.ndarray:
    n = int(duration * fs)
    out = np.zeros(n)
    pos = int(rng.uniform(0.05, 0.2) * fs)
    f0_base = rng.uniform(90, 220)
    while pos < n:
        syl = int(rng.uniform(0.08, 0.3) * fs)
        end = min(n, pos + syl)
        t = np.arange(end - pos) / fs
        f0 = f0_base * rng.uniform(0.85, 1.15) * (1 + 0.05 * np.sin(2 * np.pi * rng.uniform(2, 6) * t))
        phase = 2 * np.pi * np.cumsum(f0) / fs
        n_harm = int(min(30, 3800 // f0_base))
        src = sum(np.sin(k * phase) / k for k in range(1, n_harm + 1))
        if rng.random() < 0.3:  # fricative-like burst
            src = rng.standard_normal(len(t))
        for _ in range(int(rng.integers(2, 4))):
            fc = rng.uniform(300, 3500)
            b, a = scipy.signal.iirpeak(fc, Q=rng.uniform(2, 6), fs=fs)
            src = src + 2.0 * scipy.signal.lfilter(b, a, src)
        env = np.sin(np.pi * np.arange(len(t)) / max(len(t), 1)) ** 2
        out[pos:end] += src * env * rng.uniform(0.3, 1.0)
        pos = end + int(rng.uniform(0.03, 0.25) * fs)
    peak = np.max(np.abs(out))
    return out / peak * rng.uniform(0.3, 0.7) if peak > 0 else out


def synth_rir(rng: np.random.Generator, fs: int = FS, length: float = 0.4) -> np.ndarray:
    """Two-channel RIR: direct path with an interaural delay plus an exponential tail."""
    n = int(length * fs)
    rt60 = rng.uniform(0.15, 0.7)
    decay = np.exp(-6.9 * np.arange(n) / (rt60 * fs))
    itd = int(rng.integers(0, 12))  # up to 0.7 ms
    ild = rng.uniform(0.5, 1.0)
    onset = int(rng.integers(10, 40))
    h = np.zeros((2, n))
    h[0, onset] = 1.0
    h[1, onset + itd] = ild
    tail_gain = rng.uniform(0.1, 0.4)
    for c in range(2):
        tail = rng.standard_normal(n) * decay * tail_gain
        tail[: onset + 20] = 0.0
        h[c] += tail
    return h / np.max(np.abs(h))


def synth_noise(rng: np.random.Generator, duration: float, fs: int = FS) -> np.ndarray:
    """Stationary coloured noise or babble of synthetic talkers."""
    n = int(duration * fs)
    kind = rng.integers(3)
    if kind == 0:
        x = rng.standard_normal(n)
        b, a = scipy.signal.butter(2, rng.uniform(500, 4000), fs=fs)
        x = scipy.signal.lfilter(b, a, x)
    elif kind == 1:
        # 1/f^alpha noise
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.fft.rfftfreq(n, 1 / fs)
        f[0] = f[1]
        x = np.fft.irfft(spec / f ** (rng.uniform(0.3, 1.0) / 2), n)
    else:
        x = sum(synth_speech(rng, duration, fs) for _ in range(6))
    return 0.3 * x / np.max(np.abs(x))


def make_toy_assets(
    out_dir,
    seed: int,
    utterances: dict[str, int] | None = None,
    n_rirs: int = 8,
    n_noises: int = 8,
    utterance_seconds: tuple[float, float] = (1.5, 3.0),
    noise_seconds: float = 12.0,
) -> dict[str, Path]:
    """Write ``speech/<split>/``, ``rir/`` and ``noise/`` WAV directories.

    Returns a mapping with keys ``speech``, ``rir`` and ``noise``.
    """
    out_dir = Path(out_dir)
    utterances = utterances or {"train": 20, "dev": 5, "test": 5}
    root = np.random.SeedSequence(seed)
    s_speech, s_rir, s_noise = root.spawn(3)
    dirs = {"speech": out_dir / "speech", "rir": out_dir / "rir", "noise": out_dir / "noise"}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(s_speech)
    for split, count in utterances.items():
        split_dir = dirs["speech"] / split
        split_dir.mkdir(exist_ok=True)
        for i in range(count):
            x = synth_speech(rng, rng.uniform(*utterance_seconds))
            write_wav(split_dir / f"{split}{i:04d}.wav", AudioBuffer(x))
    rng = np.random.default_rng(s_rir)
    for i in range(n_rirs):
        write_wav(dirs["rir"] / f"rir{i:03d}.wav", AudioBuffer(synth_rir(rng)))
    rng = np.random.default_rng(s_noise)
    for i in range(n_noises):
        write_wav(dirs["noise"] / f"noise{i:03d}.wav", AudioBuffer(synth_noise(rng, noise_seconds)))
    return dirs
