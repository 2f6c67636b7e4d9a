"""Binaural noisy-reverberant scene simulation.

A scene is ``x_c = a * h_c + g * v_c``: mono speech convolved with a
two-channel RIR plus a diffuse two-channel noise whose inter-channel
coherence follows the spherically isotropic model.  The noise gain ``g`` is
set from the P.56 active speech level of the reverberant speech in channel 0.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .audio import AudioBuffer, FrameSequence, convolve_rir, read_wav, write_wav
from .errors import DataError, ShapeError

log = logging.getLogger(__name__)

GENERATOR_VERSION = "binaural_si.scene/1"


@dataclass(frozen=True)
class NoiseFieldSpec:
    mic_distance: float = 0.17  # metres
    speed_of_sound: float = 343.0
    fft_size: int = 1024

    def __post_init__(self):
        if not self.mic_distance > 0:
            raise DataError(f"mic_distance must be > 0, got {self.mic_distance}")
        if not self.speed_of_sound > 0:
            raise DataError(f"speed_of_sound must be > 0, got {self.speed_of_sound}")
        if self.fft_size < 2 or self.fft_size % 2:
            raise DataError(f"fft_size must be even and >= 2, got {self.fft_size}")

    def coherence(self, freqs) -> np.ndarray:
        """Target coherence ``sin(x)/x`` with ``x = 2*pi*f*d/c``."""
        # np.sinc(u) = sin(pi u)/(pi u)
        return np.sinc(2.0 * np.asarray(freqs, dtype=np.float64) * self.mic_distance / self.speed_of_sound)


def gen_isotropic_noise(
    src0: np.ndarray, src1: np.ndarray, spec: NoiseFieldSpec = NoiseFieldSpec(), sample_rate: int = 16000
) -> AudioBuffer:
    """Mix two independent noise signals into a diffuse binaural noise field.

    Each STFT bin is mixed with the Cholesky factor of
    ``[[1, G(f)], [G(f), 1]]``; both rows have unit norm so channel spectra
    are kept when the sources share a long-term spectrum.
    """
    src0 = np.asarray(src0, dtype=np.float64).ravel()
    src1 = np.asarray(src1, dtype=np.float64).ravel()
    if len(src0) != len(src1):
        raise DataError(f"noise sources differ in length: {len(src0)} vs {len(src1)}")
    n = len(src0)
    nfft = spec.fft_size
    freqs = np.fft.rfftfreq(nfft, 1.0 / sample_rate)
    gamma = spec.coherence(freqs)
    if np.any(np.abs(gamma) > 1.0 + 1e-12):
        raise DataError("target coherence exceeds 1 in magnitude")
    gamma = np.clip(gamma, -1.0, 1.0)
    stft_kw = dict(fs=sample_rate, window="hann", nperseg=nfft, noverlap=nfft // 2)
    _, _, x0 = scipy.signal.stft(src0, **stft_kw)
    _, _, x1 = scipy.signal.stft(src1, **stft_kw)
    y1 = gamma[:, None] * x0 + np.sqrt(1.0 - gamma**2)[:, None] * x1
    _, out0 = scipy.signal.istft(x0, **stft_kw)
    _, out1 = scipy.signal.istft(y1, **stft_kw)
    return AudioBuffer(np.stack([out0[:n], out1[:n]]), sample_rate)


def active_speech_level(
    buffer: AudioBuffer,
    channel: int = 0,
    margin_db: float = 15.9,
    hangover_s: float = 0.2,
    time_constant_s: float = 0.03,
    n_thresholds: int = 15,
) -> float:
    """Active speech level in dB relative to full scale (P.56 method B).

    The envelope is a two-pass first-order smoother of ``|x|``.  For each
    candidate threshold ``2**-15 ... 2**-1`` a sample counts as active while
    the envelope is at or above the threshold, plus a hangover.  The active
    level is interpolated where (active level - threshold) drops to the
    margin.
    """
    x = buffer.samples[channel]
    fs = buffer.sample_rate
    sq = float(np.dot(x, x))
    if sq == 0.0:
        raise DataError("no activity: signal is all zeros")
    g = math.exp(-1.0 / (fs * time_constant_s))
    env = scipy.signal.lfilter([1 - g], [1, -g], np.abs(x))
    env = scipy.signal.lfilter([1 - g], [1, -g], env)
    hang = int(math.ceil(fs * hangover_s))
    thresholds = 2.0 ** np.arange(-15, -15 + n_thresholds)
    idx = np.arange(len(x))
    counts = np.empty(n_thresholds)
    for j, c in enumerate(thresholds):
        hits = np.where(env >= c, idx, -(hang + 1) - 1)
        last = np.maximum.accumulate(hits)
        counts[j] = np.count_nonzero(idx - last <= hang)
    if counts[0] == 0:
        raise DataError("no activity: envelope never exceeds the lowest threshold")

    with np.errstate(divide="ignore"):
        act_db = 10.0 * np.log10(sq / counts)
    thr_db = 20.0 * np.log10(thresholds)
    delta = act_db - thr_db
    if delta[0] <= margin_db:
        return float(act_db[0])
    for j in range(1, n_thresholds):
        if counts[j] == 0 or delta[j] <= margin_db:
            if counts[j] == 0:
                return float(act_db[j - 1])
            frac = (delta[j - 1] - margin_db) / (delta[j - 1] - delta[j])
            return float(act_db[j - 1] + frac * (act_db[j] - act_db[j - 1]))
    return float(act_db[-1])


def rms_db(x: np.ndarray) -> float:
    return 10.0 * math.log10(float(np.mean(np.square(x))))


def noise_gain(reverberant: AudioBuffer, noise: AudioBuffer, snr_db: float) -> float:
    """Scalar gain putting ``noise`` at ``snr_db`` below the channel-0 active speech level."""
    if not math.isfinite(snr_db):
        raise DataError(f"SNR must be finite, got {snr_db}")
    power = float(np.mean(np.square(noise.samples[0])))
    if power == 0.0:
        raise DataError("noise has zero power in channel 0")
    speech_db = active_speech_level(reverberant, 0)
    return 10.0 ** ((speech_db - snr_db) / 20.0) / math.sqrt(power)


def mix_at_snr(reverberant: AudioBuffer, noise: AudioBuffer, snr_db: float) -> AudioBuffer:
    """Add ``noise`` scaled by one gain on both channels to reach ``snr_db`` in channel 0."""
    if reverberant.samples.shape != noise.samples.shape:
        raise ShapeError(f"reverberant {reverberant.samples.shape} and noise {noise.samples.shape} differ in shape")
    g = noise_gain(reverberant, noise, snr_db)
    return AudioBuffer(reverberant.samples + g * noise.samples, reverberant.sample_rate)


def measured_snr(reverberant: AudioBuffer, scaled_noise: AudioBuffer) -> float:
    return active_speech_level(reverberant, 0) - rms_db(scaled_noise.samples[0])


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentDraw:
    swap: bool
    flip: bool
    noise_snr_db: float | None  # None: no additive noise
    gain_db: float | None  # None: no gain change


def draw_augmentation(rng: np.random.Generator, noise_snr=(20.0, 40.0), gain_db=(-6.0, 6.0)) -> AugmentDraw:
    # all values drawn unconditionally so the stream layout never depends on earlier coins
    u = rng.random(4)
    snr = rng.uniform(*noise_snr)
    gain = rng.uniform(*gain_db)
    return AugmentDraw(
        swap=bool(u[0] < 0.5),
        flip=bool(u[1] < 0.5),
        noise_snr_db=float(snr) if u[2] < 0.5 else None,
        gain_db=float(gain) if u[3] < 0.5 else None,
    )


def apply_augmentation(x: np.ndarray, draw: AugmentDraw, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply ``draw`` to a ``(2, T)`` array: swap, polarity, noise, gain in that order."""
    x = np.array(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != 2:
        raise ShapeError(f"augmentation needs a (2, T) signal, got shape {x.shape}")
    if draw.swap:
        x = x[::-1].copy()
    if draw.flip:
        x = -x
    if draw.noise_snr_db is not None:
        if rng is None:
            raise DataError("additive-noise augmentation needs an rng")
        power = float(np.mean(np.square(x)))
        noise = rng.standard_normal(x.shape)
        x = x + noise * math.sqrt(power * 10.0 ** (-draw.noise_snr_db / 10.0))
    if draw.gain_db is not None:
        x = x * 10.0 ** (draw.gain_db / 20.0)
    return x


def augment(x, seed: int):
    """Seeded random channel swap, polarity flip, additive noise and gain.

    Accepts an :class:`AudioBuffer`, a :class:`FrameSequence` or a ``(2, T)``
    array and returns the same kind.
    """
    rng = np.random.default_rng(seed)
    draw = draw_augmentation(rng)
    if isinstance(x, AudioBuffer):
        if x.channels != 2:
            raise ShapeError(f"augmentation needs 2 channels, got {x.channels}")
        return AudioBuffer(apply_augmentation(x.samples, draw, rng), x.sample_rate)
    if isinstance(x, FrameSequence):
        if x.channels != 2:
            raise ShapeError(f"augmentation needs 2 channels, got {x.channels}")
        per_ch = x.per_channel()  # (N, 2, L)
        flat = per_ch.transpose(1, 0, 2).reshape(2, -1)
        out = apply_augmentation(flat, draw, rng).reshape(2, len(x), x.frame_length).transpose(1, 0, 2)
        return FrameSequence(out.reshape(len(x), -1), x.frame_length, x.hop, 2)
    return apply_augmentation(x, draw, rng)


# ---------------------------------------------------------------- dataset


@dataclass
class SceneRecord:
    utterance_id: str
    speech_path: str
    rir_path: str
    noise_paths: list[str]
    snr_db: float
    seed: int
    label: float | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d["generator"] = GENERATOR_VERSION
        return json.dumps(d, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "SceneRecord":
        d = json.loads(line)
        d.pop("generator", None)
        return cls(**d)


@dataclass
class Manifest:
    """Scene records plus the directory that holds the generated WAVs."""

    root: Path
    records: list[SceneRecord]
    stats: dict = field(default_factory=dict)

    def mixture_path(self, rec: SceneRecord) -> Path:
        return self.root / "mixtures" / f"{rec.utterance_id}.wav"

    def reference_path(self, rec: SceneRecord) -> Path:
        return self.root / "reference" / f"{rec.utterance_id}.wav"

    def resolve(self, rel: str) -> Path:
        return (self.root / rel).resolve()

    def __len__(self):
        return len(self.records)

    def write(self, name: str = "manifest.jsonl") -> Path:
        path = self.root / name
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for rec in self.records:
                fh.write(rec.to_json() + "\n")
        if self.stats:
            with open(self.root / "manifest_stats.json", "w", encoding="utf-8") as fh:
                json.dump(self.stats, fh, indent=2, sort_keys=True)
                fh.write("\n")
        return path

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.jsonl"
        if not path.is_file():
            raise DataError(f"manifest not found: {path}")
        records = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    records.append(SceneRecord.from_json(line))
                except (json.JSONDecodeError, TypeError) as exc:
                    raise DataError(f"{path}:{lineno}: malformed manifest line ({exc})") from exc
        stats_path = path.parent / "manifest_stats.json"
        stats = json.loads(stats_path.read_text()) if stats_path.is_file() else {}
        return cls(path.parent, records, stats)


def _wav_files(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"asset directory does not exist: {directory}")
    files = sorted(directory.rglob("*.wav"))
    if not files:
        raise DataError(f"asset directory contains no WAV files: {directory}")
    return files


def _wav_length(path: Path) -> int:
    _, data = scipy.io.wavfile.read(path, mmap=True)
    return int(data.shape[0])


def record_seed(root_seed: int, *key: int) -> int:
    """Independent 64-bit seed for one item derived from the root seed."""
    return int(np.random.SeedSequence([root_seed, *key]).generate_state(1, np.uint64)[0])


def _load_mono(path) -> np.ndarray:
    return read_wav(path).samples[0]


def render_scene(rec: SceneRecord, root: Path, spec: NoiseFieldSpec) -> tuple[AudioBuffer, AudioBuffer]:
    """Recreate (mixture, clean reverberant reference) for a record.

    The noise offsets are drawn from ``rec.seed``, so the output depends only
    on the record and the asset files.
    """
    rng = np.random.default_rng(rec.seed)
    speech = AudioBuffer(_load_mono(root / rec.speech_path))
    rir = read_wav(root / rec.rir_path)
    if rir.channels != 2:
        raise DataError(f"RIR {rec.rir_path} has {rir.channels} channel(s); expected 2")
    reverberant = convolve_rir(speech, rir)
    n = len(speech)
    segments = []
    for p in rec.noise_paths:
        noise = _load_mono(root / p)
        if len(noise) < n:
            raise DataError(f"noise file {p} is shorter than the utterance")
        start = int(rng.integers(0, len(noise) - n + 1))
        segments.append(noise[start : start + n])
    noise_field = gen_isotropic_noise(segments[0], segments[1], spec)
    g = noise_gain(reverberant, noise_field, rec.snr_db)
    mixture = reverberant.samples + g * noise_field.samples
    peak = float(np.max(np.abs(mixture)))
    scale = 0.99 / peak if peak > 0.99 else 1.0
    return AudioBuffer(mixture * scale), AudioBuffer(reverberant.samples * scale)


def _generate(args) -> None:
    rec, root, spec = args
    mixture, reference = render_scene(rec, root, spec)
    write_wav(root / "mixtures" / f"{rec.utterance_id}.wav", mixture)
    write_wav(root / "reference" / f"{rec.utterance_id}.wav", reference)


def _utterance_id(speech_path: Path, speech_dir: Path, rep: int) -> str:
    stem = speech_path.relative_to(speech_dir).with_suffix("").as_posix().replace("/", "-")
    return f"{stem}_{rep:02d}"


def build_dataset(
    speech_dir,
    rir_dir,
    noise_dir,
    n_mixtures_per_utterance: int,
    out_dir,
    seed: int,
    snr_range: tuple[float, float] = (-10.0, 30.0),
    noise_field: NoiseFieldSpec = NoiseFieldSpec(),
    workers: int = 1,
) -> Manifest:
    """Generate labelled-later binaural mixtures and write ``manifest.jsonl``.

    Every record's choices (RIR, noise files, SNR, noise offsets) come from a
    per-record seed derived from ``seed``, so the result is independent of
    ``workers``.
    """
    speech_dir, out_dir = Path(speech_dir), Path(out_dir)
    speech_files = _wav_files(speech_dir)
    rir_files = _wav_files(rir_dir)
    noise_files = _wav_files(noise_dir)
    noise_lengths = [_wav_length(p) for p in noise_files]
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "mixtures").mkdir(exist_ok=True)
    (out_dir / "reference").mkdir(exist_ok=True)

    def rel(p: Path) -> str:
        return Path(os.path.relpath(p.resolve(), out_dir.resolve())).as_posix()

    records: list[SceneRecord] = []
    skipped_noise = 0
    skipped_records = 0
    for i, sp in enumerate(speech_files):
        n = _wav_length(sp)
        candidates = [k for k, length in enumerate(noise_lengths) if length >= n]
        too_short = len(noise_files) - len(candidates)
        for rep in range(n_mixtures_per_utterance):
            s = record_seed(seed, i, rep)
            rng = np.random.default_rng(np.random.SeedSequence([s, 1]))
            if too_short:
                skipped_noise += too_short
            if len(candidates) < 2:
                log.warning("skipping %s rep %d: fewer than two noise files cover %d samples", sp.name, rep, n)
                skipped_records += 1
                continue
            rir = rir_files[int(rng.integers(len(rir_files)))]
            pick = rng.choice(len(candidates), size=2, replace=False)
            noises = [noise_files[candidates[int(k)]] for k in pick]
            snr = float(rng.uniform(*snr_range))
            records.append(
                SceneRecord(
                    utterance_id=_utterance_id(sp, speech_dir, rep),
                    speech_path=rel(sp),
                    rir_path=rel(rir),
                    noise_paths=[rel(p) for p in noises],
                    snr_db=snr,
                    seed=s,
                )
            )
    if skipped_noise:
        log.warning("%d noise-file candidates skipped as shorter than the utterance", skipped_noise)

    tasks = [(rec, out_dir, noise_field) for rec in records]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_generate, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    else:
        for t in tasks:
            _generate(t)

    stats = {
        "generator": GENERATOR_VERSION,
        "records": len(records),
        "skipped_noise_candidates": skipped_noise,
        "skipped_records": skipped_records,
        "snr_range": list(snr_range),
    }
    manifest = Manifest(out_dir, records, stats)
    manifest.write()
    return manifest
