"""VQ-CPC feature extractor.

Pipeline per window: a strided conv encoder maps the two-channel waveform to
one latent per 10 ms, each latent is replaced by its nearest codeword
(straight-through gradient), and a causal two-layer GRU turns the quantized
sequence into context features.  Training minimises the InfoNCE loss of
predicting quantized latents 1..k steps ahead from each context vector,
plus a commitment term; codewords follow exponential moving averages of
their assigned latents.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .audio import AudioBuffer
from .autodiff import Tape, Tensor
from .container import load_container, save_container
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .optim import Adam
from .scene import augment

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VQCPCConfig:
    window: int = 40960
    in_channels: int = 2
    filters: int = 256
    strides: tuple[int, ...] = (5, 4, 2, 2, 2)
    kernels: tuple[int, ...] = (10, 8, 4, 4, 4)
    dropout: float = 0.1
    embedding_dim: int = 128
    codebook_size: int = 512
    gru_layers: int = 2
    feature_dim: int = 128
    prediction_steps: int = 12
    negatives: int = 10
    commitment_weight: float = 0.25
    ema_decay: float = 0.99
    ema_epsilon: float = 1e-5
    lr: float = 2e-4
    batch_size: int = 8
    train_steps: int = 500_000
    checkpoint_every: int = 5000
    augment: bool = True

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        if len(self.strides) != len(self.kernels):
            raise ConfigError(f"{len(self.strides)} strides but {len(self.kernels)} kernels")
        if math.prod(self.strides) != 160:
            raise ConfigError(f"encoder strides must multiply to 160 (10 ms at 16 kHz), got {math.prod(self.strides)}")
        for name in ("filters", "embedding_dim", "codebook_size", "gru_layers", "feature_dim", "prediction_steps", "negatives", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.output_length(self.window) <= self.prediction_steps:
            raise ConfigError(
                f"window of {self.window} samples gives {self.output_length(self.window)} latents; "
                f"need more than {self.prediction_steps} prediction steps"
            )

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for k, s in zip(self.kernels, self.strides):
            rf += (k - 1) * jump
            jump *= s
        return rf

    @property
    def hop(self) -> int:
        return math.prod(self.strides)

    def output_length(self, n_samples: int) -> int:
        if n_samples < self.receptive_field:
            return 0
        return ad.conv1d_output_length(n_samples, self.kernels, self.strides)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["strides"], d["kernels"] = list(self.strides), list(self.kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VQCPCConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown VQ-CPC config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Codebook:
    """Codewords with their EMA statistics.

    After every :meth:`ema_update`, ``vectors[i] = ema_sums[i] / smoothed_counts[i]``.
    """

    vectors: np.ndarray  # (K, D)
    ema_counts: np.ndarray  # (K,)
    ema_sums: np.ndarray  # (K, D)
    decay: float = 0.99
    epsilon: float = 1e-5

    @classmethod
    def init(cls, vectors: np.ndarray, decay=0.99, epsilon=1e-5) -> "Codebook":
        vectors = np.array(vectors)
        # unit pseudo-counts keep unused codewords where they start
        return cls(vectors, np.ones(len(vectors), vectors.dtype), vectors.copy(), decay, epsilon)

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    def smoothed_counts(self) -> np.ndarray:
        n = self.ema_counts.sum()
        return (self.ema_counts + self.epsilon) / (n + self.size * self.epsilon) * n

    def ema_update(self, z: np.ndarray, indices: np.ndarray) -> None:
        z = np.asarray(z).reshape(-1, self.vectors.shape[1])
        indices = np.asarray(indices).reshape(-1)
        onehot_counts = np.bincount(indices, minlength=self.size).astype(self.ema_counts.dtype)
        sums = np.zeros_like(self.ema_sums)
        np.add.at(sums, indices, z.astype(sums.dtype))
        g = self.decay
        self.ema_counts = g * self.ema_counts + (1 - g) * onehot_counts
        self.ema_sums = g * self.ema_sums + (1 - g) * sums
        self.vectors = self.ema_sums / self.smoothed_counts()[:, None]


def quantize(z: np.ndarray, vectors: np.ndarray, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Nearest codeword for each row of ``z`` (ties go to the lowest index).

    Returns ``(quantized, indices)``.  Distances are evaluated directly as
    ``sum((z - e)**2)`` rather than through the expanded dot-product form so
    they are exact enough for tie-breaking.
    """
    if vectors.shape[0] == 0:
        raise DataError("empty codebook")
    z = np.asarray(z)
    flat = z.reshape(-1, z.shape[-1])
    if flat.shape[1] != vectors.shape[1]:
        raise ShapeError(f"latent width {flat.shape[1]} does not match codeword width {vectors.shape[1]}")
    idx = np.empty(len(flat), dtype=np.int64)
    for start in range(0, len(flat), chunk):
        part = flat[start : start + chunk]
        d = np.sum(np.square(part[:, None, :] - vectors[None, :, :]), axis=-1)
        idx[start : start + chunk] = np.argmin(d, axis=1)
    return vectors[idx].reshape(z.shape), idx.reshape(z.shape[:-1])


def perplexity(indices: np.ndarray, size: int) -> float:
    p = np.bincount(np.asarray(indices).ravel(), minlength=size) / np.asarray(indices).size
    p = p[p > 0]
    return float(np.exp(-np.sum(p * np.log(p))))


@dataclass
class FeatureSequence:
    vectors: np.ndarray  # (N', F)
    utterance_id: str | None = None

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


# ---------------------------------------------------------------- model


class VQCPC:
    """Encoder, codebook, GRU aggregator and CPC projections."""

    def __init__(self, cfg: VQCPCConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0DE]))
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

        def uniform(name, shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            self.params[name] = Tensor(rng.uniform(-bound, bound, shape).astype(self.dtype), requires_grad=True, name=name)

        cin = cfg.in_channels
        for i, (k, s) in enumerate(zip(cfg.kernels, cfg.strides)):
            uniform(f"enc.conv{i}.w", (cfg.filters, cin, k), cin * k)
            uniform(f"enc.conv{i}.b", (cfg.filters,), cin * k)
            self.params[f"enc.bn{i}.gamma"] = Tensor(np.ones(cfg.filters, self.dtype), requires_grad=True)
            self.params[f"enc.bn{i}.beta"] = Tensor(np.zeros(cfg.filters, self.dtype), requires_grad=True)
            self.buffers[f"enc.bn{i}.running_mean"] = np.zeros(cfg.filters, self.dtype)
            self.buffers[f"enc.bn{i}.running_var"] = np.ones(cfg.filters, self.dtype)
            cin = cfg.filters
        uniform("enc.proj.w", (cfg.filters, cfg.embedding_dim), cfg.filters)
        uniform("enc.proj.b", (cfg.embedding_dim,), cfg.filters)
        din = cfg.embedding_dim
        H = cfg.feature_dim
        for layer in range(cfg.gru_layers):
            uniform(f"agg.gru{layer}.w_ih", (din, 3 * H), H)
            uniform(f"agg.gru{layer}.w_hh", (H, 3 * H), H)
            uniform(f"agg.gru{layer}.b_ih", (3 * H,), H)
            uniform(f"agg.gru{layer}.b_hh", (3 * H,), H)
            din = H
        # small projections so an untrained model scores all candidates alike
        for s in range(1, cfg.prediction_steps + 1):
            self.params[f"cpc.W{s}"] = Tensor(
                (rng.standard_normal((H, cfg.embedding_dim)) * 0.01 / math.sqrt(H)).astype(self.dtype),
                requires_grad=True,
                name=f"cpc.W{s}",
            )
        self.codebook = Codebook.init(
            rng.standard_normal((cfg.codebook_size, cfg.embedding_dim)).astype(self.dtype),
            cfg.ema_decay,
            cfg.ema_epsilon,
        )
        self.codebook_initialised = False

    # -------------------------------------------------------- forward pieces

    def encode(self, x, training: bool = False, seed: int | None = None) -> Tensor:
        """``x``: ``(B, 2, T)`` array or tensor -> latents ``(B, N', D)``."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 3 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"encoder expects (batch, {self.cfg.in_channels}, samples), got {x.shape}")
        if x.shape[2] < self.cfg.receptive_field:
            raise ShapeError(f"input of {x.shape[2]} samples is shorter than the {self.cfg.receptive_field}-sample receptive field")
        p = self.params
        h = x
        for i, s in enumerate(self.cfg.strides):
            h = ad.conv1d(h, p[f"enc.conv{i}.w"], p[f"enc.conv{i}.b"], stride=s)
            h = ad.dropout(h, self.cfg.dropout, None if seed is None else seed + i, training=training)
            h = ad.batchnorm1d(
                h,
                p[f"enc.bn{i}.gamma"],
                p[f"enc.bn{i}.beta"],
                self.buffers[f"enc.bn{i}.running_mean"],
                self.buffers[f"enc.bn{i}.running_var"],
                training=training,
            )
            h = ad.relu(h)
        h = ad.transpose(h, (0, 2, 1))
        return ad.linear(h, p["enc.proj.w"], p["enc.proj.b"])

    def aggregate(self, zq: Tensor, state0: Tensor | None = None) -> Tensor:
        """Causal GRU stack over ``(B, N', D)`` -> ``(B, N', F)``."""
        B = zq.shape[0]
        H = self.cfg.feature_dim
        if zq.shape[-1] != self.cfg.embedding_dim:
            raise ShapeError(f"aggregator expects width {self.cfg.embedding_dim}, got {zq.shape[-1]}")
        h = zq
        for layer in range(self.cfg.gru_layers):
            h0 = state0[layer] if state0 is not None else Tensor(np.zeros((B, H), self.dtype))
            p = self.params
            h = ad.gru_layer(h, h0, p[f"agg.gru{layer}.w_ih"], p[f"agg.gru{layer}.w_hh"], p[f"agg.gru{layer}.b_ih"], p[f"agg.gru{layer}.b_hh"])
        return h

    def forward(self, x, training: bool = False, seed: int | None = None, bypass_quantizer: bool = False) -> dict:
        z = self.encode(x, training, seed)
        if bypass_quantizer:
            zq_values, idx = z.data, None
            zq = z
        else:
            zq_values, idx = quantize(z.data, self.codebook.vectors)
            zq = ad.straight_through(z, zq_values)
        c = self.aggregate(zq)
        return {"z": z, "zq": zq, "zq_values": zq_values, "indices": idx, "c": c}

    def projections(self) -> list[Tensor]:
        return [self.params[f"cpc.W{s}"] for s in range(1, self.cfg.prediction_steps + 1)]

    def loss(self, x, training: bool = True, seed: int = 0, bypass_quantizer: bool = False) -> tuple[Tensor, dict]:
        out = self.forward(x, training, seed, bypass_quantizer)
        loss, diag = cpc_infonce_loss(
            out["c"],
            out["zq"],
            out["z"],
            out["zq_values"],
            self.projections(),
            self.cfg.commitment_weight,
            self.cfg.negatives,
            rng_seed=seed,
        )
        if out["indices"] is not None:
            diag["perplexity"] = perplexity(out["indices"], self.cfg.codebook_size)
        diag["_out"] = out
        return loss, diag

    def extract(self, buffer) -> FeatureSequence:
        """Eval-mode features for one binaural utterance."""
        samples = buffer.samples if isinstance(buffer, AudioBuffer) else np.asarray(buffer)
        if samples.ndim != 2 or samples.shape[0] != self.cfg.in_channels:
            raise ShapeError(f"expected a {self.cfg.in_channels}-channel signal, got shape {samples.shape}")
        out = self.forward(samples[None].astype(self.dtype), training=False)
        uid = None
        return FeatureSequence(out["c"].data[0].astype(np.float64), uid)

    # -------------------------------------------------------- persistence

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: t.data for k, t in self.params.items()}
        state.update(self.buffers)
        state["codebook.vectors"] = self.codebook.vectors
        state["codebook.ema_counts"] = self.codebook.ema_counts
        state["codebook.ema_sums"] = self.codebook.ema_sums
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = {k: v.shape for k, v in self.state_dict().items()}
        missing = set(expected) - set(state)
        if missing:
            raise DataError(f"checkpoint is missing tensors: {sorted(missing)[:5]}")
        for name, shape in expected.items():
            if tuple(state[name].shape) != tuple(shape):
                raise DataError(f"checkpoint tensor {name!r} has shape {tuple(state[name].shape)}, config expects {tuple(shape)}")
        for k in self.params:
            self.params[k].data = np.array(state[k], dtype=self.dtype)
        for k in self.buffers:
            self.buffers[k] = np.array(state[k], dtype=self.dtype)
        self.codebook.vectors = np.array(state["codebook.vectors"], dtype=self.dtype)
        self.codebook.ema_counts = np.array(state["codebook.ema_counts"], dtype=self.dtype)
        self.codebook.ema_sums = np.array(state["codebook.ema_sums"], dtype=self.dtype)
        self.codebook_initialised = True

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"kind": "vqcpc", "config": self.cfg.to_dict(), "dtype": self.dtype.name}
        meta.update(extra_meta or {})
        save_container(path, meta, self.state_dict())

    @classmethod
    def load(cls, path) -> "VQCPC":
        meta, tensors = load_container(path)
        if meta.get("kind") != "vqcpc":
            raise DataError(f"{path} is not a VQ-CPC checkpoint (kind={meta.get('kind')!r})")
        model = cls(VQCPCConfig.from_dict(meta["config"]), dtype=meta.get("dtype", "float32"))
        model.load_state_dict(tensors)
        return model


# ---------------------------------------------------------------- loss


def sample_negatives(rng: np.random.Generator, positives: np.ndarray, pool_size: int, n: int) -> np.ndarray:
    """``n`` indices per positive, uniform over ``range(pool_size)`` minus the positive."""
    draws = rng.integers(0, pool_size - 1, size=positives.shape + (n,))
    return draws + (draws >= positives[..., None])


def cpc_infonce_loss(
    c: Tensor,
    zq: Tensor,
    z: Tensor,
    codewords: np.ndarray,
    projections: Sequence[Tensor],
    beta: float,
    negatives: int,
    rng_seed: int,
) -> tuple[Tensor, dict]:
    """InfoNCE over ``len(projections)`` prediction steps plus ``beta`` * commitment.

    ``c``: contexts ``(B, N', F)``; ``zq``: quantized latents ``(B, N', D)``
    (the prediction targets); ``z``: pre-quantization latents; ``codewords``:
    the assigned codewords as a constant.  For step ``s`` the score of a
    candidate ``x`` for anchor ``t`` is ``x . (c_t W_s)``, scored in log
    space, with the positive ``zq[t+s]`` in slot 0 and ``negatives``
    candidates drawn uniformly from every other position in the batch.
    """
    B, N, D = zq.shape
    K = len(projections)
    if N <= K:
        raise DataError(f"sequence of {N} latents is too short for {K} prediction steps")
    pool = B * N
    if pool - 1 < negatives:
        raise DataError(f"only {pool - 1} candidate positions for {negatives} negatives")
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 0x9E6]))
    zq_flat = ad.reshape(zq, (pool, D))
    step_losses, accs = [], []
    for s, W in enumerate(projections, start=1):
        n = N - s
        pred = ad.matmul(c[:, :n], W)  # (B, n, D)
        pos = (np.arange(B)[:, None] * N + np.arange(s, N)[None, :])  # (B, n)
        neg = sample_negatives(rng, pos, pool, negatives)
        cand_idx = np.concatenate([pos[..., None], neg], axis=-1)  # (B, n, 1+neg)
        cand = ad.take(zq_flat, cand_idx)  # (B, n, 1+neg, D)
        logits = ad.bdot(cand, ad.reshape(pred, (B, n, 1, D)))
        targets = np.zeros((B, n), dtype=np.int64)
        step_losses.append(ad.cross_entropy(logits, targets))
        accs.append(float(np.mean(np.argmax(logits.data, axis=-1) == 0)))
    nce = step_losses[0]
    for l in step_losses[1:]:
        nce = nce + l
    nce = nce * (1.0 / K)
    diff = z - Tensor(np.asarray(codewords, dtype=z.dtype))
    commit = ad.tmean(ad.tsum(ad.square(diff), axis=-1))
    loss = nce + commit * beta
    diag = {
        "infonce": float(nce.data),
        "commitment": float(commit.data),
        "step_losses": [float(l.data) for l in step_losses],
        "step_accuracy": accs,
    }
    return loss, diag


# ---------------------------------------------------------------- training


def sample_window(signal: np.ndarray, window: int, rng: np.random.Generator) -> np.ndarray:
    n = signal.shape[1]
    if n <= window:
        out = np.zeros((signal.shape[0], window))
        out[:, :n] = signal
        return out
    start = int(rng.integers(0, n - window + 1))
    return signal[:, start : start + window]


@dataclass
class TrainResult:
    model: VQCPC
    curve: list[dict] = field(default_factory=list)


def train_vqcpc(
    signals: Sequence[np.ndarray],
    cfg: VQCPCConfig,
    seed: int,
    out_dir=None,
    meta: dict | None = None,
    log_every: int = 50,
    callback: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train on a list of ``(2, n)`` mixtures.

    Each step draws ``batch_size`` random windows (zero-padded if the
    utterance is short), augments them, runs the model in training mode,
    takes an Adam step and then moves the codewords by EMA.  Every
    ``checkpoint_every`` steps and at the end ``checkpoint.bin`` is rewritten
    in ``out_dir``; a non-finite loss raises :class:`NumericalError` and leaves
    the last checkpoint in place.
    """
    if not signals:
        raise DataError("no training signals")
    model = VQCPC(cfg, seed)
    opt = Adam(model.params, lr=cfg.lr)
    out_dir = Path(out_dir) if out_dir is not None else None
    curve_fh = open(out_dir / "curve.jsonl", "w", encoding="utf-8") if out_dir else None
    result = TrainResult(model)
    try:
        for step in range(cfg.train_steps):
            ss = np.random.SeedSequence([seed, step])
            rng = np.random.default_rng(ss)
            picks = rng.integers(0, len(signals), size=cfg.batch_size)
            windows = []
            for i in picks:
                w = sample_window(signals[i], cfg.window, rng)
                if cfg.augment:
                    w = augment(w, int(rng.integers(2**63)))
                windows.append(w)
            x = np.stack(windows).astype(model.dtype)
            step_seed = int(rng.integers(2**62))

            if not model.codebook_initialised:
                # seed the codewords with encoder outputs of the first batch
                z0 = model.encode(x, training=True, seed=step_seed).data.reshape(-1, cfg.embedding_dim)
                pick = rng.choice(len(z0), size=cfg.codebook_size, replace=len(z0) < cfg.codebook_size)
                model.codebook = Codebook.init(z0[pick], cfg.ema_decay, cfg.ema_epsilon)
                model.codebook_initialised = True

            opt.zero_grad()
            with Tape() as tape:
                loss, diag = model.loss(x, training=True, seed=step_seed)
            if not np.isfinite(loss.data):
                raise NumericalError(f"non-finite VQ-CPC loss at step {step}")
            tape.backward(loss)
            opt.step()
            out = diag.pop("_out")
            model.codebook.ema_update(out["z"].data, out["indices"])

            entry = {"step": step, "loss": float(loss.data), **diag}
            result.curve.append(entry)
            if curve_fh:
                curve_fh.write(json.dumps(entry) + "\n")
            if callback:
                callback(entry)
            if step % log_every == 0:
                log.info("step %d loss %.4f infonce %.4f ppl %.2f", step, entry["loss"], entry["infonce"], entry.get("perplexity", 0.0))
            last = step + 1 == cfg.train_steps
            if out_dir and (last or (step + 1) % cfg.checkpoint_every == 0):
                model.save(out_dir / "checkpoint.bin", {"step": step + 1, **(meta or {})})
    finally:
        if curve_fh:
            curve_fh.close()
    return result


def extract_features(model: VQCPC, buffer: AudioBuffer, utterance_id: str | None = None) -> FeatureSequence:
    if buffer.channels != model.cfg.in_channels:
        raise ShapeError(f"model expects {model.cfg.in_channels} channels, buffer has {buffer.channels}")
    feats = model.extract(buffer)
    feats.utterance_id = utterance_id
    return feats


def save_features(path, features: dict[str, np.ndarray], meta: dict | None = None) -> None:
    widths = {v.shape[1] for v in features.values()}
    if len(widths) > 1:
        raise ShapeError(f"feature widths differ within one file: {sorted(widths)}")
    m = {"kind": "features", "utterance_ids": list(features), "width": widths.pop() if widths else 0}
    m.update(meta or {})
    save_container(path, m, {k: np.asarray(v, dtype=np.float32) for k, v in features.items()})


def load_features(path) -> tuple[dict, dict[str, np.ndarray]]:
    meta, tensors = load_container(path)
    if meta.get("kind") != "features":
        raise DataError(f"{path} is not a feature file")
    return meta, {k: tensors[k].astype(np.float64) for k in meta["utterance_ids"]}
