"""Utterance-level intelligibility heads over frame features.

``small``: per-frame ``sigmoid(w.c + b)`` averaged over frames.
``pool``: softmax attention pooling over frames followed by an MLP with one
hidden ReLU layer of width ``2F`` and a sigmoid output.

Both heads run on zero-padded batches ``(B, N, F)`` with a boolean frame
mask, so sequences of different lengths share a batch without the padding
influencing the score.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .container import load_container, save_container
from .errors import DataError, NumericalError, ShapeError
from .optim import Adam

log = logging.getLogger(__name__)

_MASK_FILL = -1e9


def pad_batch(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack ``(N_i, F)`` arrays into ``(B, max N, F)`` plus a ``(B, max N)`` mask."""
    if not seqs:
        raise DataError("empty batch")
    width = seqs[0].shape[1]
    n_max = max(len(s) for s in seqs)
    x = np.zeros((len(seqs), n_max, width))
    mask = np.zeros((len(seqs), n_max), dtype=bool)
    for i, s in enumerate(seqs):
        if s.ndim != 2 or s.shape[1] != width:
            raise ShapeError(f"feature widths differ within batch: {s.shape} vs width {width}")
        if len(s) < 1:
            raise DataError("feature sequence with no frames")
        x[i, : len(s)] = s
        mask[i, : len(s)] = True
    return x, mask


class Head:
    kind = ""

    def __init__(self, width: int, seed: int = 0):
        self.width = width
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4EAD]))

    def _uniform(self, name, shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        self.params[name] = Tensor(self._rng.uniform(-bound, bound, shape), requires_grad=True, name=name)

    def _check(self, x: np.ndarray):
        if x.shape[-1] != self.width:
            raise ShapeError(f"{self.kind} head expects {self.width}-dim features, got {x.shape[-1]}")

    def forward(self, x: np.ndarray, mask: np.ndarray) -> Tensor:
        raise NotImplementedError

    def score(self, features: np.ndarray) -> float:
        """Score one ``(N, F)`` feature sequence."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or len(features) < 1:
            raise DataError(f"expected a non-empty (frames, width) array, got shape {features.shape}")
        return float(self.forward(features[None], np.ones((1, len(features)), bool)).data[0])

    def predict(self, seqs: Sequence[np.ndarray], batch_size: int = 64) -> np.ndarray:
        out = []
        for i in range(0, len(seqs), batch_size):
            x, mask = pad_batch(seqs[i : i + batch_size])
            out.append(self.forward(x, mask).data)
        return np.concatenate(out)

    def save(self, path, meta: dict | None = None):
        m = {"kind": "head", "head_kind": self.kind, "width": self.width}
        m.update(meta or {})
        save_container(path, m, {k: t.data for k, t in self.params.items()})

    @staticmethod
    def load(path) -> "Head":
        meta, tensors = load_container(path)
        if meta.get("kind") != "head":
            raise DataError(f"{path} is not a predictor head checkpoint")
        head = make_head(meta["head_kind"], int(meta["width"]))
        for k, t in head.params.items():
            if k not in tensors or tensors[k].shape != t.shape:
                raise DataError(f"head checkpoint {path}: tensor {k!r} missing or mis-shaped")
            t.data = tensors[k].astype(np.float64)
        head.meta = meta
        return head


class SmallHead(Head):
    kind = "small"

    def __init__(self, width: int, seed: int = 0):
        super().__init__(width, seed)
        self._uniform("w", (width, 1), width)
        self._uniform("b", (1,), width)

    def forward(self, x, mask):
        self._check(x)
        B, N, _ = x.shape
        frame_scores = ad.sigmoid(ad.linear(Tensor(x), self.params["w"], self.params["b"]))
        frame_scores = ad.reshape(frame_scores, (B, N))
        m = mask.astype(np.float64)
        return ad.tsum(frame_scores * m, axis=1) / m.sum(axis=1)


class PoolHead(Head):
    kind = "pool"

    def __init__(self, width: int, seed: int = 0):
        super().__init__(width, seed)
        self._uniform("att.w", (width, 1), width)
        self._uniform("att.b", (1,), width)
        self._uniform("mlp.w1", (width, 2 * width), width)
        self._uniform("mlp.b1", (2 * width,), width)
        self._uniform("mlp.w2", (2 * width, 1), 2 * width)
        self._uniform("mlp.b2", (1,), 2 * width)

    def attention(self, x, mask) -> Tensor:
        B, N, _ = x.shape
        p = self.params
        a = ad.reshape(ad.linear(Tensor(x), p["att.w"], p["att.b"]), (B, N))
        a = a + np.where(mask, 0.0, _MASK_FILL)
        return ad.softmax(a, axis=1)

    def forward(self, x, mask):
        self._check(x)
        B, N, F = x.shape
        p = self.params
        weights = self.attention(x, mask)
        pooled = ad.tsum(ad.reshape(weights, (B, N, 1)) * Tensor(x), axis=1)  # (B, F)
        hidden = ad.relu(ad.linear(pooled, p["mlp.w1"], p["mlp.b1"]))
        return ad.reshape(ad.sigmoid(ad.linear(hidden, p["mlp.w2"], p["mlp.b2"])), (B,))


def make_head(kind: str, width: int, seed: int = 0) -> Head:
    if kind == "small":
        return SmallHead(width, seed)
    if kind == "pool":
        return PoolHead(width, seed)
    raise DataError(f"unknown head kind {kind!r}; expected 'small' or 'pool'")


@dataclass
class PredictorReport:
    head_kind: str
    best_epoch: int
    best_dev_mse: float
    final_train_mse: float
    epochs_run: int
    history: list[dict] = field(default_factory=list)


def _length_batches(lengths: Sequence[int], batch_size: int) -> list[np.ndarray]:
    order = np.argsort(np.asarray(lengths), kind="stable")
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def train_predictor(
    train: Sequence[tuple[np.ndarray, float]],
    dev: Sequence[tuple[np.ndarray, float]],
    head_kind: str,
    seed: int,
    lr: float = 1e-3,
    batch_size: int = 16,
    max_epochs: int = 300,
    patience: int = 10,
) -> tuple[Head, PredictorReport]:
    """Fit a head by mini-batch MSE with early stopping on dev MSE.

    Batches group utterances of similar length.  The weights from the epoch
    with the lowest dev MSE are returned.
    """
    if not train or not dev:
        raise DataError("train and dev sets must both be non-empty")
    labels = np.array([y for _, y in train], dtype=np.float64)
    if np.any((labels < 0) | (labels > 1)) or not np.all(np.isfinite(labels)):
        raise DataError("labels must lie in [0, 1]")
    width = train[0][0].shape[1]
    head = make_head(head_kind, width, seed)
    opt = Adam(head.params, lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7EA1]))
    feats = [np.asarray(f, dtype=np.float64) for f, _ in train]
    batches = _length_batches([len(f) for f in feats], batch_size)
    dev_feats = [np.asarray(f, dtype=np.float64) for f, _ in dev]
    dev_labels = np.array([y for _, y in dev], dtype=np.float64)

    best = (math.inf, -1, {k: t.data.copy() for k, t in head.params.items()})
    history = []
    since_best = 0
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        sq_err = 0.0
        for bi in rng.permutation(len(batches)):
            idx = batches[bi]
            x, mask = pad_batch([feats[i] for i in idx])
            opt.zero_grad()
            with Tape() as tape:
                loss = ad.mse(head.forward(x, mask), labels[idx])
            if not np.isfinite(loss.data):
                raise NumericalError(f"non-finite predictor loss in epoch {epoch}")
            tape.backward(loss)
            opt.step()
            sq_err += float(loss.data) * len(idx)
        dev_mse = float(np.mean((head.predict(dev_feats) - dev_labels) ** 2))
        history.append({"epoch": epoch, "train_mse": sq_err / len(feats), "dev_mse": dev_mse})
        if dev_mse < best[0]:
            best = (dev_mse, epoch, {k: t.data.copy() for k, t in head.params.items()})
            since_best = 0
        else:
            since_best += 1
            if since_best >= patience:
                break
    for k, t in head.params.items():
        t.data = best[2][k]
    train_mse = float(np.mean((head.predict(feats) - labels) ** 2))
    log.info("%s head: best dev MSE %.5f at epoch %d", head_kind, best[0], best[1])
    return head, PredictorReport(head_kind, best[1], best[0], train_mse, epoch, history)
