"""Figures of merit and evaluation reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .audio import mel_features, read_wav
from .errors import DataError, ShapeError, UndefinedCorrelationError
from .predictor import Head
from .scene import Manifest

MSE_ZERO_SENTINEL = "< -100 dB"
FEATURE_SOURCES = ("vqcpc", "single-mel", "concat-mel")


def _check_pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if len(pred) != len(truth):
        raise ShapeError(f"prediction and truth lengths differ: {len(pred)} vs {len(truth)}")
    if len(pred) < 2:
        raise DataError("need at least two scores")
    return pred, truth


def pearson(x, y) -> float:
    x, y = _check_pair(x, y)
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(np.dot(xc, xc)), float(np.dot(yc, yc))
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a constant sequence")
    # one square root of the product keeps small integer cases exact
    return float(np.clip(np.dot(xc, yc) / math.sqrt(sxx * syy), -1.0, 1.0))


def spearman(x, y) -> float:
    """Pearson correlation of mid-ranks (ties share their average rank)."""
    x, y = _check_pair(x, y)
    return pearson(rankdata(x, method="average"), rankdata(y, method="average"))


def mse_db(pred, truth) -> float:
    """``10 log10(MSE)``; ``-inf`` for a perfect match."""
    pred, truth = _check_pair(pred, truth)
    m = float(np.mean((pred - truth) ** 2))
    return -math.inf if m == 0.0 else 10.0 * math.log10(m)


def compute_metrics(pred, truth) -> tuple[float, float, float]:
    """``(lcc, srcc, mse_db)``; raises :class:`UndefinedCorrelationError` on constant input."""
    return pearson(pred, truth), spearman(pred, truth), mse_db(pred, truth)


def format_mse_db(value: float):
    return MSE_ZERO_SENTINEL if value == -math.inf else value


@dataclass
class EvalRow:
    system: str
    dataset: str
    lcc: float | None
    srcc: float | None
    mse_db: float
    n_utterances: int
    error: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mse_db"] = format_mse_db(self.mse_db)
        return d


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    predictions: dict[str, list[tuple[str, float, float]]] = field(default_factory=dict)

    def add(self, row: EvalRow, predictions=None):
        self.rows.append(row)
        if predictions is not None:
            self.predictions[f"{row.dataset}/{row.system}"] = predictions

    def to_json(self) -> str:
        return json.dumps({"rows": [r.to_dict() for r in self.rows]}, indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        header = ("dataset", "system", "LCC", "SRCC", "MSE [dB]", "N")
        lines = [header]
        for r in self.rows:
            fmt = lambda v: "error" if v is None else f"{v:.4f}"
            mse = format_mse_db(r.mse_db)
            lines.append((r.dataset, r.system, fmt(r.lcc), fmt(r.srcc), mse if isinstance(mse, str) else f"{mse:.2f}", str(r.n_utterances)))
        widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
        out = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in lines]
        out.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(out) + "\n"

    def write(self, out_dir, stem: str = "report") -> None:
        out_dir = Path(out_dir)
        (out_dir / f"{stem}.json").write_text(self.to_json(), encoding="utf-8")
        (out_dir / f"{stem}.txt").write_text(self.to_table(), encoding="utf-8")
        with open(out_dir / f"{stem}_utterances.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dataset", "system", "utterance_id", "prediction", "truth"])
            for key, preds in self.predictions.items():
                dataset, system = key.split("/", 1)
                for uid, p, t in preds:
                    w.writerow([dataset, system, uid, repr(float(p)), repr(float(t))])


def mel_extractor(source: str) -> Callable:
    mode = {"single-mel": "single", "concat-mel": "concat"}[source]
    return lambda buffer: mel_features(buffer, mode).features


def manifest_features(manifest: Manifest, extractor: Callable) -> dict[str, np.ndarray]:
    """Features of every mixture in ``manifest``, keyed by utterance id."""
    return {rec.utterance_id: extractor(read_wav(manifest.mixture_path(rec))) for rec in manifest.records}


def evaluate_run(
    manifest: Manifest,
    features: dict[str, np.ndarray],
    head: Head,
    system: str,
    dataset: str = "test",
) -> tuple[EvalRow, list[tuple[str, float, float]]]:
    """Score every labelled utterance in ``manifest`` and summarise.

    Degenerate (constant) predictions produce a row with ``lcc``/``srcc``
    set to ``None`` and the reason in ``error``; ``mse_db`` is still filled.
    """
    labelled = [r for r in manifest.records if r.label is not None]
    if len(labelled) != len(manifest.records):
        raise DataError(f"{len(manifest.records) - len(labelled)} manifest records have no label")
    missing = [r.utterance_id for r in labelled if r.utterance_id not in features]
    if missing:
        raise DataError(f"no features for {len(missing)} utterances, e.g. {missing[0]!r}")
    width = next(iter(features.values())).shape[1]
    if width != head.width:
        raise ShapeError(f"{head.kind} head expects {head.width}-dim features but {system} features are {width}-dim")
    pred = head.predict([features[r.utterance_id] for r in labelled])
    truth = np.array([r.label for r in labelled])
    predictions = [(r.utterance_id, float(p), float(t)) for r, p, t in zip(labelled, pred, truth)]
    err = None
    try:
        lcc, srcc = pearson(pred, truth), spearman(pred, truth)
    except UndefinedCorrelationError as exc:
        lcc = srcc = None
        err = str(exc)
    return EvalRow(system, dataset, lcc, srcc, mse_db(pred, truth), len(labelled), err), predictions
