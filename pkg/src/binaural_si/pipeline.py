"""Run-directory stages behind the command line.

Layout of a run directory::

    resolved_config.yaml
    assets/                      synthetic corpora (toy preset)
    data/<split>/manifest.jsonl  mixtures/ reference/
    labels/<split>.jsonl
    vqcpc/checkpoint.bin curve.jsonl
    features/<source>/<split>.bin
    predictor/<source>-<head>.bin  .json
    report.json report.txt report_utterances.csv
    logs/<stage>.log
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .audio import read_wav
from .config import PipelineConfig, stage_seed
from .errors import DataError
from .evaluation import EvalReport, evaluate_run, manifest_features, mel_extractor
from .predictor import Head, train_predictor
from .scene import Manifest, NoiseFieldSpec, build_dataset
from .stoi import better_ear_label, ingest_labels, write_labels
from .synth import make_toy_assets
from .vqcpc import VQCPC, load_features, save_features, train_vqcpc

log = logging.getLogger(__name__)


def _split_manifest(run: Path, split: str) -> Manifest:
    return Manifest.load(run / "data" / split / "manifest.jsonl")


def gen_data(cfg: PipelineConfig, run: Path, seed: int, workers: int = 1) -> dict[str, Manifest]:
    d = cfg.data
    s = stage_seed(seed, "gen-data")
    if d.synthesize:
        unknown = set(d.synth_utterances) - set(d.splits)
        if unknown:
            raise DataError(f"synth_utterances names splits not in data.splits: {sorted(unknown)}")
        dirs = make_toy_assets(
            run / "assets", s, {k: int(d.synth_utterances[k]) for k in d.splits}, d.synth_rirs, d.synth_noises
        )
        speech, rirs, noise = dirs["speech"], dirs["rir"], dirs["noise"]
    else:
        if not (d.speech_dir and d.rir_dir and d.noise_dir):
            raise DataError("data.speech_dir, data.rir_dir and data.noise_dir must be set (or data.synthesize: true)")
        speech, rirs, noise = Path(d.speech_dir), Path(d.rir_dir), Path(d.noise_dir)
    spec = NoiseFieldSpec(d.mic_distance, d.speed_of_sound)
    manifests = {}
    for i, split in enumerate(d.splits):
        manifests[split] = build_dataset(
            speech / split,
            rirs,
            noise,
            d.mixtures_per_utterance,
            run / "data" / split,
            seed=int(np.random.SeedSequence([s, i]).generate_state(1)[0]),
            snr_range=(d.snr_min, d.snr_max),
            noise_field=spec,
            workers=workers,
        )
        log.info("generated %d %s scenes", len(manifests[split]), split)
    return manifests


def _label_one(args) -> float:
    mix_path, ref_path = args
    return better_ear_label(read_wav(ref_path), read_wav(mix_path))


def label(cfg: PipelineConfig, run: Path, workers: int = 1) -> None:
    external = ingest_labels(cfg.data.external_labels) if cfg.data.external_labels else None
    (run / "labels").mkdir(exist_ok=True)
    for split in cfg.data.splits:
        m = _split_manifest(run, split)
        if external is not None:
            missing = [r.utterance_id for r in m.records if r.utterance_id not in external]
            if missing:
                raise DataError(f"external label file has no score for {len(missing)} {split} utterances, e.g. {missing[0]!r}")
            scores = [external[r.utterance_id] for r in m.records]
        else:
            tasks = [(m.mixture_path(r), m.reference_path(r)) for r in m.records]
            if workers > 1:
                with ProcessPoolExecutor(max_workers=workers) as pool:
                    scores = list(pool.map(_label_one, tasks))
            else:
                scores = [_label_one(t) for t in tasks]
        for r, sc in zip(m.records, scores):
            r.label = float(sc)
        m.write()
        write_labels(run / "labels" / f"{split}.jsonl", {r.utterance_id: r.label for r in m.records})
        log.info("labelled %d %s scenes", len(m), split)


def _load_mixtures(m: Manifest) -> list[np.ndarray]:
    return [read_wav(m.mixture_path(r)).samples for r in m.records]


def train_vqcpc_stage(cfg: PipelineConfig, run: Path, seed: int) -> VQCPC:
    m = _split_manifest(run, "train")
    out = run / "vqcpc"
    out.mkdir(exist_ok=True)
    result = train_vqcpc(
        _load_mixtures(m), cfg.vqcpc, stage_seed(seed, "train-vqcpc"), out, meta={"pipeline_config": cfg.to_dict()}
    )
    return result.model


def load_vqcpc(cfg: PipelineConfig, run: Path) -> VQCPC:
    model = VQCPC.load(run / "vqcpc" / "checkpoint.bin")
    if model.cfg != cfg.vqcpc:
        diff = {k: (v, cfg.vqcpc.to_dict()[k]) for k, v in model.cfg.to_dict().items() if cfg.vqcpc.to_dict()[k] != v}
        raise DataError(f"VQ-CPC checkpoint does not match the configuration: {diff}")
    return model


def feature_extractor(source: str, cfg: PipelineConfig, run: Path):
    if source == "vqcpc":
        model = load_vqcpc(cfg, run)
        return lambda buf: model.extract(buf).vectors
    return mel_extractor(source)


def extract(cfg: PipelineConfig, run: Path) -> None:
    for source in cfg.eval.feature_sources:
        fx = feature_extractor(source, cfg, run)
        (run / "features" / source).mkdir(parents=True, exist_ok=True)
        for split in cfg.data.splits:
            feats = manifest_features(_split_manifest(run, split), fx)
            save_features(run / "features" / source / f"{split}.bin", feats, {"source": source, "split": split})
            log.info("extracted %s features for %d %s utterances", source, len(feats), split)


def _labelled_pairs(run: Path, source: str, split: str) -> list[tuple[np.ndarray, float]]:
    m = _split_manifest(run, split)
    _, feats = load_features(run / "features" / source / f"{split}.bin")
    if any(r.label is None for r in m.records):
        raise DataError(f"{split} manifest has unlabelled records; run the label stage first")
    return [(feats[r.utterance_id], r.label) for r in m.records]


def train_predictor_stage(cfg: PipelineConfig, run: Path, seed: int) -> dict[str, Head]:
    p = cfg.predictor
    (run / "predictor").mkdir(exist_ok=True)
    heads = {}
    base = stage_seed(seed, "train-predictor")
    for source in cfg.eval.feature_sources:
        train = _labelled_pairs(run, source, "train")
        dev = _labelled_pairs(run, source, "dev")
        for kind in p.heads:
            head, report = train_predictor(
                train, dev, kind, base, lr=p.lr, batch_size=p.batch_size, max_epochs=p.max_epochs, patience=p.patience
            )
            name = f"{source}-{kind}"
            head.save(run / "predictor" / f"{name}.bin", {"source": source, "pipeline_config": cfg.to_dict()})
            (run / "predictor" / f"{name}.json").write_text(
                json.dumps(report.__dict__, indent=2, sort_keys=True) + "\n", encoding="utf-8"
            )
            heads[name] = head
    return heads


def evaluate(cfg: PipelineConfig, run: Path, head_path: Path | None = None) -> EvalReport:
    """Score every configured (source, head) pair on the evaluation datasets.

    With ``head_path`` only that head is used, against every configured
    feature source.
    """
    report = EvalReport()
    for dataset in cfg.eval.datasets:
        m = _split_manifest(run, dataset)
        for source in cfg.eval.feature_sources:
            _, feats = load_features(run / "features" / source / f"{dataset}.bin")
            if head_path is not None:
                heads = [Head.load(head_path)]
            else:
                heads = [Head.load(run / "predictor" / f"{source}-{k}.bin") for k in cfg.predictor.heads]
            for head in heads:
                row, preds = evaluate_run(m, feats, head, f"{source}/{head.kind}", dataset)
                report.add(row, preds)
    report.write(run)
    return report


def predict(cfg: PipelineConfig, run: Path, wav: Path, head_path: Path | None = None) -> float:
    source = cfg.eval.predict_source
    head = Head.load(head_path or run / "predictor" / f"{source}-{cfg.eval.predict_head}.bin")
    buf = read_wav(wav)
    if buf.channels != 2:
        raise DataError(f"{wav} has {buf.channels} channel(s); predict needs a binaural (2-channel) WAV")
    feats = feature_extractor(source, cfg, run)(buf)
    return head.score(feats)
