"""Exit-gate checks, one test per criterion.

Each test records a one-line verdict; the lines are printed together at the
end of the pytest run (see ``conftest.py``) and when this file is run as a
script.  The toy end-to-end run takes several minutes.
"""

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.signal

sys.path.insert(0, str(Path(__file__).parent))

from binaural_si import autodiff as ad
from binaural_si.audio import AudioBuffer
from binaural_si.autodiff import Tape, Tensor, grad_check
from binaural_si.cli import run as cli_run
from binaural_si.evaluation import compute_metrics, mse_db, spearman
from binaural_si.predictor import make_head, pad_batch
from binaural_si.scene import (
    Manifest,
    NoiseFieldSpec,
    build_dataset,
    gen_isotropic_noise,
    measured_snr,
    mix_at_snr,
    noise_gain,
    render_scene,
)
from binaural_si.stoi import better_ear_label, stoi_intrusive
from binaural_si.synth import make_toy_assets, synth_speech
from binaural_si.vqcpc import VQCPC, Codebook, VQCPCConfig, quantize

VERDICTS: dict[int, str] = {}
LN11 = math.log(11.0)


def record(n: int, ok: bool, detail: str):
    VERDICTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(VERDICTS[n])
    assert ok, VERDICTS[n]


def _seq(values):
    return ", ".join(f"{v:.4f}" for v in values)


# ---------------------------------------------------------------- 1


def test_criterion_01_gradient_fidelity():
    from test_autodiff import _op_cases

    t0 = time.perf_counter()
    worst = {}
    for name, f, inputs in _op_cases():
        worst[name] = grad_check(f, inputs)

    r = np.random.default_rng(2)
    D, H = 3, 4
    gru_in = [
        r.standard_normal((2, 5, D)),
        r.standard_normal((2, H)) * 0.5,
        r.standard_normal((D, 3 * H)) * 0.5,
        r.standard_normal((H, 3 * H)) * 0.5,
        r.standard_normal(3 * H) * 0.1,
        r.standard_normal(3 * H) * 0.1,
    ]
    gw = r.standard_normal((2, 5, H))
    worst["gru_layer"] = grad_check(lambda *t: ad.tsum(ad.gru_layer(*t) * gw), gru_in)
    # surrogate-gradient ops: with a quantizer that moves with its input the
    # straight-through copy is the true derivative; stop_gradient must give exactly 0
    offset = r.standard_normal((2, 3))
    worst["straight_through"] = grad_check(
        lambda a: ad.tsum(ad.square(ad.straight_through(a, a.data + offset))), [r.standard_normal((2, 3))]
    )
    a = Tensor(r.standard_normal((2, 3)), requires_grad=True)
    with Tape() as tape:
        loss = ad.tsum(ad.square(a) + ad.stop_gradient(a) * 3.0)
    tape.backward(loss)
    worst["stop_gradient"] = float(np.max(np.abs(a.grad - 2 * a.data)))

    seqs = [r.standard_normal((n, 3)) for n in (3, 6)]
    x, mask = pad_batch(seqs)
    y = np.array([0.3, 0.8])
    for kind in ("small", "pool"):
        head = make_head(kind, 3, seed=1)
        names = list(head.params)

        def f(*ts, head=head, names=names):
            for n, t in zip(names, ts):
                head.params[n] = t
            out = head.forward(x, mask)
            return ((out - y) * (out - y)).mean()

        worst[f"{kind}_head"] = grad_check(f, [head.params[n].data.copy() for n in names])

    cfg = VQCPCConfig(window=465 + 160 * 7, filters=4, embedding_dim=3, codebook_size=5, feature_dim=3,
                      gru_layers=2, prediction_steps=2, negatives=2, dropout=0.0, batch_size=2)
    model = VQCPC(cfg, seed=1, dtype=np.float64)
    xs = np.random.default_rng(3).standard_normal((2, 2, cfg.window)) * 0.1
    names = list(model.params)

    def vq_loss(*ts):
        for n, t in zip(names, ts):
            model.params[n] = t
        return model.loss(xs, training=True, seed=5, bypass_quantizer=True)[0]

    worst["vqcpc_end_to_end"] = grad_check(vq_loss, [model.params[n].data.copy() for n in names])
    elapsed = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    record(1, err <= 1e-4 and elapsed < 120,
           f"{len(worst)} checks, max rel. error {err:.2e} ({name}) <= 1e-4, {elapsed:.1f} s < 120 s")


# ---------------------------------------------------------------- 2


def test_criterion_02_infonce_baseline():
    cfg = VQCPCConfig(window=465 + 160 * 19, batch_size=2)
    x = np.random.default_rng(0).standard_normal((2, 2, cfg.window)) * 0.1
    model = VQCPC(cfg, seed=0, dtype=np.float64)
    for w in model.projections():
        w.data[:] = 0.0
    _, diag = model.loss(x, training=False, seed=1, bypass_quantizer=True)
    zero_err = abs(diag["infonce"] - LN11)

    values = []
    for seed in range(100):
        _, d = VQCPC(cfg, seed=seed).loss(x, training=False, seed=seed)
        values.append(d["infonce"])
    mean_err = abs(float(np.mean(values)) - LN11)
    record(2, zero_err <= 1e-9 and mean_err <= 0.05,
           f"W=0: |L - ln 11| = {zero_err:.1e} <= 1e-9; random init mean over 100 seeds off by {mean_err:.2e} <= 0.05")


# ---------------------------------------------------------------- 3


def _exhaustive(q, vectors):
    best, best_d = 0, math.inf
    for k in range(len(vectors)):
        d = float(np.sum((q - vectors[k]) ** 2))
        if d < best_d:
            best, best_d = k, d
    return best


def test_criterion_03_quantizer_oracle():
    r = np.random.default_rng(0)
    vectors = r.standard_normal((64, 8))
    queries = r.standard_normal((5000, 8))
    # integer lattice with a duplicated codeword: exact ties must go to the lower index
    lattice = r.integers(-2, 3, (32, 4)).astype(np.float64)
    lattice[3] = lattice[20]
    lq = r.integers(-3, 4, (5000, 4)).astype(np.float64)
    _, idx_a = quantize(queries, vectors)
    _, idx_b = quantize(lq, lattice)
    agree = sum(int(i) == _exhaustive(q, vectors) for q, i in zip(queries, idx_a))
    agree += sum(int(i) == _exhaustive(q, lattice) for q, i in zip(lq, idx_b))

    k, per = 6, 40
    centres = r.standard_normal((k, 4)) * 3
    z = np.concatenate([c + 0.3 * r.standard_normal((per, 4)) for c in centres])
    truth = np.repeat(np.arange(k), per)
    means = np.stack([z[truth == i].mean(axis=0) for i in range(k)])
    # codewords start from one data sample per cluster, then quantize -> EMA update
    cb = Codebook.init(z[np.arange(k) * per + r.integers(0, per, k)], decay=0.99)
    for _ in range(500):
        _, assign = quantize(z, cb.vectors)
        cb.ema_update(z, assign)
    ema_err = float(np.max(np.abs(cb.vectors - means)))
    record(3, agree == 10000 and ema_err <= 1e-3,
           f"{agree}/10000 indices agree with exhaustive scan; EMA max error after 500 repeats {ema_err:.1e} <= 1e-3")


# ---------------------------------------------------------------- 4


def test_criterion_04_isotropic_field():
    r = np.random.default_rng(4)
    n = 60 * 16000
    spec = NoiseFieldSpec()
    out = gen_isotropic_noise(r.standard_normal(n), r.standard_normal(n), spec)
    f, cxy = scipy.signal.csd(out.samples[0], out.samples[1], fs=16000, nperseg=1024)
    _, pxx = scipy.signal.welch(out.samples[0], fs=16000, nperseg=1024)
    _, pyy = scipy.signal.welch(out.samples[1], fs=16000, nperseg=1024)
    coh = np.real(cxy) / np.sqrt(pxx * pyy)
    band = (f >= 100) & (f <= 4000)
    target = spec.coherence(f[band])
    mad = float(np.mean(np.abs(coh[band] - target)))
    record(4, mad <= 0.05, f"coherence MAD over 100-4000 Hz = {mad:.4f} <= 0.05")


# ---------------------------------------------------------------- 5


def test_criterion_05_snr_calibration():
    r = np.random.default_rng(5)
    errors = []
    for trial in range(3):
        s = synth_speech(r, 2.5)
        reverberant = AudioBuffer(np.stack([s, 0.8 * np.roll(s, 7)]))
        noise = AudioBuffer(r.standard_normal((2, len(s))))
        for snr in (-10, 0, 10, 20, 30):
            g = noise_gain(reverberant, noise, snr)
            mix = mix_at_snr(reverberant, noise, snr)
            added = AudioBuffer(mix.samples - reverberant.samples)
            errors.append(abs(measured_snr(reverberant, added) - snr))
            errors.append(abs(measured_snr(reverberant, AudioBuffer(g * noise.samples)) - snr))
    worst = max(errors)
    record(5, worst <= 0.01, f"max |measured - target| over {{-10,0,10,20,30}} dB = {worst:.2e} dB <= 0.01")


# ---------------------------------------------------------------- 6


def test_criterion_06_label_oracle(tmp_path):
    r = np.random.default_rng(6)
    x = synth_speech(r, 2.0)
    identity = stoi_intrusive(x, x)
    y = x + 0.3 * np.std(x) * r.standard_normal(len(x))
    base = stoi_intrusive(x, y)
    scale_err = max(abs(stoi_intrusive(x, 5.0 * y) - base), abs(stoi_intrusive(0.1 * x, y) - base))

    assets = make_toy_assets(tmp_path / "assets", seed=6, utterances={"s": 10}, n_rirs=4, n_noises=4)
    m = build_dataset(assets["speech"] / "s", assets["rir"], assets["noise"], 2, tmp_path / "scenes", seed=6)
    spec = NoiseFieldSpec()
    violations = 0
    scenes = m.records[:20]
    for rec in scenes:
        scores = []
        for snr in (-10, 0, 10, 20, 30):
            rec.snr_db = snr
            mix, ref = render_scene(rec, m.root, spec)
            scores.append(better_ear_label(ref, mix))
        violations += sum(b < a for a, b in zip(scores, scores[1:]))
    ok = abs(identity - 1.0) <= 1e-12 and scale_err <= 1e-9 and violations == 0 and len(scenes) == 20
    record(6, ok, f"stoi(x,x) = {identity!r}; scale error {scale_err:.1e} <= 1e-9; "
                  f"{violations} monotonicity violations over {len(scenes)} scenes x 5 SNRs")


# ---------------------------------------------------------------- 7


def test_criterion_07_shape_and_causality():
    model = VQCPC(VQCPCConfig(), seed=0)
    x = np.random.default_rng(7).standard_normal((1, 2, 40960)) * 0.1
    z = model.encode(x)
    shape = z.shape[1:]

    cfg = VQCPCConfig(window=465 + 160 * 49, filters=8, embedding_dim=4, codebook_size=8, feature_dim=5,
                      prediction_steps=2, negatives=2)
    toy = VQCPC(cfg, seed=1, dtype=np.float64)
    n = cfg.receptive_field + 49 * cfg.hop
    xs = np.random.default_rng(8).standard_normal((1, 2, n)) * 0.1
    base = toy.forward(xs)["c"].data[0]
    r = np.random.default_rng(9)
    changed_past = 0
    for t in range(1, base.shape[0]):
        pert = xs.copy()
        start = (t - 1) * cfg.hop + cfg.receptive_field
        pert[..., start:] += r.standard_normal(pert[..., start:].shape)
        c = toy.forward(pert)["c"].data[0]
        changed_past += int(np.any(c[:t] != base[:t]))
    ok = shape == (254, 128) and base.shape[0] == 50 and changed_past == 0
    record(7, ok, f"encode(T=40960) -> {shape[0]}x{shape[1]}; {base.shape[0]}-frame sequence, "
                  f"{changed_past} perturbations leaked into earlier frames")


# ---------------------------------------------------------------- 8


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    t0 = time.perf_counter()
    codes = []
    codes.append(cli_run(["gen-data", "--out", str(out), "--set", "preset=toy", "--seed", "0", "--workers", "1"]))
    for stage in ("label", "train-vqcpc", "extract", "train-predictor", "evaluate"):
        codes.append(cli_run([stage, "--out", str(out), "--workers", "1"]))
    return out, codes, time.perf_counter() - t0


def test_criterion_08_toy_end_to_end(toy_run):
    import json

    out, codes, elapsed = toy_run
    n_scenes = sum(len(Manifest.load(out / "data" / s)) for s in ("train", "dev", "test"))
    n_test = len(Manifest.load(out / "data" / "test"))
    rows = {r["system"]: r for r in json.loads((out / "report.json").read_text())["rows"]}
    pool, small = rows["vqcpc/pool"], rows["vqcpc/small"]
    ok = (
        all(c == 0 for c in codes)
        and n_scenes >= 200
        and elapsed < 30 * 60
        and pool["lcc"] > 0.8
        and pool["srcc"] > 0.8
        and small["lcc"] > 0.6
    )
    record(8, ok, f"{n_scenes} scenes ({n_test} held out), chain {elapsed / 60:.1f} min < 30; "
                  f"Pool LCC {pool['lcc']:.3f} SRCC {pool['srcc']:.3f} (> 0.8), Small LCC {small['lcc']:.3f} (> 0.6)")


# ---------------------------------------------------------------- 9


def _ranks(x):
    return [1 + sum(v < a for v in x) + (sum(v == a for v in x) - 1) / 2 for a in x]


def _pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    return sum((a - mx) * (b - my) for a, b in zip(x, y)) / math.sqrt(
        sum((a - mx) ** 2 for a in x) * sum((b - my) ** 2 for b in y)
    )


def test_criterion_09_metric_oracle():
    r = np.random.default_rng(9)
    worst, checked = 0.0, 0
    while checked < 1000:
        n = int(r.integers(2, 51))
        if checked % 3 == 0:
            x, y = r.integers(0, 6, n).astype(float).tolist(), r.integers(0, 6, n).astype(float).tolist()
        else:
            x, y = r.random(n).tolist(), r.random(n).tolist()
        if len(set(x)) < 2 or len(set(y)) < 2:
            continue
        lcc, srcc, mse = compute_metrics(x, y)
        ms = sum((a - b) ** 2 for a, b in zip(x, y)) / n
        mse_err = 0.0 if ms == 0 and mse == -math.inf else abs(mse - 10 * math.log10(ms))
        worst = max(worst, abs(lcc - _pearson(x, y)), abs(srcc - _pearson(_ranks(x), _ranks(y))), mse_err)
        checked += 1
    srcc_hand = spearman([1, 2, 3], [3, 1, 2])
    mse_hand = mse_db([0.0, 0.0], [0.1, -0.1])
    ok = worst <= 1e-12 and srcc_hand == -0.5 and mse_hand == -20.0
    record(9, ok, f"max deviation from naive oracle over {checked} lists {worst:.1e} <= 1e-12; "
                  f"SRCC hand case {srcc_hand!r}, MSE 0.01 -> {mse_hand!r} dB")


# ---------------------------------------------------------------- 10

DETERMINISM_SET = [
    "preset=toy",
    "data.synth_utterances={train: 10, dev: 4, test: 4}",
    "data.synth_rirs=4",
    "data.synth_noises=4",
    "vqcpc.train_steps=40",
    "vqcpc.checkpoint_every=20",
    "predictor.max_epochs=30",
]


def _chain(out: Path, first_args):
    codes = [cli_run(["gen-data", "--out", str(out), "--workers", "1", *first_args])]
    for stage in ("label", "train-vqcpc", "extract", "train-predictor", "evaluate"):
        codes.append(cli_run([stage, "--out", str(out), "--workers", "1"]))
    return codes


def test_criterion_10_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["--seed", "17"]
    for s in DETERMINISM_SET:
        args += ["--set", s]
    codes = _chain(a, args)
    # the second run starts from the first run's resolved config only
    codes += _chain(b, ["--config", str(a / "resolved_config.yaml")])
    skip = {"logs"}
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.relative_to(a).parts[0] not in skip)
    differ = [str(p) for p in files if not (b / p).is_file() or (a / p).read_bytes() != (b / p).read_bytes()]
    kinds = {
        "manifests": sum(p.name == "manifest.jsonl" for p in files),
        "checkpoints": sum(p.suffix == ".bin" for p in files),
        "reports": sum(p.name.startswith("report") for p in files),
    }
    ok = all(c == 0 for c in codes) and not differ and kinds["manifests"] == 3 and kinds["reports"] == 3
    record(10, ok, f"{len(files)} artifacts ({kinds['manifests']} manifests, {kinds['checkpoints']} tensor files, "
                   f"{kinds['reports']} reports) compared, {len(differ)} differ" + (f": {differ[:3]}" if differ else ""))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
