import math

import numpy as np
import pytest

from binaural_si import autodiff as ad
from binaural_si.autodiff import Tape, Tensor, grad_check
from binaural_si.errors import ConfigError, DataError, ShapeError
from binaural_si.vqcpc import (
    VQCPC,
    Codebook,
    VQCPCConfig,
    cpc_infonce_loss,
    load_features,
    quantize,
    sample_negatives,
    save_features,
    train_vqcpc,
)

LN11 = math.log(11.0)


def tiny_config(**kw):
    base = dict(
        window=465 + 160 * 7,
        filters=4,
        embedding_dim=3,
        codebook_size=5,
        feature_dim=3,
        gru_layers=2,
        prediction_steps=2,
        negatives=2,
        dropout=0.0,
        batch_size=2,
        train_steps=10,
        checkpoint_every=5,
    )
    base.update(kw)
    return VQCPCConfig(**base)


def signal(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape) * 0.1


class TestConfig:
    def test_full_size_geometry(self):
        cfg = VQCPCConfig()
        assert cfg.receptive_field == 465
        assert cfg.hop == 160
        assert cfg.output_length(40960) == 254
        assert cfg.output_length(160000) == 998

    def test_strides_must_give_10ms(self):
        with pytest.raises(ConfigError):
            VQCPCConfig(strides=(5, 4, 2, 2, 1))

    def test_window_too_short_for_steps(self):
        with pytest.raises(ConfigError):
            VQCPCConfig(window=465 + 160 * 5)

    def test_dict_round_trip(self):
        cfg = tiny_config()
        assert VQCPCConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError):
            VQCPCConfig.from_dict({**cfg.to_dict(), "bogus": 1})


class TestShapes:
    def test_full_size_encoder_40960(self):
        model = VQCPC(VQCPCConfig(), seed=0)
        x = signal((1, 2, 40960))
        z = model.encode(x)
        assert z.shape == (1, 254, 128)
        out = model.forward(x)
        assert out["c"].shape == (1, 254, 128)
        assert out["indices"].shape == (1, 254)

    def test_full_size_encoder_160000(self):
        model = VQCPC(VQCPCConfig(), seed=0)
        assert model.encode(signal((1, 2, 160000))).shape == (1, 998, 128)

    def test_too_short_input(self):
        model = VQCPC(tiny_config())
        with pytest.raises(ShapeError):
            model.encode(signal((1, 2, 400)))

    def test_wrong_channel_count(self):
        model = VQCPC(tiny_config())
        with pytest.raises(ShapeError):
            model.extract(signal((1, 2000)))


def naive_nearest(q, vectors):
    best, best_d = 0, math.inf
    for k, e in enumerate(vectors):
        d = sum((float(a) - float(b)) ** 2 for a, b in zip(q, e))
        if d < best_d:
            best, best_d = k, d
    return best


class TestQuantizer:
    def test_random_queries_match_exhaustive_scan(self):
        r = np.random.default_rng(0)
        vectors = r.standard_normal((32, 4))
        q = r.standard_normal((5000, 4))
        _, idx = quantize(q, vectors)
        assert [naive_nearest(v, vectors) for v in q] == idx.tolist()

    def test_lattice_queries_with_ties(self):
        # integer data makes every distance exact, so ties are real ties
        r = np.random.default_rng(1)
        vectors = r.integers(-2, 3, (24, 3)).astype(np.float64)
        vectors[5] = vectors[17]
        q = r.integers(-3, 4, (5000, 3)).astype(np.float64)
        _, idx = quantize(q, vectors)
        expected = [naive_nearest(v, vectors) for v in q]
        assert expected == idx.tolist()
        assert 17 not in idx.tolist()

    def test_midpoint_goes_to_lower_index(self):
        vectors = np.array([[1.0, 0.0], [-1.0, 0.0]])
        _, idx = quantize(np.zeros((1, 2)), vectors)
        assert idx[0] == 0
        _, idx = quantize(np.zeros((1, 2)), vectors[::-1].copy())
        assert idx[0] == 0

    def test_returns_codewords(self):
        r = np.random.default_rng(2)
        vectors = r.standard_normal((8, 3))
        zq, idx = quantize(r.standard_normal((2, 5, 3)), vectors)
        assert zq.shape == (2, 5, 3) and idx.shape == (2, 5)
        np.testing.assert_array_equal(zq, vectors[idx])

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            quantize(np.zeros((3, 4)), np.zeros((5, 3)))


class TestCodebookEMA:
    def clusters(self, seed=0, k=4, per=50):
        r = np.random.default_rng(seed)
        centres = r.standard_normal((k, 3)) * 3
        z = np.concatenate([c + 0.3 * r.standard_normal((per, 3)) for c in centres])
        idx = np.repeat(np.arange(k), per)
        means = np.stack([z[idx == i].mean(axis=0) for i in range(k)])
        return z, idx, means, r

    def test_gamma_zero_jumps_to_means(self):
        z, idx, means, r = self.clusters()
        cb = Codebook.init(r.standard_normal((4, 3)), decay=0.0)
        cb.ema_update(z, idx)
        np.testing.assert_allclose(cb.vectors, means, atol=1e-5)

    def test_converges_to_cluster_means(self):
        z, idx, means, r = self.clusters(1)
        cb = Codebook.init(r.standard_normal((4, 3)), decay=0.99)
        for _ in range(500):
            cb.ema_update(z, idx)
        np.testing.assert_allclose(cb.vectors, means, atol=1e-3)

    def test_unused_codeword_stays_put(self):
        z, idx, _, r = self.clusters(2, k=3)
        start = r.standard_normal((4, 3))
        cb = Codebook.init(start, decay=0.99)
        for _ in range(20):
            cb.ema_update(z, idx)
        # only the pseudo-count decays, so the ratio sums / counts is unchanged up to smoothing
        np.testing.assert_allclose(cb.vectors[3], start[3], rtol=1e-2)


class TestInfoNCE:
    def test_zero_projection_gives_ln11(self):
        cfg = VQCPCConfig(window=465 + 160 * 19, batch_size=2)
        model = VQCPC(cfg, seed=0, dtype=np.float64)
        for w in model.projections():
            w.data[:] = 0.0
        loss, diag = model.loss(signal((2, 2, cfg.window)), training=False, seed=3, bypass_quantizer=True)
        assert abs(diag["infonce"] - LN11) <= 1e-9
        assert diag["commitment"] == 0.0
        assert abs(float(loss.data) - LN11) <= 1e-9
        assert all(abs(s - LN11) <= 1e-9 for s in diag["step_losses"])

    def test_random_init_averages_to_ln11(self):
        cfg = VQCPCConfig(window=465 + 160 * 19, batch_size=2)
        x = signal((2, 2, cfg.window), 1)
        values = []
        for seed in range(100):
            model = VQCPC(cfg, seed=seed)
            _, diag = model.loss(x, training=False, seed=seed)
            values.append(diag["infonce"])
        assert abs(np.mean(values) - LN11) <= 0.05

    def test_negatives_exclude_positive(self):
        r = np.random.default_rng(0)
        pos = r.integers(0, 30, (4, 7))
        neg = sample_negatives(r, pos, 30, 10)
        assert neg.shape == (4, 7, 10)
        assert not np.any(neg == pos[..., None])
        assert neg.min() >= 0 and neg.max() < 30

    def test_perfect_prediction_beats_chance(self):
        # c predicts z exactly through W = identity; with unit-norm latents the positive has the largest score
        B, N, D = 2, 10, 16
        r = np.random.default_rng(4)
        z = r.standard_normal((B, N, D))
        z /= np.linalg.norm(z, axis=-1, keepdims=True)
        c = np.concatenate([z[:, 1:], np.zeros((B, 1, D))], axis=1) * 20
        loss, diag = cpc_infonce_loss(Tensor(c), Tensor(z), Tensor(z), z, [Tensor(np.eye(D))], 0.25, 4, 0)
        assert diag["infonce"] < 0.1
        assert diag["step_accuracy"][0] == 1.0

    def test_too_short_sequence(self):
        z = Tensor(np.zeros((1, 2, 3)))
        with pytest.raises(DataError):
            cpc_infonce_loss(Tensor(np.zeros((1, 2, 3))), z, z, z.data, [Tensor(np.eye(3))] * 2, 0.25, 1, 0)


class TestGradients:
    def test_end_to_end_loss_gradient(self):
        cfg = tiny_config()
        model = VQCPC(cfg, seed=1, dtype=np.float64)
        x = signal((2, 2, cfg.window), 2)
        names = ["enc.conv0.w", "enc.conv4.b", "enc.bn2.gamma", "enc.proj.w", "agg.gru0.w_hh", "agg.gru1.b_ih", "cpc.W1", "cpc.W2"]

        def f(*ts):
            for n, t in zip(names, ts):
                model.params[n] = t
            loss, _ = model.loss(x, training=True, seed=5, bypass_quantizer=True)
            return loss

        inputs = [model.params[n].data.copy() for n in names]
        assert grad_check(f, inputs) <= 1e-4

    def test_straight_through_passes_gradient_to_encoder(self):
        cfg = tiny_config()
        model = VQCPC(cfg, seed=2, dtype=np.float64)
        x = signal((2, 2, cfg.window), 3)
        with Tape() as tape:
            loss, _ = model.loss(x, training=True, seed=1)
        tape.backward(loss)
        g = model.params["enc.conv0.w"].grad
        assert g is not None and np.any(g != 0)


class TestCausality:
    def test_aggregator_is_causal(self):
        cfg = tiny_config(embedding_dim=4, feature_dim=5)
        model = VQCPC(cfg, seed=3, dtype=np.float64)
        r = np.random.default_rng(0)
        zq = r.standard_normal((1, 50, 4))
        base = model.aggregate(Tensor(zq)).data
        for t in range(50):
            pert = zq.copy()
            pert[0, t] += r.standard_normal(4)
            c = model.aggregate(Tensor(pert)).data
            np.testing.assert_array_equal(c[0, :t], base[0, :t])
            assert np.any(c[0, t] != base[0, t])

    def test_encoder_and_aggregator_are_causal(self):
        cfg = tiny_config(filters=6)
        model = VQCPC(cfg, seed=4, dtype=np.float64)
        hop, rf = cfg.hop, cfg.receptive_field
        n = rf + 49 * hop
        x = signal((1, 2, n), 5)
        base = model.forward(x)["c"].data
        assert base.shape[1] == 50
        r = np.random.default_rng(1)
        for t in range(1, 50):
            pert = x.copy()
            first_unseen = (t - 1) * hop + rf  # no latent before t reads this sample
            pert[..., first_unseen:] += r.standard_normal(pert[..., first_unseen:].shape)
            c = model.forward(pert)["c"].data
            np.testing.assert_array_equal(c[0, :t], base[0, :t])


class TestTraining:
    def test_train_checkpoint_and_reload(self, tmp_path):
        cfg = tiny_config(train_steps=12, checkpoint_every=5, lr=1e-2)
        sigs = [signal((2, 3000), s) for s in range(4)]
        res = train_vqcpc(sigs, cfg, seed=7, out_dir=tmp_path)
        assert len(res.curve) == 12
        assert (tmp_path / "curve.jsonl").read_text().count("\n") == 12
        back = VQCPC.load(tmp_path / "checkpoint.bin")
        assert back.cfg == cfg
        a = res.model.extract(sigs[0]).vectors
        np.testing.assert_allclose(back.extract(sigs[0]).vectors, a, rtol=1e-6, atol=1e-7)

    def test_training_is_deterministic(self, tmp_path):
        cfg = tiny_config(train_steps=6)
        sigs = [signal((2, 3000), s) for s in range(3)]
        for name in ("a", "b"):
            (tmp_path / name).mkdir()
            train_vqcpc(sigs, cfg, seed=1, out_dir=tmp_path / name)
        assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == (tmp_path / "b" / "checkpoint.bin").read_bytes()

    def test_loss_decreases(self):
        cfg = tiny_config(train_steps=150, lr=5e-3, filters=8, embedding_dim=4, feature_dim=4, codebook_size=8)
        t = np.arange(8000) / 16000
        sigs = [np.stack([np.sin(2 * np.pi * f * t), np.sin(2 * np.pi * f * t + 0.3)]) * 0.3 for f in (200, 350, 500, 800)]
        res = train_vqcpc(sigs, cfg, seed=0)
        first = np.mean([e["infonce"] for e in res.curve[:10]])
        last = np.mean([e["infonce"] for e in res.curve[-10:]])
        assert last < first - 0.2

    def test_checkpoint_shape_mismatch(self, tmp_path):
        model = VQCPC(tiny_config())
        model.save(tmp_path / "m.bin")
        other = VQCPC(tiny_config(filters=5))
        from binaural_si.container import load_container

        _, tensors = load_container(tmp_path / "m.bin")
        with pytest.raises(DataError, match="shape"):
            other.load_state_dict(tensors)

    def test_no_signals(self):
        with pytest.raises(DataError):
            train_vqcpc([], tiny_config(), seed=0)


class TestFeatureFiles:
    def test_round_trip(self, tmp_path):
        feats = {"a": np.ones((3, 4)), "b": np.zeros((5, 4))}
        save_features(tmp_path / "f.bin", feats, {"source": "x"})
        meta, back = load_features(tmp_path / "f.bin")
        assert meta["source"] == "x" and list(back) == ["a", "b"]
        np.testing.assert_array_equal(back["b"], feats["b"])

    def test_mixed_widths_rejected(self, tmp_path):
        with pytest.raises(ShapeError):
            save_features(tmp_path / "f.bin", {"a": np.ones((3, 4)), "b": np.ones((3, 5))})
