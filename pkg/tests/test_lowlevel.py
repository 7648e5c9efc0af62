import math

import numpy as np
import pytest

import _synth
from nriq import lowlevel, nnet

TOY_ENC = nnet.EncoderConfig(conv_blocks=((4, 3, 2), (8, 3, 2)), projection_dim=6, seed=3)


def _unit(rng, shape):
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _random_batch(rng, nb=2, d=4, p=5):
    anchors = _unit(rng, (nb, d, p))
    positives = _unit(rng, (nb, d, p))
    w = rng.random((nb, d, d))
    w = (w + w.transpose(0, 2, 1)) / 2
    return anchors, positives, w


class TestQACLLoss:
    def test_all_weights_one_gives_zero(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, p, _ = _random_batch(rng)
            loss, _, _ = lowlevel.qacl_loss(a, p, np.ones((2, 4, 4)), 0.5)
            assert abs(loss) <= 1e-9

    def test_all_weights_zero_is_infonce(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, p, _ = _random_batch(rng)
            loss, _, _ = lowlevel.qacl_loss(a, p, np.zeros((2, 4, 4)), 0.5)
            assert loss == pytest.approx(lowlevel.infonce_loss(a, p, 0.5), abs=1e-9)

    def test_hand_oracle_single_scene_two_versions(self):
        # Straight-line transcription of the per-anchor ratio for N_b=1, D=2.
        rng = np.random.default_rng(2)
        z = _unit(rng, (1, 2, 4))
        zp = _unit(rng, (1, 2, 4))
        s = 0.5
        tau = 0.5
        w = np.full((1, 2, 2), s)
        loss, _, _ = lowlevel.qacl_loss(z, zp, w, tau)

        def p(u, v):
            return math.exp(float(u @ v) / tau)

        expected = 0.0
        for j, k in ((0, 1), (1, 0)):
            num = p(z[0, j], zp[0, j]) + s * p(z[0, j], z[0, k])
            den = p(z[0, j], zp[0, j]) + p(z[0, j], z[0, k])
            expected += -math.log(num / den)
        assert loss == pytest.approx(expected, abs=1e-9)

    def test_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a, p, w = _random_batch(rng)
            loss, _, _ = lowlevel.qacl_loss(a, p, w, 0.5)
            assert loss >= -1e-12

    def test_version_permutation_invariance(self):
        rng = np.random.default_rng(4)
        a, p, w = _random_batch(rng, nb=1, d=5)
        base, _, _ = lowlevel.qacl_loss(a, p, w, 0.5)
        perm = rng.permutation(5)
        loss, _, _ = lowlevel.qacl_loss(
            a[:, perm], p[:, perm], w[:, perm][:, :, perm], 0.5
        )
        assert loss == pytest.approx(base, abs=1e-9)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        a, p, w = _random_batch(rng)
        _, ga, gp = lowlevel.qacl_loss(a, p, w, 0.5)
        h = 1e-5
        worst = 0.0
        for _ in range(20):
            da = rng.normal(size=a.shape)
            dp = rng.normal(size=p.shape)
            analytic = float(np.sum(ga * da) + np.sum(gp * dp))
            fp = lowlevel.qacl_loss(a + h * da, p + h * dp, w, 0.5)[0]
            fm = lowlevel.qacl_loss(a - h * da, p - h * dp, w, 0.5)[0]
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(analytic - fd) / max(abs(fd), 1e-10))
        assert worst <= 1e-4

    def test_rejects_non_unit_embeddings(self):
        rng = np.random.default_rng(6)
        a, p, w = _random_batch(rng)
        with pytest.raises(lowlevel.LossError):
            lowlevel.qacl_loss(a * 2.0, p, w, 0.5)

    def test_rejects_out_of_range_weights(self):
        rng = np.random.default_rng(7)
        a, p, w = _random_batch(rng)
        with pytest.raises(lowlevel.LossError):
            lowlevel.qacl_loss(a, p, w + 1.5, 0.5)


@pytest.fixture(scope="module")
def tiny_corpus():
    return [_synth.texture_image(200 + i, side=240) for i in range(4)]


class TestTrainLowLevel:
    def test_zero_epochs_returns_init(self, tiny_corpus):
        cfg = lowlevel.QACLConfig(epochs=0, encoder=TOY_ENC, seed=1)
        params = lowlevel.train_lowlevel(tiny_corpus, cfg)
        init = nnet.init_encoder(TOY_ENC)
        for k in init.tensors:
            assert np.array_equal(params.tensors[k], init.tensors[k])

    def test_loss_decreases_and_none_matches_infonce(self, tiny_corpus):
        records = []

        def on_step(step, loss, anchors, positives, weights):
            records.append((loss, lowlevel.infonce_loss(anchors, positives, 0.5)))
            assert np.all(weights == 0.0)

        cfg = lowlevel.QACLConfig(
            epochs=3, batch_scenes=4, measure="none", encoder=TOY_ENC, seed=0
        )
        lowlevel.train_lowlevel(tiny_corpus, cfg, on_step=on_step)
        assert len(records) == 3
        for qacl, infonce in records:
            assert qacl == pytest.approx(infonce, abs=1e-9)
        assert records[-1][0] < records[0][0]

    def test_deterministic(self, tiny_corpus):
        cfg = lowlevel.QACLConfig(epochs=1, batch_scenes=4, measure="none", encoder=TOY_ENC, seed=5)
        a = lowlevel.train_lowlevel(tiny_corpus, cfg)
        b = lowlevel.train_lowlevel(tiny_corpus, cfg)
        for k in a.tensors:
            assert np.array_equal(a.tensors[k], b.tensors[k])

    def test_empty_corpus(self):
        with pytest.raises(lowlevel.LossError):
            lowlevel.train_lowlevel([], lowlevel.QACLConfig())


class TestPristineStats:
    def test_identical_patches_zero_covariance(self):
        params = nnet.init_encoder(TOY_ENC)
        patch = _synth.texture_image(9, side=32)
        stats = lowlevel.compute_pristine_stats(params, [patch] * 10, patch_side=32)
        assert np.allclose(stats.sigma, 0.0, atol=1e-12)

    def test_order_invariance(self):
        params = nnet.init_encoder(TOY_ENC)
        imgs = [_synth.texture_image(300 + i, side=64) for i in range(5)]
        a = lowlevel.compute_pristine_stats(params, imgs, patch_side=32)
        b = lowlevel.compute_pristine_stats(params, imgs[::-1], patch_side=32)
        assert np.allclose(a.mu, b.mu, atol=1e-12)
        assert np.allclose(a.sigma, b.sigma, atol=1e-12)

    def test_mean_matches_two_pass_oracle(self):
        params = nnet.init_encoder(TOY_ENC)
        imgs = [_synth.texture_image(400 + i, side=64) for i in range(4)]
        stats = lowlevel.compute_pristine_stats(params, imgs, patch_side=32)
        feats = []
        for img in imgs:
            from nriq import imaging

            for patch in imaging.extract_patches(img, 32):
                feats.append(nnet.forward(params, patch).backbone)
        total = np.zeros_like(feats[0])
        for f in feats:
            total = total + f
        assert np.allclose(stats.mu, total / len(feats), atol=1e-12)

    def test_too_few_patches(self):
        params = nnet.init_encoder(TOY_ENC)
        with pytest.raises(lowlevel.LossError):
            lowlevel.compute_pristine_stats(params, [_synth.texture_image(1, side=32)], patch_side=32)

    def test_stats_roundtrip(self, tmp_path):
        params = nnet.init_encoder(TOY_ENC)
        imgs = [_synth.texture_image(500 + i, side=64) for i in range(3)]
        stats = lowlevel.compute_pristine_stats(params, imgs, patch_side=32)
        p = tmp_path / "stats.bin"
        lowlevel.save_stats(p, stats)
        loaded = lowlevel.load_stats(p)
        assert np.array_equal(loaded.mu, stats.mu)
        assert np.array_equal(loaded.sigma, stats.sigma)
        assert loaded.patch_side == stats.patch_side
        assert loaded.count == stats.count


class TestMahalanobisGap:
    def test_equal_means_zero(self):
        rng = np.random.default_rng(10)
        mu = rng.normal(size=4)
        s = rng.normal(size=(4, 4))
        s = s @ s.T
        assert lowlevel.mahalanobis_gap(mu, s, mu, s) <= 1e-9

    def test_identity_covariance_euclidean(self):
        mu_p = np.zeros(4)
        mu_d = np.array([1.0, 0.0, 0.0, 0.0])
        eye = np.eye(4)
        d = lowlevel.mahalanobis_gap(mu_p, eye, mu_d, eye)
        assert d == pytest.approx(1.0, abs=1e-9)

    def test_matches_solve_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            mu_a, mu_b = rng.normal(size=4), rng.normal(size=4)
            sa = rng.normal(size=(4, 4))
            sa = sa @ sa.T
            sb = rng.normal(size=(4, 4))
            sb = sb @ sb.T
            d = lowlevel.mahalanobis_gap(mu_a, sa, mu_b, sb)
            avg = 0.5 * (sa + sb)
            avg_reg = avg + (lowlevel.COV_REG_EPS * np.trace(avg) / 4 + 1e-12) * np.eye(4)
            diff = mu_a - mu_b
            expected = math.sqrt(float(diff @ np.linalg.solve(avg_reg, diff)))
            assert d == pytest.approx(expected, abs=1e-9)

    def test_symmetry_under_swap(self):
        rng = np.random.default_rng(12)
        mu_a, mu_b = rng.normal(size=3), rng.normal(size=3)
        sa = np.diag(rng.random(3) + 0.1)
        sb = np.diag(rng.random(3) + 0.1)
        assert lowlevel.mahalanobis_gap(mu_a, sa, mu_b, sb) == pytest.approx(
            lowlevel.mahalanobis_gap(mu_b, sb, mu_a, sa), abs=1e-12
        )


class TestQLow:
    def test_zero_distance_is_half(self):
        assert lowlevel.q_low(0.0) == pytest.approx(0.5)

    def test_large_distance_saturates(self):
        assert lowlevel.q_low(1e6) < 1e-3

    def test_ranking_invariant_to_k1(self):
        rng = np.random.default_rng(13)
        d = rng.random(50) * 100
        base = np.argsort([-x for x in d])
        # k1 kept small enough that the sigmoid does not saturate to exactly 0
        for k1 in (0.001, 0.01, 0.1, 1.0):
            q = np.array([lowlevel.q_low(x, k1) for x in d])
            assert np.array_equal(np.argsort(q), base)

    def test_rejects_bad_inputs(self):
        with pytest.raises(lowlevel.LossError):
            lowlevel.q_low(-1.0)
        with pytest.raises(lowlevel.LossError):
            lowlevel.q_low(1.0, k1=0.0)
