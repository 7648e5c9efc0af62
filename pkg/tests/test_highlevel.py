import math

import numpy as np
import pytest

import _synth
from nriq import highlevel, imaging, nnet

TOY_ENC = nnet.EncoderConfig(conv_blocks=((4, 3, 2), (8, 3, 2)), projection_dim=6, seed=4)


def _unit(rng, shape):
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@pytest.fixture
def anchors():
    z_g = np.zeros(6)
    z_g[0] = 1.0
    z_b = np.zeros(6)
    z_b[1] = 1.0
    return highlevel.AnchorPair(z_g=z_g, z_b=z_b)


class TestQHigh:
    def test_equal_margins_give_half(self, anchors):
        z = np.zeros(6)
        z[0] = z[1] = 1 / math.sqrt(2)
        assert highlevel.q_high(z, anchors) == pytest.approx(0.5)

    def test_at_good_anchor_orthogonal_pair(self, anchors):
        assert highlevel.q_high(anchors.z_g, anchors, k2=10.0) == pytest.approx(
            1.0 / (1.0 + math.exp(-10.0)), abs=1e-12
        )

    def test_ranking_invariant_to_k2(self, anchors):
        rng = np.random.default_rng(0)
        zs = _unit(rng, (40, 6))
        # k2 kept moderate so the sigmoid stays away from saturation ties
        base = np.argsort([highlevel.q_high(z, anchors, 1.0) for z in zs])
        for k2 in (0.5, 5.0, 10.0):
            order = np.argsort([highlevel.q_high(z, anchors, k2) for z in zs])
            assert np.array_equal(order, base)

    def test_rejects_non_unit(self, anchors):
        with pytest.raises(highlevel.GroupError):
            highlevel.q_high(np.full(6, 0.9), anchors)


class TestAnchorPair:
    def test_rejects_equal_anchors(self):
        v = np.zeros(4)
        v[0] = 1.0
        with pytest.raises(highlevel.GroupError):
            highlevel.AnchorPair(z_g=v, z_b=v.copy())

    def test_rejects_non_unit(self):
        with pytest.raises(highlevel.GroupError):
            highlevel.AnchorPair(z_g=np.ones(4), z_b=np.zeros(4))


class TestFormGroups:
    def test_paper_sizes(self, anchors):
        assert highlevel.group_size(128, 8) == 16
        assert highlevel.group_size(32, 8) == 4

    def test_group_contract(self, anchors):
        rng = np.random.default_rng(1)
        zs = _unit(rng, (32, 6))
        cfg = highlevel.GCLConfig(batch=32, k=8)
        split = highlevel.form_groups(zs, anchors, cfg)
        assert len(split.s_b) == len(split.s_g) == 4
        assert not set(split.s_b.tolist()) & set(split.s_g.tolist())
        qh = np.array([highlevel.q_high(z, anchors, cfg.k2) for z in zs])
        assert qh[split.s_g].min() >= qh[split.s_b].max()

    def test_tie_break_by_index(self, anchors):
        z = np.zeros(6)
        z[2] = 1.0  # orthogonal to both anchors: Q_H = 0.5 for everyone
        zs = np.tile(z, (16, 1))
        cfg = highlevel.GCLConfig(batch=16, k=8)
        split = highlevel.form_groups(zs, anchors, cfg)
        assert split.s_b.tolist() == [0, 1]
        assert split.s_g.tolist() == [14, 15]

    def test_split_invariant_to_k2(self, anchors):
        rng = np.random.default_rng(2)
        zs = _unit(rng, (24, 6))
        splits = []
        for k2 in (1.0, 10.0, 100.0):
            cfg = highlevel.GCLConfig(batch=24, k=6, k2=k2)
            splits.append(highlevel.form_groups(zs, anchors, cfg))
        for s in splits[1:]:
            assert np.array_equal(s.s_b, splits[0].s_b)
            assert np.array_equal(s.s_g, splits[0].s_g)

    def test_batch_too_small(self, anchors):
        rng = np.random.default_rng(3)
        with pytest.raises(highlevel.GroupError):
            highlevel.GCLConfig(batch=3, k=2)


class TestGCLLoss:
    def _split_and_embeddings(self, seed, n=12, m=3):
        rng = np.random.default_rng(seed)
        zs = _unit(rng, (n, 6))
        idx = rng.permutation(n)
        split = highlevel.GroupSplit(s_b=idx[:m], s_g=idx[m : 2 * m], order=idx)
        return split, zs

    def test_nonnegative(self):
        for seed in range(30):
            split, zs = self._split_and_embeddings(seed)
            loss, _ = highlevel.gcl_loss(split, zs, 0.1)
            assert loss >= -1e-12

    def test_group_swap_symmetry(self):
        split, zs = self._split_and_embeddings(1)
        swapped = highlevel.GroupSplit(s_b=split.s_g, s_g=split.s_b, order=split.order)
        a, _ = highlevel.gcl_loss(split, zs, 0.1)
        b, _ = highlevel.gcl_loss(swapped, zs, 0.1)
        assert a == pytest.approx(b, abs=1e-9)

    def test_within_group_permutation_invariance(self):
        split, zs = self._split_and_embeddings(2)
        rng = np.random.default_rng(99)
        base, _ = highlevel.gcl_loss(split, zs, 0.1)
        shuffled = highlevel.GroupSplit(
            s_b=rng.permutation(split.s_b), s_g=rng.permutation(split.s_g), order=split.order
        )
        loss, _ = highlevel.gcl_loss(shuffled, zs, 0.1)
        assert loss == pytest.approx(base, abs=1e-9)

    def test_hand_oracle_m2(self):
        # Independent straight-line transcription with M = 2 and 4 embeddings.
        rng = np.random.default_rng(3)
        zs = _unit(rng, (4, 5))
        split = highlevel.GroupSplit(
            s_b=np.array([0, 1]), s_g=np.array([2, 3]), order=np.arange(4)
        )
        tau = 0.1
        loss, _ = highlevel.gcl_loss(split, zs, tau)

        def p(i, j):
            return math.exp(float(zs[i] @ zs[j]) / tau)

        expected = 0.0
        for i, mate, others in ((2, 3, (0, 1)), (3, 2, (0, 1)), (0, 1, (2, 3)), (1, 0, (2, 3))):
            num = p(i, mate)
            den = num + sum(p(i, o) for o in others)
            expected += -math.log(num / den)
        assert loss == pytest.approx(expected, abs=1e-9)

    def test_non_members_get_zero_gradient(self):
        split, zs = self._split_and_embeddings(4)
        _, grads = highlevel.gcl_loss(split, zs, 0.1)
        members = set(split.s_b.tolist()) | set(split.s_g.tolist())
        for i in range(zs.shape[0]):
            if i not in members:
                assert np.all(grads[i] == 0.0)
            else:
                assert np.any(grads[i] != 0.0)

    def test_gradient_matches_finite_differences(self):
        split, zs = self._split_and_embeddings(5)
        _, grads = highlevel.gcl_loss(split, zs, 0.1)
        rng = np.random.default_rng(6)
        h = 1e-5
        worst = 0.0
        for _ in range(20):
            dz = rng.normal(size=zs.shape)
            analytic = float(np.sum(grads * dz))
            fp = highlevel.gcl_loss(split, zs + h * dz, 0.1)[0]
            fm = highlevel.gcl_loss(split, zs - h * dz, 0.1)[0]
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(analytic - fd) / max(abs(fd), 1e-10))
        assert worst <= 1e-4

    def test_rejects_single_member_groups(self):
        rng = np.random.default_rng(7)
        zs = _unit(rng, (4, 5))
        split = highlevel.GroupSplit(s_b=np.array([0]), s_g=np.array([1]), order=np.arange(4))
        with pytest.raises(highlevel.GroupError):
            highlevel.gcl_loss(split, zs, 0.1)


class TestAnchorIO:
    def test_roundtrip_bit_exact(self, tmp_path, anchors):
        p = tmp_path / "anchors.txt"
        highlevel.save_anchors(p, anchors)
        first = p.read_bytes()
        loaded = highlevel.load_anchors(p)
        highlevel.save_anchors(p, loaded)
        assert p.read_bytes() == first

    def test_renormalizes_with_warning(self, tmp_path):
        p = tmp_path / "anchors.txt"
        p.write_text("2 0 0 0\n0 1 0 0\n")
        with pytest.warns(UserWarning):
            loaded = highlevel.load_anchors(p)
        assert np.allclose(loaded.z_g, [1, 0, 0, 0])

    def test_rejects_wrong_line_count(self, tmp_path):
        p = tmp_path / "anchors.txt"
        p.write_text("1 0 0 0\n")
        with pytest.raises(highlevel.GroupError):
            highlevel.load_anchors(p)


class TestBootstrapAnchors:
    def test_single_exemplar_each_side(self):
        params = nnet.init_encoder(TOY_ENC)
        good = _synth.texture_image(20, side=224)
        bad = imaging.distort(good, imaging.DistortionSpec("noise", 2), 1)
        anchors = highlevel.bootstrap_anchors(params, [good], [bad])
        assert np.allclose(anchors.z_g, nnet.forward(params, good).projected, atol=1e-12)
        assert np.allclose(anchors.z_b, nnet.forward(params, imaging.center_crop(bad, 224)).projected, atol=1e-12)
        assert anchors.provenance == "bootstrapped"

    def test_order_irrelevant_and_unit_norm(self):
        params = nnet.init_encoder(TOY_ENC)
        goods = [_synth.texture_image(30 + i, side=224) for i in range(3)]
        bads = [imaging.distort(g, imaging.DistortionSpec("blur", 2), 0) for g in goods]
        a = highlevel.bootstrap_anchors(params, goods, bads)
        b = highlevel.bootstrap_anchors(params, goods[::-1], bads[::-1])
        assert np.allclose(a.z_g, b.z_g, atol=1e-12)
        assert abs(np.linalg.norm(a.z_g) - 1.0) <= 1e-6
        assert abs(np.linalg.norm(a.z_b) - 1.0) <= 1e-6

    def test_empty_side_rejected(self):
        params = nnet.init_encoder(TOY_ENC)
        with pytest.raises(highlevel.GroupError):
            highlevel.bootstrap_anchors(params, [], [_synth.texture_image(1, side=224)])


@pytest.fixture(scope="module")
def setup():
    goods = [_synth.texture_image(600 + i, side=240) for i in range(10)]
    bads = [
        imaging.distort(
            imaging.distort(g, imaging.DistortionSpec("blur", 2), i),
            imaging.DistortionSpec("noise", 2),
            i,
        )
        for i, g in enumerate(goods)
    ]
    params = nnet.init_encoder(TOY_ENC)
    anchors = highlevel.bootstrap_anchors(params, goods[:3], bads[:3])
    return goods, bads, params, anchors


class TestTrainHighLevel:
    def test_zero_epochs_unchanged(self, setup):
        goods, bads, params, anchors = setup
        cfg = highlevel.GCLConfig(batch=8, k=4, epochs=0, encoder=TOY_ENC, seed=0)
        out = highlevel.train_highlevel(goods, anchors, cfg, init_params=params)
        for k in params.tensors:
            assert np.array_equal(out.tensors[k], params.tensors[k])

    def test_anchors_frozen_and_gap_improves(self, setup):
        goods, bads, params, anchors = setup
        corpus = goods + bads
        zg_before = anchors.z_g.copy()
        zb_before = anchors.z_b.copy()

        def mean_gap(p):
            qg = [highlevel.q_high(nnet.forward(p, imaging.center_crop(g, 224)).projected, anchors) for g in goods]
            qb = [highlevel.q_high(nnet.forward(p, imaging.center_crop(b, 224)).projected, anchors) for b in bads]
            return float(np.mean(qg) - np.mean(qb))

        gap_before = mean_gap(params)
        cfg = highlevel.GCLConfig(batch=10, k=5, epochs=2, lr=1e-4, encoder=TOY_ENC, seed=0)
        trained = highlevel.train_highlevel(corpus, anchors, cfg, init_params=params)
        assert np.array_equal(anchors.z_g, zg_before)
        assert np.array_equal(anchors.z_b, zb_before)
        assert mean_gap(trained) >= gap_before

    def test_deterministic(self, setup):
        goods, bads, params, anchors = setup
        cfg = highlevel.GCLConfig(batch=8, k=4, epochs=1, lr=1e-4, encoder=TOY_ENC, seed=3)
        a = highlevel.train_highlevel(goods, anchors, cfg, init_params=params)
        b = highlevel.train_highlevel(goods, anchors, cfg, init_params=params)
        for k in a.tensors:
            assert np.array_equal(a.tensors[k], b.tensors[k])

    def test_corpus_too_small(self, setup):
        _, _, params, anchors = setup
        cfg = highlevel.GCLConfig(batch=8, k=4, epochs=1, encoder=TOY_ENC)
        with pytest.raises(highlevel.GroupError):
            highlevel.train_highlevel([_synth.texture_image(1, side=224)], anchors, cfg)
