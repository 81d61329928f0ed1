import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from patchgraph.augment import AugmentConfig
from patchgraph.contrastive import (
    ContrastiveConfig,
    GraphBatch,
    MomentumPair,
    NegativeQueue,
    PatchBatch,
    combined_loss,
    graph_level_loss,
    info_nce,
    momentum_update,
    patch_level_loss,
    queue_push,
)
from patchgraph.encoders import EncoderConfig, GraphEncoder, PatchEncoder


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def identity_augment():
    return AugmentConfig(elastic_max_disp=0.0, noise_sigma=0.0, gamma_range=(1.0, 1.0))


def small_config(**kwargs):
    base = dict(queue_capacity=64, graph_queue_capacity=32, patch_batch=4, graph_batch=3)
    base.update(kwargs)
    return ContrastiveConfig(**base)


def make_pairs(seed=0):
    torch.manual_seed(seed)
    cfg = EncoderConfig(patch_size=(8, 8, 8), block_channels=(2, 4, 8), convs_per_block=(1, 1, 1))
    return (
        MomentumPair(PatchEncoder(cfg), momentum=0.999),
        MomentumPair(GraphEncoder(cfg), momentum=0.999),
        cfg,
    )


class TestInfoNCE:
    def test_symmetric_two_way_is_ln2(self):
        q = unit([1.0, 0.0, 0.0])
        positive = unit([1.0, 1.0, 0.0])
        negative = unit([1.0, -1.0, 0.0])  # same dot with q as the positive
        loss = info_nce(q, positive, [negative], temperature=0.2)
        assert float(loss) == pytest.approx(np.log(2.0), abs=1e-12)

    def test_tau_point_two_value(self):
        q = np.array([1.0, 0.0])
        loss = info_nce(q, q, [-q], temperature=0.2)
        # exp(5)/(exp(5)+exp(-5)): -log = log1p(exp(-10)) ~ 4.54e-5
        assert float(loss) == pytest.approx(float(np.log1p(np.exp(-10.0))), abs=1e-12)

    def test_orthogonal_high_temperature_limit(self):
        k = 7
        q = np.zeros(k + 1)
        q[0] = 1.0
        negatives = np.eye(k + 1)[1:]
        loss = info_nce(q, q, negatives, temperature=1e9)
        assert float(loss) == pytest.approx(np.log(k + 1), abs=1e-6)

    def test_loss_decreases_in_positive_similarity(self):
        negatives = [unit([0.0, 1.0, 0.0])]
        q = unit([1.0, 0.0, 0.0])
        sims = [unit([1.0, 0.0, 0.0]), unit([1.0, 0.5, 0.0]), unit([1.0, 2.0, 0.0])]
        losses = [float(info_nce(q, p, negatives, 0.2)) for p in sims]
        assert losses[0] < losses[1] < losses[2]

    def test_negative_order_invariant(self, rng):
        q = unit(rng.normal(size=8))
        pos = unit(rng.normal(size=8))
        negs = np.stack([unit(rng.normal(size=8)) for _ in range(5)])
        a = float(info_nce(q, pos, negs, 0.2))
        b = float(info_nce(q, pos, negs[::-1].copy(), 0.2))
        assert a == pytest.approx(b, abs=1e-12)

    def test_empty_negatives_rejected(self):
        q = unit([1.0, 0.0])
        with pytest.raises(ValueError, match="negative"):
            info_nce(q, q, np.zeros((0, 2)), 0.2)

    def test_zero_norm_rejected(self):
        q = unit([1.0, 0.0])
        with pytest.raises(ValueError, match="zero-norm"):
            info_nce(q, np.zeros(2), [q], 0.2)

    def test_differentiable_wrt_query(self):
        q = torch.tensor([1.0, 0.0], dtype=torch.float64, requires_grad=True)
        loss = info_nce(q, np.array([0.6, 0.8]), [np.array([0.0, 1.0])], 0.2)
        loss.backward()
        assert q.grad is not None and torch.isfinite(q.grad).all()


class TestQueue:
    def test_fifo_eviction_past_capacity(self):
        q = NegativeQueue(capacity=8, feature_dim=2)
        for i in range(9):
            q.push(torch.full((1, 2), float(i)), tags=i)
        emb, tags = q.entries()
        assert len(q) == 8
        assert tags.tolist() == list(range(1, 9))  # first pushed is evicted
        assert emb[:, 0].tolist() == [float(i) for i in range(1, 9)]

    def test_batch_push_growth(self):
        q = NegativeQueue(capacity=512, feature_dim=4)
        q.push(torch.randn(128, 4), tags=torch.zeros(128, dtype=torch.int64))
        assert len(q) == 128
        q.push(torch.randn(128, 4), tags=3)
        assert len(q) == 256

    def test_tags_preserved(self):
        q = NegativeQueue(capacity=16, feature_dim=2)
        q.push(torch.ones(3, 2), tags=torch.tensor([5, 6, 7]))
        _, tags = q.entries()
        assert tags.tolist() == [5, 6, 7]
        assert q.embeddings_for_tag(6).shape == (1, 2)

    def test_oversized_push_keeps_last_capacity(self):
        q = NegativeQueue(capacity=4, feature_dim=1)
        q.push(torch.arange(10, dtype=torch.float32)[:, None], tags=torch.arange(10))
        emb, tags = q.entries()
        assert emb[:, 0].tolist() == [6.0, 7.0, 8.0, 9.0]
        assert tags.tolist() == [6, 7, 8, 9]

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(min_value=1, max_value=7), min_size=1, max_size=12))
    def test_survivors_are_exactly_the_last_capacity(self, batch_sizes):
        capacity = 10
        q = NegativeQueue(capacity=capacity, feature_dim=1)
        model = []
        counter = 0
        for b in batch_sizes:
            values = [float(counter + i) for i in range(b)]
            counter += b
            q.push(torch.tensor(values)[:, None], tags=torch.tensor([int(v) for v in values]))
            model.extend(values)
        emb, tags = q.entries()
        assert emb[:, 0].tolist() == model[-capacity:]
        assert len(q) == min(capacity, len(model))

    def test_state_roundtrip(self):
        q = NegativeQueue(capacity=6, feature_dim=3)
        q.push(torch.randn(4, 3), tags=torch.tensor([1, 2, 3, 4]))
        q2 = NegativeQueue(capacity=6, feature_dim=3)
        q2.load_state_dict(q.state_dict())
        a, ta = q.entries()
        b, tb = q2.entries()
        assert torch.equal(a, b) and torch.equal(ta, tb)


class TestMomentum:
    def test_scalar_cases(self):
        online = torch.nn.Linear(1, 1, bias=False)
        with torch.no_grad():
            online.weight.fill_(1.0)
        for m, expected in ((1.0, 0.0), (0.0, 1.0), (0.9, 0.1)):
            pair = MomentumPair(online, momentum=m)
            with torch.no_grad():
                pair.key.weight.fill_(0.0)
            momentum_update(pair)
            assert pair.key.weight.item() == pytest.approx(expected, abs=1e-7)

    def test_contraction_identity(self):
        torch.manual_seed(0)
        online = torch.nn.Linear(8, 8)
        pair = MomentumPair(online, momentum=0.97)
        with torch.no_grad():
            for p in pair.key.parameters():
                p.add_(torch.randn_like(p))

            def gap():
                return torch.sqrt(
                    sum(
                        ((pk - po) ** 2).sum()
                        for pk, po in zip(pair.key.parameters(), pair.online.parameters())
                    )
                ).item()

            before = gap()
            momentum_update(pair)
            assert gap() == pytest.approx(0.97 * before, rel=1e-6)

    def test_key_requires_no_grad(self):
        pair = MomentumPair(torch.nn.Linear(2, 2))
        assert all(not p.requires_grad for p in pair.key.parameters())


class TestPatchLevelLoss:
    def make_batch(self, rng, b=4):
        return PatchBatch(
            region_id=3,
            patches=rng.normal(size=(b, 8, 8, 8)).astype(np.float32),
            coords=np.array([0.2, 0.5, 0.8]),
        )

    def test_two_subjects_empty_queue_one_negative(self, rng):
        patch_pair, _, cfg = make_pairs()
        queue = NegativeQueue(16, cfg.feature_dim)
        batch = self.make_batch(rng, b=2)
        loss, info = patch_level_loss(
            batch, patch_pair, queue, small_config(), identity_augment(), np.random.default_rng(0)
        )
        assert info["n_negatives"] == 1
        assert torch.isfinite(loss)

    def test_loss_near_uniform_logit_value(self, rng):
        # the uniform-logit oracle ln(n_neg+1) is valid when logits are nearly
        # flat; a high temperature realizes that regime exactly (at tau=0.2
        # the tied online/key init makes the positive logit genuinely larger)
        patch_pair, _, cfg = make_pairs(seed=3)
        queue = NegativeQueue(256, cfg.feature_dim)
        batch = self.make_batch(rng, b=8)
        loss, info = patch_level_loss(
            batch, patch_pair, queue, small_config(temperature=20.0), AugmentConfig(),
            np.random.default_rng(0),
        )
        expected = np.log(info["n_negatives"] + 1)
        assert abs(float(loss.detach()) - expected) / expected < 0.2

    def test_loss_magnitude_at_default_temperature(self, rng):
        patch_pair, _, cfg = make_pairs(seed=3)
        queue = NegativeQueue(256, cfg.feature_dim)
        batch = self.make_batch(rng, b=8)
        loss, info = patch_level_loss(
            batch, patch_pair, queue, small_config(), AugmentConfig(), np.random.default_rng(0)
        )
        expected = np.log(info["n_negatives"] + 1)
        assert 0.25 * expected < float(loss.detach()) < 2.0 * expected

    def test_queue_receives_keys_with_region_tag(self, rng):
        patch_pair, _, cfg = make_pairs()
        queue = NegativeQueue(64, cfg.feature_dim)
        batch = self.make_batch(rng, b=4)
        patch_level_loss(
            batch, patch_pair, queue, small_config(), identity_augment(), np.random.default_rng(0)
        )
        emb, tags = queue.entries()
        assert len(queue) == 4
        assert (tags == 3).all()
        np.testing.assert_allclose(emb.norm(dim=1).numpy(), 1.0, atol=1e-5)

    def test_negatives_filter_on_region_tag(self, rng):
        patch_pair, _, cfg = make_pairs()
        queue = NegativeQueue(64, cfg.feature_dim)
        queue.push(torch.randn(5, cfg.feature_dim), tags=torch.tensor([3, 3, 9, 9, 9]))
        batch = self.make_batch(rng, b=2)
        _, info = patch_level_loss(
            batch, patch_pair, queue, small_config(), identity_augment(), np.random.default_rng(0)
        )
        # 1 in-batch negative + only the 2 queue entries tagged with region 3
        assert info["n_negatives"] == 3

    def test_single_subject_empty_queue_rejected(self, rng):
        patch_pair, _, cfg = make_pairs()
        queue = NegativeQueue(16, cfg.feature_dim)
        with pytest.raises(ValueError, match="negative|queue"):
            patch_level_loss(
                self.make_batch(rng, b=1),
                patch_pair,
                queue,
                small_config(),
                identity_augment(),
                np.random.default_rng(0),
            )

    def test_ema_applied_during_loss(self, rng):
        patch_pair, _, cfg = make_pairs()
        with torch.no_grad():
            for p in patch_pair.key.parameters():
                p.add_(1.0)
        gap_before = float(
            sum(
                (pk - po).abs().sum()
                for pk, po in zip(patch_pair.key.parameters(), patch_pair.online.parameters())
            )
        )
        queue = NegativeQueue(16, cfg.feature_dim)
        patch_level_loss(
            self.make_batch(rng), patch_pair, queue, small_config(), identity_augment(),
            np.random.default_rng(0),
        )
        gap_after = float(
            sum(
                (pk - po).abs().sum()
                for pk, po in zip(patch_pair.key.parameters(), patch_pair.online.parameters())
            )
        )
        assert gap_after == pytest.approx(0.999 * gap_before, rel=1e-4)


class TestGraphLevelLoss:
    def make_batch(self, rng, b=3, n=4):
        adj = np.zeros((b, n, n), dtype=np.float32)
        adj[:, 0, 1] = adj[:, 1, 0] = 1
        return GraphBatch(
            patches=rng.normal(size=(b, n, 8, 8, 8)).astype(np.float32),
            coords=rng.uniform(size=(n, 3)),
            adjacency=adj,
        )

    def test_batch_of_16_gives_15_negatives(self, rng):
        patch_pair, graph_pair, cfg = make_pairs()
        batch = self.make_batch(rng, b=16)
        _, info = graph_level_loss(
            batch, patch_pair, graph_pair, None, small_config(), identity_augment(),
            np.random.default_rng(0),
        )
        assert info["n_negatives"] == 15

    def test_identical_graphs_degenerate_loss(self, rng):
        patch_pair, graph_pair, cfg = make_pairs(seed=5)
        one = rng.normal(size=(1, 4, 8, 8, 8)).astype(np.float32)
        batch = GraphBatch(
            patches=np.repeat(one, 5, axis=0),
            coords=rng.uniform(size=(4, 3)),
            adjacency=np.zeros((5, 4, 4), dtype=np.float32),
        )
        loss, info = graph_level_loss(
            batch, patch_pair, graph_pair, None, small_config(), identity_augment(),
            np.random.default_rng(0),
        )
        # all embeddings equal: positive and negative logits coincide
        assert float(loss) == pytest.approx(np.log(info["n_negatives"] + 1), abs=1e-4)

    def test_queue_push_and_use(self, rng):
        patch_pair, graph_pair, cfg = make_pairs()
        queue = NegativeQueue(32, cfg.feature_dim)
        batch = self.make_batch(rng, b=3)
        graph_level_loss(
            batch, patch_pair, graph_pair, queue, small_config(), identity_augment(),
            np.random.default_rng(0),
        )
        assert len(queue) == 3
        _, info = graph_level_loss(
            batch, patch_pair, graph_pair, queue, small_config(), identity_augment(),
            np.random.default_rng(1),
        )
        assert info["n_negatives"] == 2 + 3

    def test_queue_off_switch(self, rng):
        patch_pair, graph_pair, cfg = make_pairs()
        queue = NegativeQueue(32, cfg.feature_dim)
        config = small_config(use_graph_queue=False)
        graph_level_loss(
            self.make_batch(rng), patch_pair, graph_pair, queue, config, identity_augment(),
            np.random.default_rng(0),
        )
        assert len(queue) == 0

    def test_single_graph_empty_queue_rejected(self, rng):
        patch_pair, graph_pair, cfg = make_pairs()
        with pytest.raises(ValueError, match="negative|queue"):
            graph_level_loss(
                self.make_batch(rng, b=1), patch_pair, graph_pair, None, small_config(),
                identity_augment(), np.random.default_rng(0),
            )


class TestCombinedLoss:
    def test_unweighted_sum(self):
        out = combined_loss(torch.tensor(0.3), torch.tensor(0.7), ContrastiveConfig())
        assert float(out) == pytest.approx(1.0, abs=1e-7)

    def test_gradient_linearity(self):
        a = torch.tensor(0.3, requires_grad=True)
        b = torch.tensor(0.7, requires_grad=True)
        combined_loss(3 * a, 2 * b, ContrastiveConfig()).backward()
        assert a.grad.item() == pytest.approx(3.0)
        assert b.grad.item() == pytest.approx(2.0)

    def test_zero_graph_weight_reduces_to_patch_loss(self):
        cfg = ContrastiveConfig(graph_loss_weight=0.0)
        out = combined_loss(torch.tensor(0.42), torch.tensor(99.0), cfg)
        assert float(out) == pytest.approx(0.42)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError, match="temperature"):
            ContrastiveConfig(temperature=0.0)
        with pytest.raises(ValueError, match="momentum"):
            ContrastiveConfig(momentum=1.5)


class TestLossGradients:
    def test_patch_loss_gradient_matches_finite_differences(self, rng):
        torch.manual_seed(11)
        cfg = EncoderConfig(patch_size=(8, 8, 8), block_channels=(2, 2, 2), convs_per_block=(1, 1, 1))
        pair = MomentumPair(PatchEncoder(cfg).double(), momentum=1.0)  # freeze key
        batch = PatchBatch(
            region_id=0,
            patches=rng.normal(size=(3, 8, 8, 8)).astype(np.float32),
            coords=np.array([0.5, 0.5, 0.5]),
        )
        queue = NegativeQueue(8, cfg.feature_dim)
        queue_state = queue.state_dict()

        def compute():
            # each loss call pushes keys; restore so every evaluation sees the
            # same negative set
            queue.load_state_dict(queue_state)
            return patch_level_loss(
                batch, pair, queue, small_config(), identity_augment(), np.random.default_rng(0)
            )[0]

        # cast the online path to double for clean numerics
        pair.online.double()
        pair.key.double()
        loss = compute()
        loss.backward()
        conv = pair.online.features.stack[0]
        analytic = conv.weight.grad[0, 0, 1, 1, 1].item()
        eps = 1e-6
        with torch.no_grad():
            orig = conv.weight[0, 0, 1, 1, 1].item()
            conv.weight[0, 0, 1, 1, 1] = orig + eps
            up = float(compute())
            conv.weight[0, 0, 1, 1, 1] = orig - eps
            down = float(compute())
            conv.weight[0, 0, 1, 1, 1] = orig
        numeric = (up - down) / (2 * eps)
        assert abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12) < 1e-3
