import math

import numpy as np
import pytest
import torch

from eliot import dualquat
from eliot.cloud_io import PointCloud
from eliot.errors import ConfigError
from eliot.model import (EliotNet, FeatureSet, NetConfig, build_params,
                         check_store_matches, positional_encode)

from helpers import knn_oracle

RNG = np.random.default_rng(4242)

TABLE_REF = NetConfig(pe_bands=64)  # reference KITTI configuration


def random_cloud(n, extent=8.0, seed=0, c=1):
    rng = np.random.default_rng(seed)
    return PointCloud(rng.uniform(-extent, extent, size=(n, 3)),
                      rng.uniform(0, 1, size=(n, c)))


def feature_set(cfg, seed=0):
    rng = np.random.default_rng(seed)
    return FeatureSet(
        keypoints=torch.tensor(rng.uniform(-5, 5, (cfg.n_key, 3)), dtype=torch.float32),
        features=torch.tensor(rng.normal(size=(cfg.n_key, cfg.c_prime)),
                              dtype=torch.float32))


class TestNetConfig:
    def test_reference_values(self):
        cfg = TABLE_REF.validate()
        assert cfg.n_key == 1024
        assert cfg.c_prime == 64
        assert cfg.token_width == 256
        assert cfg.pe_width == 3 * (2 * 64 + 1)
        assert cfg.num_queries == 1024
        assert cfg.head_mlp_fc[-1] == 8

    def test_head_divisibility(self):
        with pytest.raises(ConfigError, match="divide"):
            NetConfig.tiny(enc_heads=3)

    def test_queries_must_match_keypoints(self):
        with pytest.raises(ConfigError, match="num_queries"):
            NetConfig(num_queries=512).validate()

    def test_radii_increasing(self):
        with pytest.raises(ConfigError, match="increasing"):
            NetConfig(sa_radii=(1.0, 0.5)).validate()

    def test_final_width_is_eight(self):
        with pytest.raises(ConfigError, match="8"):
            NetConfig(head_mlp_fc=(64, 9)).validate()


class TestPositionalEncode:
    def test_scalar_zero(self):
        out = positional_encode(torch.zeros(1, 1, dtype=torch.float64), bands=1)
        assert out.tolist() == [[0.0, 0.0, 1.0]]

    def test_quarter_period(self):
        out = positional_encode(torch.tensor([[math.pi / 2]], dtype=torch.float64),
                                bands=1)
        assert abs(out[0, 0] - math.pi / 2) < 1e-12
        assert abs(out[0, 1] - 1.0) < 1e-12
        assert abs(out[0, 2]) < 1e-12

    def test_width_law(self):
        for bands in (1, 4, 10, 64):
            out = positional_encode(torch.zeros(5, 3), bands=bands)
            assert out.shape == (5, 3 * (2 * bands + 1))

    def test_normalization_maps_extent_to_pi(self):
        out = positional_encode(torch.tensor([[75.0, 0.0, -75.0]]), bands=1,
                                normalize=True, bounds=75.0)
        assert torch.allclose(out[0, :3], torch.tensor([math.pi, 0.0, -math.pi]))

    def test_doubling_frequencies(self):
        x = torch.tensor([[0.3]], dtype=torch.float64)
        out = positional_encode(x, bands=3)
        expect = [0.3]
        for k in range(3):
            expect += [math.sin(2 ** k * 0.3), math.cos(2 ** k * 0.3)]
        assert np.allclose(out.numpy()[0], expect, atol=1e-12)

    def test_custom_frequency_rows(self):
        x = torch.tensor([[0.5, 1.0, -0.25]], dtype=torch.float64)
        freqs = torch.tensor(RNG.normal(size=(2, 3)))
        out = positional_encode(x, bands=2, freqs=freqs)
        assert torch.allclose(out[0, 3:6], torch.sin(freqs[0] * x[0]))

    def test_gauss_mode_keeps_width_and_determinism(self):
        cfg = NetConfig.tiny(pe_method="gauss")
        a = build_params(cfg, seed=5)
        b = build_params(cfg, seed=5)
        assert torch.equal(a["pe.freqs"], b["pe.freqs"])
        assert a["pe.freqs"].shape == (cfg.pe_bands, 3)
        out = positional_encode(torch.zeros(4, 3), cfg.pe_bands, freqs=a["pe.freqs"])
        assert out.shape == (4, cfg.pe_width)


class TestSetAbstraction:
    def test_reference_shapes(self):
        cloud = random_cloud(1200, extent=6.0, seed=3)
        net = EliotNet(TABLE_REF, seed=0)
        fs = net.set_abstraction(cloud)
        assert fs.keypoints.shape == (1024, 3)
        assert fs.features.shape == (1024, 64)

    def test_degenerate_identical_points(self):
        cfg = NetConfig.tiny(n_key=8, num_queries=8)
        cloud = PointCloud(np.zeros((16, 3)), np.full((16, 1), 0.5))
        net = EliotNet(cfg, seed=0)
        fs = net.set_abstraction(cloud)
        assert torch.allclose(fs.keypoints, torch.zeros(8, 3))
        assert torch.allclose(fs.features, fs.features[0].expand(8, -1))

    def test_too_small_cloud(self):
        cfg = NetConfig.tiny()
        net = EliotNet(cfg, seed=0)
        with pytest.raises(ValueError, match="need >="):
            net.set_abstraction(random_cloud(10))

    def test_permutation_of_nonkeypoint_points(self):
        # keypoints held fixed; all balls under-full; features must agree
        cfg = NetConfig.tiny(n_key=8, num_queries=8, max_samples=(64, 64))
        net = EliotNet(cfg, seed=1)
        rng = np.random.default_rng(8)
        pts = rng.uniform(-4, 4, size=(40, 3))
        feats = rng.uniform(0, 1, size=(40, 1))
        keypoint_idx = np.arange(8)
        base = PointCloud(pts, feats)
        fs1 = net.set_abstraction(base, keypoint_indices=keypoint_idx)
        perm = np.concatenate([np.arange(8), 8 + rng.permutation(32)])
        shuffled = PointCloud(pts[perm], feats[perm])
        fs2 = net.set_abstraction(shuffled, keypoint_indices=keypoint_idx)
        assert torch.allclose(fs1.features, fs2.features, atol=1e-6)


class TestFlowEmbeddings:
    def test_irfe_width_law(self):
        for cfg in (NetConfig.tiny(), NetConfig.micro(), TABLE_REF):
            net = EliotNet(cfg, seed=0)
            tokens = net.irfe(feature_set(cfg, 1), feature_set(cfg, 2))
            assert tokens.shape == (cfg.n_key, 4 * cfg.c_prime)

    def test_irfe_zero_projection(self):
        cfg = NetConfig.tiny()
        net = EliotNet(cfg, seed=0)
        with torch.no_grad():
            for name in ("irfe.p_proj.w", "irfe.p_proj.b",
                         "irfe.q_proj.w", "irfe.q_proj.b"):
                net.store[name].zero_()
        fs_p, fs_q = feature_set(cfg, 1), feature_set(cfg, 2)
        tokens = net.irfe(fs_p, fs_q).detach()
        cp = cfg.c_prime
        assert torch.equal(tokens[:, :2 * cp], torch.zeros(cfg.n_key, 2 * cp))
        assert torch.equal(tokens[:, 2 * cp:3 * cp], fs_p.features)
        assert torch.equal(tokens[:, 3 * cp:], fs_q.features)

    def test_irfe_shared_weights_on_same_inputs(self):
        cfg = NetConfig.tiny()
        net = EliotNet(cfg, seed=0)
        with torch.no_grad():
            net.store["irfe.q_proj.w"].copy_(net.store["irfe.p_proj.w"])
            net.store["irfe.q_proj.b"].copy_(net.store["irfe.p_proj.b"])
        fs = feature_set(cfg, 3)
        tokens = net.irfe(fs, fs).detach()
        cp = cfg.c_prime
        assert torch.equal(tokens[:, :cp], tokens[:, cp:2 * cp])

    def test_irfe_mismatched_counts(self):
        cfg = NetConfig.tiny()
        net = EliotNet(cfg, seed=0)
        fs_p = feature_set(cfg, 1)
        fs_q = FeatureSet(fs_p.keypoints[:32], fs_p.features[:32])
        with pytest.raises(ValueError, match="counts differ"):
            net.irfe(fs_p, fs_q)

    def test_knn_embed_shape_and_self_match(self):
        cfg = NetConfig.tiny(flow_embedding="knn", n_group=1)
        net = EliotNet(cfg, seed=0)
        fs = feature_set(cfg, 4)
        tokens, table = net.knn_flow_embed(fs, fs, return_groups=True)
        assert tokens.shape == (cfg.n_key, 4 * cfg.c_prime)
        # every keypoint groups with itself: displacement block is zero
        assert np.array_equal(table.indices[:, 0], np.arange(cfg.n_key))

    def test_knn_embed_groups_match_oracle(self):
        cfg = NetConfig.tiny(flow_embedding="knn", n_group=5)
        net = EliotNet(cfg, seed=0)
        fs_p, fs_q = feature_set(cfg, 5), feature_set(cfg, 6)
        _, table = net.knn_flow_embed(fs_p, fs_q, return_groups=True)
        q = fs_q.keypoints.double().numpy()
        p = fs_p.keypoints.double().numpy()
        for i in range(cfg.n_key):
            assert np.array_equal(table.indices[i], knn_oracle(q, p[i], 5))

    def test_paths_interchangeable_shapes(self):
        base = NetConfig.tiny()
        knn_cfg = NetConfig.tiny(flow_embedding="knn")
        net_a = EliotNet(base, seed=0)
        net_b = EliotNet(knn_cfg, seed=0)
        cloud_p = random_cloud(200, seed=11)
        cloud_q = random_cloud(200, seed=12)
        out_a, maps_a = net_a.forward(cloud_p, cloud_q)
        out_b, maps_b = net_b.forward(cloud_p, cloud_q)
        assert out_a.shape == out_b.shape
        assert maps_a[0].shape == maps_b[0].shape


class TestTransformer:
    def test_attention_rows_are_probabilities(self):
        cfg = NetConfig.tiny()
        net = EliotNet(cfg, seed=0)
        tokens = torch.tensor(RNG.normal(size=(cfg.n_key, cfg.token_width)),
                              dtype=torch.float32)
        fs = feature_set(cfg, 7)
        _, maps = net.transformer_pose(tokens, fs.keypoints, fs.keypoints)
        for m in maps:
            assert m.min() >= 0
            sums = m.sum(dim=-1)
            assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_map_count_and_shape(self):
        cfg = NetConfig.tiny()
        net = EliotNet(cfg, seed=0)
        tokens = torch.zeros(cfg.n_key, cfg.token_width)
        fs = feature_set(cfg, 8)
        decoded, maps = net.transformer_pose(tokens, fs.keypoints, fs.keypoints)
        assert decoded.shape == (cfg.n_key, cfg.dec_dim)
        assert len(maps) == cfg.dec_layers
        assert maps[0].shape == (cfg.dec_heads, cfg.n_key, cfg.n_key)

    def test_identical_tokens_identical_outputs(self):
        cfg = NetConfig.tiny()
        net = EliotNet(cfg, seed=0)
        token = torch.tensor(RNG.normal(size=(1, cfg.token_width)), dtype=torch.float32)
        tokens = token.expand(cfg.n_key, -1)
        kp = torch.ones(cfg.n_key, 3)
        decoded, _ = net.transformer_pose(tokens, kp, kp)
        assert torch.equal(decoded, decoded[0].expand_as(decoded))


class TestPoseHead:
    def test_output_length_eight(self):
        cfg = NetConfig.tiny()
        net = EliotNet(cfg, seed=0)
        decoded = torch.tensor(RNG.normal(size=(cfg.n_key, cfg.dec_dim)),
                               dtype=torch.float32)
        assert net.pose_head(decoded).shape == (8,)

    def test_duplicate_token_invariance(self):
        cfg = NetConfig.tiny()
        net = EliotNet(cfg, seed=0)
        decoded = torch.tensor(RNG.normal(size=(cfg.n_key, cfg.dec_dim)),
                               dtype=torch.float32)
        doubled = torch.cat([decoded, decoded[:1]], dim=0)
        a = net.pose_head(decoded).detach()
        b = net.pose_head(doubled).detach()
        assert torch.equal(a, b)

    def test_constructed_identity_output(self):
        cfg = NetConfig.tiny()
        net = EliotNet(cfg, seed=0)
        last = len(cfg.head_mlp_fc) - 1
        with torch.no_grad():
            net.store[f"head.fc{last}.w"].zero_()
            net.store[f"head.fc{last}.b"].copy_(
                torch.tensor([1.0, 0, 0, 0, 0, 0, 0, 0]))
        decoded = torch.tensor(RNG.normal(size=(cfg.n_key, cfg.dec_dim)),
                               dtype=torch.float32)
        out = net.pose_head(decoded).detach()
        assert torch.equal(out, torch.tensor([1.0, 0, 0, 0, 0, 0, 0, 0]))


class TestForward:
    def _pair(self):
        return random_cloud(220, extent=6.0, seed=21), random_cloud(220, extent=6.0, seed=22)

    def test_eval_deterministic_bitwise(self):
        net = EliotNet(NetConfig.tiny(), seed=0)
        p, q = self._pair()
        a, _ = net.forward(p, q, mode="eval")
        b, _ = net.forward(p, q, mode="eval")
        assert torch.equal(a, b)

    def test_eval_output_is_unit(self):
        net = EliotNet(NetConfig.tiny(), seed=0)
        p, q = self._pair()
        out, _ = net.forward(p, q, mode="eval")
        assert float(dualquat.unit_residual(out.double())) < 1e-6

    def test_train_dropout_keyed_by_step(self):
        net = EliotNet(NetConfig.tiny(enc_dropout=0.2, dec_dropout=0.2), seed=0)
        p, q = self._pair()
        ga, gb = net.precompute(p), net.precompute(q)
        a, _ = net.forward(ga, gb, mode="train", step=1)
        b, _ = net.forward(ga, gb, mode="train", step=1)
        c, _ = net.forward(ga, gb, mode="train", step=2)
        # identical step: identical mask; the only other train-mode state is
        # batch-norm running averages, which do not feed train-mode outputs
        assert torch.equal(a.detach(), b.detach())
        assert not torch.equal(a.detach(), c.detach())

    def test_checkpoint_config_mismatch(self):
        store = build_params(NetConfig.tiny(), seed=0)
        with pytest.raises(ConfigError, match="checkpoint"):
            check_store_matches(NetConfig.micro(), store)

    def test_grouping_reuse_matches_direct(self):
        net = EliotNet(NetConfig.tiny(), seed=0)
        p, q = self._pair()
        direct, _ = net.forward(p, q)
        cached, _ = net.forward(net.precompute(p), net.precompute(q))
        assert torch.equal(direct, cached)


class TestEndToEndGradients:
    def test_micro_config_finite_differences(self):
        """Composed loss gradient vs central differences for every
        parameter, 64-bit."""
        cfg = NetConfig.micro()
        net = EliotNet(cfg, seed=3, dtype=torch.float64)
        rng = np.random.default_rng(5)
        cloud_p = PointCloud(rng.uniform(-4, 4, (40, 3)), rng.uniform(0, 1, (40, 1)))
        cloud_q = PointCloud(rng.uniform(-4, 4, (40, 3)), rng.uniform(0, 1, (40, 1)))
        gp, gq = net.precompute(cloud_p), net.precompute(cloud_q)
        gt = dualquat.dq_from_rt(
            dualquat.quat_canonicalize(torch.tensor([0.9, 0.1, 0.3, 0.1],
                                                    dtype=torch.float64)
                                       / math.sqrt(0.92)),
            torch.tensor([0.2, -0.1, 0.4], dtype=torch.float64))

        def loss_fn():
            pred, _ = net.forward(gp, gq, mode="train", step=1)
            return dualquat.total_loss(pred, gt, cfg.lambda_dual)

        loss = loss_fn()
        net.store.zero_grad()
        loss.backward()

        from helpers import finite_diff_grad, max_rel_error
        worst = 0.0
        checked = 0
        for name, p in net.store.trainable_items():
            # probe a detached copy of each parameter through the live tensor
            numeric = finite_diff_grad(lambda: loss_fn().detach(), p.tensor)
            analytic = p.grad if p.grad is not None else torch.zeros_like(p.tensor)
            err = max_rel_error(analytic, numeric, atol=5e-7)
            worst = max(worst, err)
            checked += p.tensor.numel()
            assert err < 1e-3, f"{name}: rel err {err:.2e}"
        assert checked > 1000
