"""Backbone, heads, scale module, initialization, and checkpoint roundtrips."""

import numpy as np
import pytest
import torch

from taildistill.models import (
    LWSScales,
    ModelBundle,
    ModelConfig,
    ModelError,
    freeze_backbone_train_scales,
    initialize_parameters,
    load_bundle,
    lws_forward,
    reinitialize,
    save_bundle,
)


def _batch(n=3, size=8, channels=3, seed=42):
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.uniform(size=(n, channels, size, size)).astype(np.float32))


class TestModelConfig:
    def test_roundtrip_through_dict(self, tiny_model_config):
        doc = tiny_model_config.to_dict()
        assert ModelConfig.from_dict(doc) == tiny_model_config

    def test_feature_dim_is_last_width(self):
        config = ModelConfig(num_classes=5, conv_channels=(8, 16), norm_groups=4)
        assert config.feature_dim == 16

    def test_single_class_rejected(self):
        with pytest.raises(ModelError):
            ModelConfig(num_classes=1)

    def test_indivisible_groups_rejected(self):
        with pytest.raises(ModelError, match="norm_groups"):
            ModelConfig(num_classes=4, conv_channels=(10,), norm_groups=4)


class TestBackbone:
    def test_batch_of_one_feature_shape(self, tiny_model_config):
        bundle = ModelBundle(tiny_model_config, seed=0)
        features = bundle.backbone(_batch(n=1))
        assert tuple(features.shape) == (1, tiny_model_config.feature_dim)

    def test_eval_forward_is_deterministic(self, tiny_model_config):
        bundle = ModelBundle(tiny_model_config, seed=0)
        bundle.eval()
        x = _batch()
        np.testing.assert_array_equal(bundle(x).detach().numpy(), bundle(x).detach().numpy())

    def test_wrong_input_shape_rejected(self, tiny_model_config):
        bundle = ModelBundle(tiny_model_config, seed=0)
        with pytest.raises(ModelError, match="expected input"):
            bundle.backbone(torch.zeros(2, 3, 16, 16))


class TestInitialization:
    def test_same_seed_identical(self, tiny_model_config):
        a = ModelBundle(tiny_model_config, seed=42)
        b = ModelBundle(tiny_model_config, seed=42)
        for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(pa.detach().numpy(), pb.detach().numpy(), err_msg=name)

    def test_different_seeds_differ(self, tiny_model_config):
        a = ModelBundle(tiny_model_config, seed=1)
        b = ModelBundle(tiny_model_config, seed=2)
        assert not np.allclose(
            a.classifier.weight.detach().numpy(), b.classifier.weight.detach().numpy()
        )

    def test_weight_stats_match_fan_in_uniform(self):
        """Uniform(-b, b) with b=1/sqrt(fan_in): mean 0, variance b^2/3."""
        layer = torch.nn.Linear(64, 200)
        initialize_parameters(layer, seed=42)
        weights = layer.weight.detach().numpy().ravel()
        bound = 1.0 / np.sqrt(64)
        assert len(weights) >= 10_000
        assert abs(weights.mean()) < 0.005
        np.testing.assert_allclose(weights.var(), bound**2 / 3, rtol=0.1)
        assert np.abs(weights).max() <= bound
        np.testing.assert_array_equal(layer.bias.detach().numpy(), np.zeros(200))

    def test_streams_keyed_by_parameter_name(self, tiny_model_config):
        """Adding a head must not shift any other parameter's draw."""
        import dataclasses

        plain = ModelBundle(tiny_model_config, seed=9)
        with_soft = ModelBundle(dataclasses.replace(tiny_model_config, with_soft_head=True), seed=9)
        np.testing.assert_array_equal(
            plain.classifier.weight.detach().numpy(),
            with_soft.classifier.weight.detach().numpy(),
        )
        np.testing.assert_array_equal(
            plain.backbone.blocks[0].weight.detach().numpy(),
            with_soft.backbone.blocks[0].weight.detach().numpy(),
        )

    def test_reinitialize_gives_fresh_network(self, tiny_model_config):
        bundle = ModelBundle(tiny_model_config, seed=1)
        fresh = reinitialize(bundle, seed=2)
        assert fresh.config == bundle.config
        assert not np.allclose(
            fresh.classifier.weight.detach().numpy(), bundle.classifier.weight.detach().numpy()
        )


class TestLWS:
    def test_fresh_scales_are_identity(self, tiny_model_config):
        bundle = ModelBundle(tiny_model_config, seed=0)
        bundle.eval()
        x = _batch()
        np.testing.assert_allclose(
            bundle.logits(x, head="lws").detach().numpy(),
            bundle.logits(x, head="hard").detach().numpy(),
            rtol=1e-6,
        )

    def test_scales_multiply_logits_elementwise(self):
        """Random scales against a per-class scalar oracle."""
        rng = np.random.default_rng(42)
        head = torch.nn.Linear(6, 4)
        initialize_parameters(head, seed=3)
        scales = LWSScales(4)
        with torch.no_grad():
            scales.log_scales.copy_(torch.from_numpy(rng.uniform(-1, 1, size=4).astype(np.float32)))
        features = torch.from_numpy(rng.standard_normal((5, 6)).astype(np.float32))
        out = lws_forward(features, head, scales).detach().numpy()
        base = head(features).detach().numpy()
        expected = base * np.exp(scales.log_scales.detach().numpy())
        np.testing.assert_allclose(out, expected, rtol=1e-5)

    def test_scales_stay_positive(self):
        scales = LWSScales(3)
        with torch.no_grad():
            scales.log_scales.copy_(torch.tensor([-30.0, 0.0, 30.0]))
        assert (scales.scales > 0).all()

    def test_class_count_mismatch_rejected(self):
        head = torch.nn.Linear(6, 4)
        with pytest.raises(ModelError, match="scales cover"):
            lws_forward(torch.zeros(2, 6), head, LWSScales(5))


class TestFreezing:
    def test_one_step_moves_only_scales(self, tiny_model_config):
        """An SGD step on the frozen bundle leaves every non-scale tensor intact."""
        bundle = ModelBundle(tiny_model_config, seed=4)
        before = {n: p.detach().clone() for n, p in bundle.named_parameters()}
        params = freeze_backbone_train_scales(bundle)
        optimizer = torch.optim.SGD(params, lr=0.5)
        x = _batch()
        loss = torch.nn.functional.cross_entropy(
            bundle.logits(x, head="lws"), torch.tensor([0, 1, 2])
        )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        for name, param in bundle.named_parameters():
            if name == "lws.log_scales":
                assert not torch.equal(param, before[name])
            else:
                assert torch.equal(param, before[name]), name


class TestHeads:
    def test_soft_head_requires_flag(self, tiny_model_config):
        bundle = ModelBundle(tiny_model_config, seed=0)
        with pytest.raises(ModelError, match="no soft head"):
            bundle.logits(_batch(), head="soft")

    def test_unknown_head_rejected(self, tiny_model_config):
        bundle = ModelBundle(tiny_model_config, seed=0)
        with pytest.raises(ModelError, match="unknown head"):
            bundle.logits(_batch(), head="aux")

    def test_momentum_twin_starts_equal(self, tiny_model_config):
        import dataclasses

        config = dataclasses.replace(tiny_model_config, selfsup_task="instance")
        bundle = ModelBundle(config, seed=5)
        for key, query in zip(bundle.momentum_parameters(), bundle.online_parameters()):
            assert torch.equal(key, query)
            assert not key.requires_grad


class TestCheckpointRoundtrip:
    def test_loaded_bundle_reproduces_logits(self, tiny_model_config, tmp_path):
        bundle = ModelBundle(tiny_model_config, seed=6)
        path = tmp_path / "model.ckpt"
        save_bundle(path, bundle, meta={"stage": 1})
        restored, meta = load_bundle(path)
        assert meta["stage"] == 1
        x = _batch()
        bundle.eval()
        restored.eval()
        np.testing.assert_allclose(
            restored(x).detach().numpy(), bundle(x).detach().numpy(), rtol=1e-6
        )

    def test_save_is_byte_deterministic(self, tiny_model_config, tmp_path):
        bundle = ModelBundle(tiny_model_config, seed=6)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_bundle(p1, bundle, meta={"stage": 1})
        save_bundle(p2, bundle, meta={"stage": 1})
        assert p1.read_bytes() == p2.read_bytes()

    def test_extras_roundtrip(self, tiny_model_config, tmp_path):
        bundle = ModelBundle(tiny_model_config, seed=6)
        queue = np.random.default_rng(42).standard_normal((4, 8)).astype(np.float32)
        path = tmp_path / "with_queue.ckpt"
        save_bundle(path, bundle, meta={"stage": 1}, extra_arrays={"contrastive_queue": queue})
        _, _, extras = load_bundle(path, with_extras=True)
        np.testing.assert_allclose(extras["contrastive_queue"], queue, rtol=1e-6)

    def test_extra_name_collision_rejected(self, tiny_model_config, tmp_path):
        bundle = ModelBundle(tiny_model_config, seed=6)
        with pytest.raises(ModelError, match="collides"):
            save_bundle(
                tmp_path / "x.ckpt", bundle, meta={},
                extra_arrays={"classifier.weight": np.zeros(2, dtype=np.float32)},
            )

    def test_missing_parameter_rejected(self, tiny_model_config, tmp_path):
        from taildistill.serialization import load_container, save_container

        bundle = ModelBundle(tiny_model_config, seed=6)
        path = tmp_path / "full.ckpt"
        save_bundle(path, bundle, meta={"stage": 1})
        arrays, meta = load_container(path)
        del arrays["classifier.bias"]
        broken = tmp_path / "broken.ckpt"
        save_container(broken, arrays, meta)
        with pytest.raises(ModelError, match="missing parameters"):
            load_bundle(broken)
