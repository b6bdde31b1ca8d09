import numpy as np
import pytest
import torch

from frcseg.backbone import (PARAMETER_GROUPS, Adapter, BackboneConfig,
                             FreezePolicy, SegBackbone,
                             trainable_parameter_filter)
from frcseg.config import TrainConfig, desk_config
from frcseg.errors import ConfigError
from frcseg.model import SegModel
from frcseg.trainer import build_optimizer


def small_config(**overrides) -> BackboneConfig:
    base = dict(input_size=32, stage_channels=(8, 16, 24), decoder_channels=12,
                adapter_dim=4)
    base.update(overrides)
    return BackboneConfig(**base)


class TestBackboneConfig:
    def test_defaults_validate(self):
        BackboneConfig().validate()

    def test_rejects_too_few_stages(self):
        with pytest.raises(ConfigError):
            BackboneConfig(stage_channels=(8,)).validate()

    def test_rejects_indivisible_input(self):
        with pytest.raises(ConfigError):
            BackboneConfig(input_size=30, stage_channels=(8, 16)).validate()

    def test_downsample_factors(self):
        config = small_config()
        assert config.encoder_downsample == 8
        assert config.decoder_downsample == 2


class TestSegBackbone:
    def test_output_shapes(self):
        torch.manual_seed(0)
        config = small_config()
        model = SegBackbone(config)
        probs, enc, dec = model(torch.rand(2, 3, 32, 32))
        assert probs.shape == (2, 2, 32, 32)
        assert enc.shape == (2, 24, 4, 4)
        assert dec.shape == (2, 12, 16, 16)

    def test_probabilities_form_a_simplex(self):
        torch.manual_seed(1)
        model = SegBackbone(small_config())
        with torch.no_grad():
            probs, _, _ = model(torch.rand(1, 3, 32, 32))
        assert float(probs.min()) >= 0.0
        sums = probs.sum(dim=1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)

    def test_deterministic_forward(self):
        torch.manual_seed(2)
        model = SegBackbone(small_config())
        x = torch.rand(1, 3, 32, 32)
        a, _, _ = model(x)
        b, _, _ = model(x.clone())
        assert torch.equal(a, b)

    def test_per_sample_independence(self):
        # no batch statistics anywhere: a sample's output cannot depend on
        # its batch neighbors, which keeps student and teacher comparable
        torch.manual_seed(3)
        model = SegBackbone(small_config())
        model.eval()
        x = torch.rand(3, 3, 32, 32)
        full, _, _ = model(x)
        solo, _, _ = model(x[1:2])
        assert torch.allclose(full[1], solo[0], atol=1e-6)

    def test_rejects_wrong_input_size(self):
        model = SegBackbone(small_config())
        with pytest.raises(ConfigError):
            model(torch.rand(1, 3, 64, 64))
        with pytest.raises(ConfigError):
            model(torch.rand(1, 1, 32, 32))

    @pytest.mark.parametrize("stages,size", [((4, 8), 16), ((4, 8, 12, 16), 64),
                                             ((6, 12, 18, 24, 30), 64)])
    def test_various_depths(self, stages, size):
        torch.manual_seed(4)
        config = BackboneConfig(input_size=size, stage_channels=stages,
                                decoder_channels=8, adapter_dim=2)
        model = SegBackbone(config)
        probs, enc, dec = model(torch.rand(1, 3, size, size))
        assert probs.shape == (1, 2, size, size)
        assert enc.shape[-1] == size // 2 ** len(stages)
        assert dec.shape[-1] == size // 2

    def test_state_dict_round_trip_is_bit_exact(self):
        torch.manual_seed(5)
        model = SegBackbone(small_config())
        clone = SegBackbone(small_config())
        clone.load_state_dict(model.state_dict())
        for (na, pa), (nb, pb) in zip(model.state_dict().items(),
                                      clone.state_dict().items()):
            assert na == nb and torch.equal(pa, pb)


class TestAdapter:
    def test_fresh_adapter_is_identity(self):
        torch.manual_seed(6)
        adapter = Adapter(8, 3)
        x = torch.randn(2, 8, 5, 5)
        assert torch.equal(adapter(x), x)

    def test_trained_adapter_moves_output(self):
        torch.manual_seed(7)
        adapter = Adapter(8, 3)
        with torch.no_grad():
            adapter.up.weight.add_(0.1)
        x = torch.randn(1, 8, 4, 4)
        assert not torch.allclose(adapter(x), x)


class TestParameterGroups:
    def test_groups_partition_all_parameters(self):
        cfg = desk_config()
        model = SegModel(cfg.backbone, cfg.region, cfg.fem)
        groups = model.parameter_groups()
        assert set(groups) == set(PARAMETER_GROUPS)
        seen = [id(p) for params in groups.values() for p in params]
        assert len(seen) == len(set(seen)), "a parameter appears in two groups"
        assert set(seen) == {id(p) for p in model.parameters()}

    def test_adapters_separate_from_encoder_body(self):
        model = SegBackbone(small_config())
        groups = model.parameter_groups()
        adapter_ids = {id(p) for stage in model.stages
                       for p in stage.adapter.parameters()}
        assert {id(p) for p in groups["adapters"]} == adapter_ids
        assert not adapter_ids & {id(p) for p in groups["encoder_body"]}


class TestFreezePolicy:
    def test_unknown_group_rejected(self):
        with pytest.raises(ConfigError):
            FreezePolicy(frozenset({"segmentation_head"}))

    def test_selective_excludes_body_and_decoder(self):
        policy = FreezePolicy.selective_finetune()
        assert policy.trainable == {"seg_head", "adapters", "fem", "region"}

    def test_filter_selects_only_policy_groups(self):
        cfg = desk_config()
        model = SegModel(cfg.backbone, cfg.region, cfg.fem)
        groups = model.parameter_groups()
        selected = trainable_parameter_filter(groups, FreezePolicy.selective_finetune())
        selected_ids = {id(p) for p in selected}
        for name in ("seg_head", "adapters", "fem"):
            assert {id(p) for p in groups[name]} <= selected_ids
        for name in ("encoder_body", "decoder"):
            assert not {id(p) for p in groups[name]} & selected_ids

    def test_train_all_is_identity_filter(self):
        cfg = desk_config()
        model = SegModel(cfg.backbone, cfg.region, cfg.fem)
        selected = trainable_parameter_filter(model.parameter_groups(),
                                              FreezePolicy.train_all())
        assert {id(p) for p in selected} == {id(p) for p in model.parameters()}

    def test_empty_policy_rejected_at_optimizer_construction(self):
        cfg = desk_config()
        model = SegModel(cfg.backbone, cfg.region, cfg.fem)
        with pytest.raises(ConfigError):
            build_optimizer(model, cfg, policy=FreezePolicy(frozenset()))

    def test_missing_group_in_model_rejected(self):
        with pytest.raises(ConfigError):
            trainable_parameter_filter({"seg_head": []},
                                       FreezePolicy.selective_finetune())


class TestSegModel:
    def test_forward_populates_frequency_features(self):
        cfg = desk_config()
        torch.manual_seed(8)
        model = SegModel(cfg.backbone, cfg.region, cfg.fem)
        out = model(torch.rand(2, 3, 64, 64))
        assert out.freq is not None
        assert out.freq.raw.shape == (2, 4 * cfg.backbone.stage_channels[-1], 2, 2)
        assert out.freq.enhanced.shape == out.freq.raw.shape
        assert out.freq.low.shape[1] == out.freq.raw.shape[1] // 2
        assert torch.equal(torch.cat([out.freq.low, out.freq.high], dim=1),
                           out.freq.raw)

    def test_rejects_incompatible_patch_size(self):
        cfg = desk_config()
        from frcseg.frequency import FemConfig
        with pytest.raises(ConfigError):
            SegModel(cfg.backbone, cfg.region, FemConfig(patch_size=3))

    def test_region_similarities_shapes(self):
        cfg = desk_config()
        model = SegModel(cfg.backbone, cfg.region, cfg.fem)
        out = model(torch.rand(1, 3, 64, 64))
        sims = model.region_similarities(out.decoder_features)
        assert set(sims) == set(cfg.region.granularities)
        for g, a in sims.items():
            assert a.shape == (1, g * g, g * g)
