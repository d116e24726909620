"""Tests for the hypernetwork heads, backbone and encoder."""

import pytest
import torch

from APP.helpers.errors import SpecMismatchError
from APP.models.genspec import count_hypernet_params, full_stylegan2_spec, select_refined_layers
from APP.models.hypernet import (Encoder, HyperNetwork, RefinementBlock, load_encoder, load_hypernet,
                                 realized_param_count, save_encoder, save_hypernet)
from APP.workers.trainer import build_hypernetwork


def images(n, seed):
    return torch.rand(n, 3, 8, 8, generator=torch.Generator().manual_seed(seed)) * 2.0 - 1.0


@pytest.fixture
def hypernet(micro_spec, micro_hypernet_config):
    return build_hypernetwork(micro_spec, micro_hypernet_config, seed=0).eval()


class TestFeatures:
    def test_shape(self, hypernet):
        features = hypernet.extract_features(images(2, 0), images(2, 1))
        assert features.shape == (2, 8, 1, 1)

    def test_input_sensitivity(self, hypernet):
        x = images(2, 0)
        with torch.no_grad():
            same = hypernet.extract_features(x, x)
            other = hypernet.extract_features(x, images(2, 1))
        assert not torch.allclose(same, other)

    def test_pair_order(self, hypernet):
        x, y = images(2, 0), images(2, 1)
        with torch.no_grad():
            assert not torch.allclose(hypernet.extract_features(x, y), hypernet.extract_features(y, x))

    def test_rejects_shape_mismatch(self, hypernet):
        with pytest.raises(SpecMismatchError):
            hypernet.extract_features(images(2, 0), images(3, 1))

    def test_rejects_wrong_feature_shape(self, micro_spec, micro_hypernet_config):
        hypernet = build_hypernetwork(micro_spec, micro_hypernet_config).eval()
        with pytest.raises(SpecMismatchError):
            hypernet.extract_features(torch.zeros(1, 3, 16, 16), torch.zeros(1, 3, 16, 16))


class TestOffsets:
    @pytest.mark.parametrize("variant", ["per_channel_standard", "per_channel_shared_mix", "separable",
                                         "per_parameter_naive"])
    @pytest.mark.parametrize("policy", ["medium_fine_conv", "all_conv", "all_including_torgb"])
    def test_keys_shapes_and_zero_init(self, micro_spec, micro_hypernet_config, variant, policy):
        config = micro_hypernet_config.replace(head_variant=variant, layer_policy=policy)
        hypernet = build_hypernetwork(micro_spec, config).eval()
        with torch.no_grad():
            offsets = hypernet(images(3, 0), images(3, 1))
        assert offsets.layers == select_refined_layers(micro_spec, policy)
        for index, delta in offsets.offsets.items():
            k, _, cin, cout = micro_spec.layer(index).shape
            expected = (3, k, k, cin, cout) if hypernet.per_parameter else (3, 1, 1, cin, cout)
            assert tuple(delta.shape) == expected
            assert torch.count_nonzero(delta) == 0

    @pytest.mark.parametrize("variant", ["per_channel_standard", "per_channel_shared_mix", "separable",
                                         "per_parameter_naive"])
    @pytest.mark.parametrize("policy", ["medium_fine_conv", "all_conv", "all_including_torgb"])
    def test_realized_count_matches_analytical(self, micro_spec, micro_hypernet_config, variant, policy):
        config = micro_hypernet_config.replace(head_variant=variant, layer_policy=policy)
        hypernet = build_hypernetwork(micro_spec, config)
        assert realized_param_count(hypernet) == count_hypernet_params(micro_spec, config).total

    def test_full_size_standard_head_shape(self):
        layer = full_stylegan2_spec().layer(15)
        head = RefinementBlock(layer, channels=16, height=4, variant="per_channel_standard")
        assert head(torch.randn(2, 16, 4, 4)).shape == (2, 1, 1, 512, 256)

    def test_separable_offsets_are_rank_one(self, micro_spec, micro_hypernet_config):
        config = micro_hypernet_config.replace(head_variant="separable")
        hypernet = build_hypernetwork(micro_spec, config).eval()
        with torch.no_grad():
            for index in hypernet.refined_layers:
                fc = hypernet.final_fc(index)
                fc.weight.normal_(generator=torch.Generator().manual_seed(index))
                fc.bias.normal_(generator=torch.Generator().manual_seed(100 + index))
            for trial in range(50):
                offsets = hypernet(images(1, 2 * trial), images(1, 2 * trial + 1))
                for delta in offsets.offsets.values():
                    slices = delta.double().reshape(-1, delta.shape[-2], delta.shape[-1])
                    s = torch.linalg.svdvals(slices)
                    assert (s[:, 1] <= 1e-5 * s[:, 0]).all()

    def test_shared_parameters_drive_every_shared_head(self, hypernet):
        assert hypernet.shared_layers == [3, 4]
        assert hypernet.final_fc(3) is hypernet.final_fc(4)
        x, y = images(2, 0), images(2, 1)
        with torch.no_grad():
            before = hypernet(x, y)
            hypernet.shared.fc2.weight.normal_(generator=torch.Generator().manual_seed(0))
            after = hypernet(x, y)
        for index in (3, 4):
            assert not torch.equal(before[index], after[index])

    def test_shared_mixer_counted_once(self, hypernet):
        shared = {id(p) for p in hypernet.shared.parameters()}
        head_params = {id(p) for head in hypernet.heads.values() for p in head.parameters()}
        assert not shared & head_params

    def test_round_trip(self, hypernet, tmp_path):
        with torch.no_grad():
            for p in hypernet.parameters():
                p.add_(0.01)
        save_hypernet(hypernet, str(tmp_path / "hypernet"))
        loaded = load_hypernet(str(tmp_path / "hypernet")).eval()
        x, y = images(2, 0), images(2, 1)
        with torch.no_grad():
            a, b = hypernet(x, y), loaded(x, y)
        for index in a.layers:
            assert torch.equal(a[index], b[index])


class TestEncoder:
    def test_zero_init_returns_average_latent(self):
        avg = torch.randn(1, 8)
        encoder = Encoder(8, (8, 8, 8, 8), (1, 1, 1, 1), stem_stride=1, latent_avg=avg).eval()
        w = encoder.encode(images(3, 0))
        assert w.space == "W"
        assert w.values.shape == (3, 8)
        torch.testing.assert_close(w.values, avg.expand(3, -1))

    def test_round_trip(self, tmp_path):
        encoder = Encoder(8, (8, 8, 8, 8), (1, 1, 1, 1), stem_stride=1, latent_avg=torch.randn(1, 8))
        with torch.no_grad():
            encoder.fc.weight.normal_()
        encoder.freeze()
        save_encoder(encoder, str(tmp_path / "encoder"))
        loaded = load_encoder(str(tmp_path / "encoder")).freeze()
        x = images(2, 0)
        assert torch.equal(encoder(x), loaded(x))

    def test_freeze(self):
        encoder = Encoder(8, (8, 8, 8, 8), (1, 1, 1, 1)).freeze()
        assert not encoder.training
        assert all(not p.requires_grad for p in encoder.parameters())
