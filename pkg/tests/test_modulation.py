"""Tests for the weight-offset algebra."""

import pytest
import torch

from APP.helpers.errors import SpecMismatchError
from APP.models.generator import Generator, GeneratorWeights, layer_key, perturbed_copy
from APP.models.genspec import GeneratorSpec, LayerSpec, toy_spec
from APP.models.modulation import (AccumulatedOffsets, OffsetSet, accumulate, load_offsets, modulate,
                                   save_offsets, transfer_offsets)


def single_layer_spec(k, cin, cout):
    return GeneratorSpec(layers=(LayerSpec(1, "Conv 1", k, cin, cout, "fine", "conv"),), latent_dim=4)


def weights_for(spec, kernel):
    return GeneratorWeights(spec, {layer_key(1): kernel})


def loop_modulate(theta, delta):
    """theta[a, b, i, j] * (1 + delta[a', b', i, j]) with delta broadcast over the kernel window."""
    k, _, cin, cout = theta.shape
    out = torch.empty_like(theta)
    for a in range(k):
        for b in range(k):
            for i in range(cin):
                for j in range(cout):
                    d = delta[a if delta.shape[0] > 1 else 0, b if delta.shape[1] > 1 else 0, i, j]
                    out[a, b, i, j] = theta[a, b, i, j] * (1.0 + d)
    return out


class TestModulate:
    def test_small_example(self):
        spec = single_layer_spec(3, 2, 4)
        gen = torch.Generator().manual_seed(0)
        theta = torch.randn(3, 3, 2, 4, generator=gen, dtype=torch.float64)
        delta = torch.randn(1, 1, 2, 4, generator=gen, dtype=torch.float64)
        out = modulate(weights_for(spec, theta), OffsetSet(spec, {1: delta})).layer(1)
        torch.testing.assert_close(out, loop_modulate(theta, delta), atol=1e-7, rtol=0)

    def test_random_oracle(self):
        gen = torch.Generator().manual_seed(1)
        for _ in range(100):
            k = int(torch.randint(1, 4, (1,), generator=gen))
            cin, cout = (int(v) for v in torch.randint(1, 9, (2,), generator=gen))
            per_parameter = bool(torch.rand(1, generator=gen) < 0.3)
            spec = single_layer_spec(k, cin, cout)
            theta = torch.randn(k, k, cin, cout, generator=gen, dtype=torch.float64)
            delta_shape = (k, k, cin, cout) if per_parameter else (1, 1, cin, cout)
            delta = torch.randn(*delta_shape, generator=gen, dtype=torch.float64)
            out = modulate(weights_for(spec, theta), OffsetSet(spec, {1: delta})).layer(1)
            assert (out - loop_modulate(theta, delta)).abs().max() < 1e-6

    def test_zero_offset_is_identity(self):
        spec = single_layer_spec(3, 4, 4)
        theta = torch.randn(3, 3, 4, 4)
        out = modulate(weights_for(spec, theta), OffsetSet(spec, {1: torch.zeros(1, 1, 4, 4)})).layer(1)
        assert torch.equal(out, theta)

    def test_does_not_mutate(self):
        spec = single_layer_spec(3, 2, 2)
        theta = torch.randn(3, 3, 2, 2)
        before = theta.clone()
        modulate(weights_for(spec, theta), OffsetSet(spec, {1: torch.ones(1, 1, 2, 2)}))
        assert torch.equal(theta, before)

    def test_per_sample_offsets(self):
        spec = single_layer_spec(3, 2, 3)
        theta = torch.randn(3, 3, 2, 3)
        delta = torch.randn(4, 1, 1, 2, 3)
        out = modulate(weights_for(spec, theta), OffsetSet(spec, {1: delta})).layer(1)
        assert out.shape == (4, 3, 3, 2, 3)
        torch.testing.assert_close(out[2], loop_modulate(theta, delta[2]))

    def test_rejects_bad_shape(self):
        spec = single_layer_spec(3, 2, 3)
        with pytest.raises(SpecMismatchError):
            OffsetSet(spec, {1: torch.zeros(1, 1, 3, 2)})

    def test_rejects_other_spec(self):
        spec = single_layer_spec(3, 2, 3)
        other = single_layer_spec(3, 2, 3)
        other = GeneratorSpec(layers=other.layers, latent_dim=8)
        with pytest.raises(SpecMismatchError):
            modulate(weights_for(spec, torch.randn(3, 3, 2, 3)), OffsetSet(other, {1: torch.zeros(1, 1, 2, 3)}))


class TestAccumulate:
    def test_sum_of_three_steps(self):
        spec = single_layer_spec(3, 3, 5)
        gen = torch.Generator().manual_seed(2)
        theta = torch.randn(3, 3, 3, 5, generator=gen, dtype=torch.float64)
        deltas = [torch.randn(1, 1, 3, 5, generator=gen, dtype=torch.float64) for _ in range(3)]

        acc = AccumulatedOffsets.zeros(spec, [1], dtype=torch.float64)
        for delta in deltas:
            acc = accumulate(acc, OffsetSet(spec, {1: delta}))
        assert acc.step == 3

        out = modulate(weights_for(spec, theta), acc).layer(1)
        expected = loop_modulate(theta, deltas[0] + deltas[1] + deltas[2])
        assert (out - expected).abs().max() < 1e-6

    def test_accumulated_differs_from_composed(self):
        spec = single_layer_spec(3, 4, 4)
        gen = torch.Generator().manual_seed(3)
        theta = weights_for(spec, torch.randn(3, 3, 4, 4, generator=gen, dtype=torch.float64))
        d1 = OffsetSet(spec, {1: torch.randn(1, 1, 4, 4, generator=gen, dtype=torch.float64)})
        d2 = OffsetSet(spec, {1: torch.randn(1, 1, 4, 4, generator=gen, dtype=torch.float64)})

        acc = accumulate(accumulate(AccumulatedOffsets.zeros(spec, [1], dtype=torch.float64), d1), d2)
        accumulated = modulate(theta, acc).layer(1)
        composed = modulate(modulate(theta, d1), d2).layer(1)
        expected = theta.layer(1) * (1.0 + d1[1] + d2[1])

        torch.testing.assert_close(accumulated, expected)
        assert not torch.allclose(composed, expected)

    def test_rejects_layer_mismatch(self):
        spec = toy_spec(8, 8)
        acc = AccumulatedOffsets.zeros(spec, [3, 4])
        with pytest.raises(SpecMismatchError):
            accumulate(acc, OffsetSet(spec, {3: torch.zeros(1, 1, 8, 8)}))


class TestTransfer:
    def test_matches_modulation_on_perturbed_copy(self):
        spec = toy_spec(8, 8)
        source = Generator(spec, n_mapping=2, seed=0)
        target = perturbed_copy(source, scale=0.1, seed=5)
        gen = torch.Generator().manual_seed(4)
        acc = AccumulatedOffsets(spec, {3: 0.1 * torch.randn(1, 1, 8, 8, generator=gen),
                                        4: 0.1 * torch.randn(1, 1, 8, 8, generator=gen)}, step=1)
        theta_target = target.weights()
        moved = transfer_offsets(acc, theta_target)
        for index in (3, 4):
            torch.testing.assert_close(moved.layer(index), theta_target.layer(index) * (1.0 + acc[index]))
        assert not torch.equal(theta_target.layer(3), source.weights().layer(3))

    def test_zero_offsets_leave_target_unchanged(self):
        spec = toy_spec(8, 8)
        target = perturbed_copy(Generator(spec, n_mapping=2, seed=0), scale=0.1, seed=5)
        theta = target.weights()
        moved = transfer_offsets(AccumulatedOffsets.zeros(spec, [3, 4]), theta)
        for name, tensor in theta:
            assert torch.equal(moved.tensors[name], tensor)

    def test_rejects_different_spec(self):
        acc = AccumulatedOffsets.zeros(toy_spec(8, 8), [3])
        with pytest.raises(SpecMismatchError):
            transfer_offsets(acc, Generator(toy_spec(16, 8), n_mapping=2).weights())


class TestOffsetFiles:
    def test_save_and_load(self, tmp_path):
        spec = toy_spec(8, 8)
        acc = AccumulatedOffsets(spec, {3: torch.randn(2, 1, 1, 8, 8), 4: torch.randn(2, 1, 1, 8, 8)}, step=5)
        save_offsets(acc, str(tmp_path / "offsets"))
        loaded = load_offsets(str(tmp_path / "offsets"))
        assert loaded.spec == spec
        assert loaded.step == 5
        assert loaded.layers == [3, 4]
        for index in (3, 4):
            assert torch.equal(loaded[index], acc[index])
