"""Tests for the reconstruction objective."""

import pytest
import torch

from APP.helpers.config_manager import LossConfig
from APP.helpers.errors import SpecMismatchError
from APP.models.losses import l2_loss, per_sample_l2, perceptual_loss, similarity_loss, total_loss


def batch(n=2, seed=0, size=8):
    return torch.rand(n, 3, size, size, generator=torch.Generator().manual_seed(seed)) * 2.0 - 1.0


class TestL2:
    def test_identical(self):
        x = batch()
        assert float(l2_loss(x, x)) == 0.0

    def test_constant_offset(self):
        x = torch.zeros(2, 3, 4, 4)
        assert float(l2_loss(x, x + 0.5)) == pytest.approx(0.25)

    def test_loop_oracle(self):
        x, y = batch(seed=0).double(), batch(seed=1).double()
        total = 0.0
        flat_x, flat_y = x.flatten().tolist(), y.flatten().tolist()
        for a, b in zip(flat_x, flat_y):
            total += (a - b) ** 2
        assert float(l2_loss(x, y)) == pytest.approx(total / len(flat_x), abs=1e-6)

    def test_per_sample(self):
        x, y = batch(3, 0), batch(3, 1)
        per = per_sample_l2(x, y)
        assert per.shape == (3,)
        torch.testing.assert_close(per.mean(), l2_loss(x, y))

    def test_shape_mismatch(self):
        with pytest.raises(SpecMismatchError):
            l2_loss(batch(2), batch(3))


class TestPerceptual:
    def test_identical(self):
        x = batch()
        assert float(perceptual_loss(x, x)) == 0.0

    def test_symmetric(self):
        x, y = batch(seed=0), batch(seed=1)
        torch.testing.assert_close(perceptual_loss(x, y), perceptual_loss(y, x))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_one_pixel_difference(self, seed):
        x = batch(seed=seed)
        y = x.clone()
        y[0, 1, 3, 4] += 0.5
        assert float(perceptual_loss(x, y, seed=seed)) > 0.0

    def test_seeded(self):
        x, y = batch(seed=0), batch(seed=1)
        assert float(perceptual_loss(x, y, seed=3)) == float(perceptual_loss(x, y, seed=3))
        assert float(perceptual_loss(x, y, seed=3)) != float(perceptual_loss(x, y, seed=4))


class TestSimilarity:
    def test_identical(self):
        x = batch()
        assert float(similarity_loss(x, x)) == pytest.approx(0.0, abs=1e-6)

    def test_off(self):
        assert float(similarity_loss(batch(seed=0), batch(seed=1), LossConfig(sim_mode="off"))) == 0.0

    def test_range(self):
        for seed in range(10):
            value = float(similarity_loss(batch(4, seed), -batch(4, seed + 100)))
            assert 0.0 <= value <= 2.0


class TestTotal:
    def test_identical(self):
        x = batch()
        report = total_loss(x, x)
        assert float(report.total) == pytest.approx(0.0, abs=1e-6)

    def test_zero_weights_give_l2(self):
        x, y = batch(seed=0), batch(seed=1)
        report = total_loss(x, y, LossConfig(lambda_lpips=0.0, lambda_sim=0.0))
        assert float(report.total) == float(report.l2)
        assert float(report.perceptual) == 0.0 and float(report.similarity) == 0.0

    def test_weighted_sum(self):
        x, y = batch(seed=0), batch(seed=1)
        config = LossConfig()
        report = total_loss(x, y, config)
        expected = report.l2 + config.lambda_lpips * report.perceptual + config.lambda_sim * report.similarity
        torch.testing.assert_close(report.total, expected)
        assert float(report.total) > 0.0

    def test_defaults(self):
        assert (LossConfig().lambda_lpips, LossConfig().lambda_sim) == (0.8, 0.1)

    def test_as_floats(self):
        floats = total_loss(batch(seed=0), batch(seed=1)).as_floats()
        assert set(floats) == {"l2", "perceptual", "similarity", "total"}
        assert all(isinstance(v, float) for v in floats.values())
