import os
import sys

import pytest
import torch

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from APP.helpers.config_manager import HyperNetConfig  # noqa: E402
from APP.models.generator import Generator  # noqa: E402
from APP.models.genspec import toy_spec  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the end-to-end training checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end check (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def micro_spec():
    """8x8 output, 8 channels: Conv 1, toRGB 1, Conv 2 (medium), Conv 3 (fine), toRGB 2."""
    return toy_spec(8, 8)


@pytest.fixture
def micro_generator(micro_spec):
    return Generator(micro_spec, n_mapping=2, seed=0).freeze()


@pytest.fixture
def micro_hypernet_config():
    """Backbone sized for 8x8 inputs: stem stride 1 and three stride-2 stages give 1x1x8 features."""
    return HyperNetConfig(
        head_variant="per_channel_shared_mix",
        layer_policy="medium_fine_conv",
        refinement_steps=2,
        backbone_feature_shape=(1, 1, 8),
        shared_fc_dim=8,
        backbone_widths=(8, 8, 8, 8),
        backbone_blocks=(1, 1, 1, 1),
        stem_stride=1,
    )


@pytest.fixture
def float64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def micro_encoder(micro_generator):
    from APP.models.generator import mean_latent
    from APP.models.hypernet import Encoder
    torch.manual_seed(0)
    encoder = Encoder(micro_generator.latent_dim, (8, 8, 8, 8), (1, 1, 1, 1), stem_stride=1,
                      latent_avg=mean_latent(micro_generator, n=256).values)
    with torch.no_grad():
        encoder.fc.weight.normal_(std=0.05, generator=torch.Generator().manual_seed(1))
    return encoder.freeze()


@pytest.fixture
def micro_hypernet(micro_spec, micro_hypernet_config):
    from APP.workers.trainer import build_hypernetwork
    return build_hypernetwork(micro_spec, micro_hypernet_config, seed=0)


def randomize_final_layers(hypernet, std=0.05, seed=0):
    """Give every head a non-zero final FC so offsets are non-trivial."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for index in hypernet.refined_layers:
            fc = hypernet.final_fc(index)
            fc.weight.normal_(std=std, generator=gen)
    return hypernet


@pytest.fixture
def targets(micro_generator):
    from APP.models.generator import sample_images
    return sample_images(micro_generator, 4, seed=11)[0]


@pytest.fixture
def nonzero_hypernet(micro_hypernet):
    return randomize_final_layers(micro_hypernet)
