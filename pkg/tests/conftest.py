import pytest
import torch

from posetune.backbone import ModelConfig, ModelContext
from posetune.oneshot import TuneConfig, tune
from posetune.toolkit.fixtures import make_fixture_pair

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def mini_cfg():
    return ModelConfig.mini()


@pytest.fixture()
def mini_ctx(mini_cfg):
    return ModelContext.build(mini_cfg)


@pytest.fixture(scope="session")
def mini_pair(mini_cfg):
    return make_fixture_pair(0, size=mini_cfg.image_size)


@pytest.fixture(scope="session")
def toy_pair():
    return make_fixture_pair(0)


@pytest.fixture(scope="session")
def mini_checkpoint(mini_cfg, mini_pair):
    """A briefly tuned mini checkpoint shared by pipeline-level tests."""
    ctx = ModelContext.build(mini_cfg)
    return tune(ctx, mini_pair.source, mini_pair.description,
                TuneConfig(rank=2, iterations=8, seed=0))


@pytest.fixture(scope="session")
def mini_untuned_checkpoint(mini_cfg, mini_pair):
    ctx = ModelContext.build(mini_cfg)
    return tune(ctx, mini_pair.source, mini_pair.description,
                TuneConfig(rank=2, iterations=0, seed=0))
