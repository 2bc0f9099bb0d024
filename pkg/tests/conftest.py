import numpy as np
import pytest

from consistgen.model import ModelConfig, build_model, embed_prompt
from consistgen.sampler import SamplerConfig, run_identity_pass


@pytest.fixture(scope="session")
def cfg():
    return ModelConfig()


@pytest.fixture(scope="session")
def model(cfg):
    return build_model(cfg)


@pytest.fixture(scope="session")
def layout(cfg):
    return embed_prompt("a quiet library | an old woman with a cane | reading", cfg)


@pytest.fixture(scope="session")
def frame_layout(cfg):
    return embed_prompt("a quiet library | an old woman with a cane | walking between shelves", cfg)


@pytest.fixture(scope="session")
def short_sampler():
    return SamplerConfig(n_steps=8, extract_step=3, apply_until_step=6, keep_background=True)


@pytest.fixture(scope="session")
def short_identity(model, layout, short_sampler):
    return run_identity_pass(model, layout, 1, short_sampler)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_identity(model, layout):
    return run_identity_pass(model, layout, 1, SamplerConfig())
