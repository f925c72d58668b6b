import numpy as np
import pytest

from steerlab.model import ModelConfig, build_model, persistent_gains, single_injection_gains
from steerlab.synthetic import make_concept_bank, scene_sampler


def make_linear(n_layers=6, d=16, vocab=32, n_concepts=3, norm=4.0, gains=None, seed=0, bank=None, **kw):
    """Linear-regime model (no blocks) over an orthonormal global-channel bank."""
    if bank is None:
        bank = make_concept_bank(n_concepts, d, seed=seed, norm=norm)
    config = ModelConfig(
        n_layers=n_layers,
        d_model=d,
        n_heads=2,
        vocab_size=vocab,
        prefix_len=3,
        reinjection_gains=gains,
        seed=seed,
        **kw,
    )
    return build_model(config, bank)


@pytest.fixture
def linear_model():
    return make_linear()


@pytest.fixture
def persistent_model():
    return make_linear(gains=persistent_gains(6))


@pytest.fixture
def nonlinear_model():
    return make_linear(layer_gain=0.8, nonlinearity_strength=0.7)


def sampler_for(model):
    return scene_sampler(model.d, model.config.prefix_len, projector=model.bank.complement_projector())


def random_prefix(model, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return (scale * rng.standard_normal((model.config.prefix_len, model.d))).astype(np.float32)


__all__ = ["make_linear", "sampler_for", "random_prefix", "single_injection_gains"]
