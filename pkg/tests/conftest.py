import numpy as np
import pytest

from stutterkit.model import ArchConfig, build_model


def make_tiny_arch(n_podcasts=3, channels=4, heads=(8, 8), dropout=0.2, n_mfcc=5):
    return ArchConfig(
        n_podcasts=n_podcasts,
        n_mfcc=n_mfcc,
        encoder_channels=(channels,) * 5,
        contexts=((-1, 0, 1), (-1, 0, 1), (-2, 0, 2), (0,), (0,)),
        head_hidden=heads,
        dropout=dropout,
    )


@pytest.fixture
def tiny_arch():
    return make_tiny_arch()


def f64_twin(model32):
    """Same architecture and bit-identical state, promoted to float64."""
    twin = build_model(model32.arch, seed=0, dtype=np.float64)
    twin.load_snapshot(
        {name: a.astype(np.float64) for name, a in model32.state_arrays().items()}
    )
    return twin


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
