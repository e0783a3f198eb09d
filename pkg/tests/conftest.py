import numpy as np
import pytest

from adaspan.model import ModelConfig, TransformerLM


def central_difference(f, x: np.ndarray, idx, h: float = 1e-6) -> float:
    """d f / d x[idx] by central differences; restores x afterwards."""
    old = x[idx]
    x[idx] = old + h
    up = float(f())
    x[idx] = old - h
    down = float(f())
    x[idx] = old
    return (up - down) / (2 * h)


def rel_err(analytic, numeric) -> float:
    return abs(analytic - numeric) / max(1.0, abs(numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def desk_model(seed=0, **overrides) -> TransformerLM:
    cfg = ModelConfig(**{"dtype": "float64", **overrides})
    return TransformerLM.init(cfg, np.random.default_rng(seed))
