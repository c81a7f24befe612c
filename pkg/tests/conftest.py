import numpy as np
import pytest

from prokt.models import LayerSpec, ModelParams


def random_params(spec: LayerSpec, rng: np.random.Generator, scale: float = 0.8) -> ModelParams:
    arrays = []
    for i in range(spec.n_layers):
        arrays.append(rng.normal(scale=scale, size=(spec.sizes[i], spec.sizes[i + 1])))
        arrays.append(rng.normal(scale=scale, size=spec.sizes[i + 1]))
    return ModelParams.from_arrays(spec, arrays)


def central_difference(f, params: ModelParams, h: float = 1e-5) -> np.ndarray:
    """Gradient of the scalar ``f(params)`` by central differences, flattened."""
    theta = params.flat()
    g = np.empty_like(theta)
    for i in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(params.with_flat(up)) - f(params.with_flat(dn))) / (2 * h)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
