import numpy as np
import pytest

from amlab import kernels


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def available_backends():
    names = ["python"]
    try:
        kernels.backend_module("cython")
        names.append("cython")
    except ImportError:
        pass
    return names


@pytest.fixture(params=available_backends())
def backend(request, monkeypatch):
    """Run a test once per kernel backend."""
    monkeypatch.setattr(kernels, "_impl", kernels.backend_module(request.param))
    return request.param
