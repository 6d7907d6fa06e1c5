import numpy as np
import pytest

from picanet.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(rng, *shape, scale=1.0):
    """float64 tensor that requires grad."""
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, dtype=np.float64)


def projected(fn, rng, dtype=np.float64):
    """Scalar loss sum(R * fn()) with a fixed random R."""
    from picanet import functional as F

    proj = {}

    def loss():
        out = fn()
        if "r" not in proj:
            proj["r"] = rng.normal(size=out.shape).astype(dtype)
        return F.sum(F.mul(out, proj["r"]))

    return loss
