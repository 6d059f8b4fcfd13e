import numpy as np
import pytest

from laaf.services.network import ActivationMode, Nonlinearity, SlopeMode, init
from laaf.services.objective import ObjectiveSpec, RecoveryKind


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_params(widths, kind=SlopeMode.FIXED, n=1.0, base=Nonlinearity.TANH, seed=0, rng=None):
    """Network with random slopes and biases so no parameter sits at a special value."""
    params = init(widths, ActivationMode(kind, base, n), seed)
    if rng is not None:
        params.slopes = rng.uniform(0.5, 1.5, size=params.slopes.size)
        for bias in params.biases:
            bias[:] = rng.normal(0.0, 0.2, size=bias.size)
    return params


def make_spec(params, rng, points=6, recovery=True, w_a=1.0):
    adaptive = params.mode.kind is not SlopeMode.FIXED
    return ObjectiveSpec(
        w_u=1.0,
        w_a=w_a if adaptive and recovery else 0.0,
        data_x=rng.uniform(-1.0, 1.0, size=(points, params.widths[0])),
        data_u=rng.normal(size=(points, params.widths[-1])),
        recovery=RecoveryKind(params.mode.kind.value) if adaptive and recovery else RecoveryKind.NONE,
    )


@pytest.fixture
def tiny_params(rng):
    def factory(widths=(1, 3, 3, 1), kind=SlopeMode.LLAAF, n=1.0, base=Nonlinearity.TANH, seed=0):
        return make_params(widths, kind, n, base, seed, rng)

    return factory
