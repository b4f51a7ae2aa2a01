import numpy as np
import pytest

from mtunet import tensor as T
from mtunet.attention import AttentionConfig
from mtunet.errors import ConfigError
from mtunet.gradcheck import grad_check
from mtunet.mtm import init_mtm, init_transition, mtm_forward, transition, zero_output_projections
from mtunet.optim import ParameterStore
from mtunet.tensor import Tensor


def make_mtm(c=8, seed=0, slots=8, dtype=np.float64):
    store = ParameterStore(dtype)
    return store, init_mtm(store, "m", AttentionConfig(c, p=4, slots=slots), np.random.default_rng(seed))


def test_shape_contract():
    _, params = make_mtm(c=32, dtype=np.float32)
    x = Tensor(np.random.default_rng(0).standard_normal((32, 16, 16)).astype(np.float32))
    assert mtm_forward(x, params).shape == (32, 16, 16)


@pytest.mark.parametrize("seed", range(5))
def test_zeroed_projections_give_identity(seed):
    _, params = make_mtm(seed=seed)
    zero_output_projections(params)
    x = np.random.default_rng(seed).standard_normal((2, 8, 8, 8))
    np.testing.assert_array_equal(mtm_forward(Tensor(x), params).data, x)


def test_mtm_gradcheck_small_input():
    store, params = make_mtm(c=8)
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((8, 8, 8)))
    r = Tensor(rng.standard_normal((8, 8, 8)))
    report = grad_check(lambda _: T.tsum(T.mul(mtm_forward(x, params), r)), store)
    assert set(report.errors) == set(store.names())
    assert report.passed, report.table()


def test_every_parameter_gets_gradient():
    store, params = make_mtm(c=8)
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((2, 8, 8, 8)))
    T.tsum(T.square(mtm_forward(x, params))).backward()
    dead = [n for n, p in store.items() if p.grad is None or not np.any(p.grad)]
    assert dead == []


def test_down_and_up_shapes():
    store = ParameterStore(np.float32)
    rng = np.random.default_rng(0)
    down = init_transition(store, "d", 64, "down", rng)
    up = init_transition(store, "u", 128, "up", rng)
    x = Tensor(rng.standard_normal((64, 16, 16)).astype(np.float32))
    y = transition(x, down)
    assert y.shape == (128, 8, 8)
    z = transition(y, up)
    assert z.shape == (64, 16, 16)
    assert not np.allclose(z.data, x.data)


def test_transition_channel_mismatch():
    store = ParameterStore()
    down = init_transition(store, "d", 4, "down", np.random.default_rng(0))
    with pytest.raises(ConfigError, match="expects 4 channels"):
        transition(Tensor(np.zeros((3, 8, 8), np.float32)), down)


def test_transition_bad_direction():
    with pytest.raises(ConfigError):
        init_transition(ParameterStore(), "x", 4, "sideways", np.random.default_rng(0))
