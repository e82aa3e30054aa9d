import numpy as np
import pytest

from gradsuite import CASES, SEEDS, run_case
from isvkit.models.networks import BackendConfig, BackendNet, named_params, zero_grad
from isvkit.numcore import MFM, Dense, finite_diff_check

TOL = 1e-4


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kind", list(CASES))
def test_random_configuration(kind, seed):
    assert run_case(kind, seed) < TOL


def _backend_fn(net, rng):
    named = named_params(net.modules())
    e, t = rng.standard_normal((6, 4)) * 0.3, rng.standard_normal((6, 4)) * 0.3
    pad = rng.uniform(0, 1, 6)
    svl, isvl = rng.integers(0, 2, 6), rng.integers(0, 2, 6)

    def fn():
        zero_grad(net.modules())
        rep = net.loss_and_backward(e, t, pad, svl, isvl)
        return rep.total, [l.grads[k] for _, l, k in named]

    return fn, [l.params[k] for _, l, k in named]


def test_detects_wrong_shaping_derivative(monkeypatch):
    # a linear ramp in place of the sigmoid: backward still applies the sigmoid derivative
    rng = np.random.default_rng(0)
    net = BackendNet(4, BackendConfig(2, 8, 1.0), rng)
    fn, params = _backend_fn(net, rng)
    assert finite_diff_check(fn, params) < TOL
    monkeypatch.setattr("isvkit.models.networks.shape_sv_score",
                        lambda x: 0.5 + 0.25 * np.maximum(x, 0))
    assert finite_diff_check(fn, params) > TOL


def test_detects_scaled_dense_gradient(monkeypatch):
    rng = np.random.default_rng(1)
    layer = Dense(3, 2, rng=rng)
    x = rng.standard_normal((4, 3))
    R = rng.standard_normal((4, 2))
    real = Dense.backward

    def fn():
        layer.zero_grad()
        out = layer.forward(x)
        layer.backward(R)
        return float((out * R).sum()), [layer.grads["W"]]

    assert finite_diff_check(fn, [layer.params["W"]]) < TOL
    monkeypatch.setattr(Dense, "backward", lambda self, d: real(self, 1.001 * d))
    assert finite_diff_check(fn, [layer.params["W"]]) > TOL


def test_detects_misrouted_mfm(monkeypatch):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 4, 3, 3))
    R = rng.standard_normal((2, 2, 3, 3))
    layer = MFM()

    def fn():
        out = layer.forward(x)
        return float((out * R).sum()), [layer.backward(R)]

    assert finite_diff_check(fn, [x]) < TOL
    real = MFM.backward
    monkeypatch.setattr(MFM, "backward", lambda self, d: real(self, d)[:, ::-1].copy())
    assert finite_diff_check(fn, [x]) > TOL
