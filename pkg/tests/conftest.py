"""Shared test helpers: finite-difference oracles and tiny model builders."""

import numpy as np
import pytest

from sparsetrain import graph as graph_mod
from sparsetrain.graph import LayerSpec, ModelGraph


def finite_difference(f, x, h=1e-5):
    """Central finite differences of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        grad[i] = (f(xp) - f(xm)) / (2.0 * h)
    return grad


def rel_err(analytic, numeric):
    """Elementwise relative error with denominator max(1, |analytic|)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(numeric - analytic) / np.maximum(1.0, np.abs(analytic))


def single_conv_graph(w, input_hw=(4, 4), stride=1, pad=0):
    """A graph holding one conv layer, for lasso/cost unit tests."""
    w = np.asarray(w)
    k, c = w.shape[:2]
    conv = LayerSpec(
        id=0, kind="conv", inputs=[graph_mod.MODEL_INPUT],
        in_channels=c, out_channels=k,
        kernel=w.shape[2], stride=stride, pad=pad,
        params={"w": w}, momentum={"w": np.zeros_like(w)},
        orig_out=np.arange(k), orig_in=np.arange(c),
    )
    return ModelGraph(layers=[conv], stages=[], head_id=0,
                      input_shape=(c,) + tuple(input_hw),
                      dtype=str(w.dtype))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
