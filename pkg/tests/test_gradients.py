"""Finite-difference verification of analytic gradients.

The oracle (central differences in float64) lives in retinaforge.gradcheck
and never touches the tape; these tests drive it per layer and over random
compositions.
"""

import numpy as np
import pytest

from retinaforge import gradcheck as gc


@pytest.mark.parametrize("name", sorted(gc.LAYER_CHECKS))
def test_layer_gradients(name):
    err = gc.LAYER_CHECKS[name](np.random.default_rng(123))
    assert err < gc.TOLERANCE, f"{name}: max relative error {err:.3e}"


def test_composed_conv_relu_pool_bce_chain():
    rng = np.random.default_rng(5)
    from retinaforge import layers as L
    from retinaforge.engine import ParamStore, Tensor

    store = ParamStore()
    w = store.add("w", rng.uniform(-0.4, 0.4, (3, 3, 2, 3)))
    b = store.add("b", rng.uniform(-0.1, 0.1, 3))
    x = Tensor(rng.uniform(-0.5, 0.5, (2, 4, 4, 2)))
    x.watched = True
    target = Tensor(rng.integers(0, 2, (2, 2, 2, 3)).astype(np.float64))

    def build():
        h = L.relu(L.conv2d(x, w, b))
        h = L.max_pool2d(h)
        return L.bce_loss(L.sigmoid(h), target)

    err = gc._check(build, [x.data, w.data, b.data], [x, w, b])
    assert err < gc.TOLERANCE


def test_hundred_random_compositions():
    results = gc.run_suite(seed=2024, composition_trials=100)
    assert gc.suite_passed(results), results


def test_corrupted_backward_is_detected():
    results = gc.run_suite(seed=9, composition_trials=1, corrupt=True)
    assert results["corrupted_sigmoid"] > gc.TOLERANCE


def test_report_is_deterministic():
    a = gc.run_suite(seed=77, composition_trials=5)
    b = gc.run_suite(seed=77, composition_trials=5)
    assert a == b
