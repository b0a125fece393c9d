"""Finite-difference gradient checker behavior on known-good and broken gradients."""
import numpy as np
import pytest

from skillrec.neuralkit.gradcheck import grad_check
from skillrec.neuralkit.optim import GradBag
from skillrec.neuralkit.params import ParamSet


def quadratic_params():
    params = ParamSet(dtype=np.float64)
    rng = np.random.default_rng(2)
    params.add("a", rng.normal(size=(4, 3)))
    params.add("b", rng.normal(size=(3,)))
    return params


def quadratic_loss(params):
    # L = sum(a^2) + sum(b^3); dL/da = 2a, dL/db = 3b^2
    loss = float(np.sum(params["a"] ** 2) + np.sum(params["b"] ** 3))
    grads = GradBag()
    grads.add("a", 2.0 * params["a"])
    grads.add("b", 3.0 * params["b"] ** 2)
    return loss, grads


def test_grad_check_passes_exact_gradient():
    report = grad_check(quadratic_loss, quadratic_params(), num_coords=24, seed=0)
    assert report.max_rel_err < 1e-6
    # 4*3 + 3 coordinates exist in total, fewer than requested
    assert report.num_coords == 15
    assert set(report.per_tensor) == {"a", "b"}


def test_grad_check_catches_wrong_gradient():
    def broken(params):
        loss, grads = quadratic_loss(params)
        grads.add("a", params["a"])  # extra term makes da wrong by 50%
        return loss, grads

    report = grad_check(broken, quadratic_params(), num_coords=24, seed=0)
    assert report.max_rel_err > 0.05


def test_grad_check_restricts_to_named_tensors():
    def half_broken(params):
        loss, grads = quadratic_loss(params)
        grads.add("b", np.ones_like(params["b"]))
        return loss, grads

    ok = grad_check(half_broken, quadratic_params(), names=["a"], num_coords=12, seed=0)
    assert ok.max_rel_err < 1e-6
    bad = grad_check(half_broken, quadratic_params(), names=["b"], num_coords=12, seed=0)
    assert bad.max_rel_err > 0.05


def test_grad_check_requires_float64():
    params = ParamSet(dtype=np.float32)
    params.add("a", np.ones((2, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        grad_check(quadratic_loss, params)


def test_grad_check_is_deterministic():
    a = grad_check(quadratic_loss, quadratic_params(), num_coords=10, seed=5)
    b = grad_check(quadratic_loss, quadratic_params(), num_coords=10, seed=5)
    assert a.max_rel_err == b.max_rel_err
