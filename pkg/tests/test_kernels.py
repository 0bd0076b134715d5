"""Cross-backend agreement between the compiled kernels and the NumPy fallback."""

import numpy as np
import pytest

from fogsim import kernels

needs_cython = pytest.mark.skipif(
    "cython" not in kernels.available_backends(),
    reason="compiled extension not built",
)


def _case(rng, n=40, d=6, c=4):
    X = np.ascontiguousarray(rng.normal(size=(n, d)))
    y = rng.integers(0, c, size=n, dtype=np.int64)
    w = np.ascontiguousarray(rng.normal(scale=0.5, size=d * c))
    return w, X, y


def test_default_backend_reported():
    assert kernels.BACKEND in kernels.available_backends()


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


@needs_cython
def test_loss_and_gradient_agree(rng):
    py = kernels.get_backend("python")
    cy = kernels.get_backend("cython")
    for _ in range(25):
        w, X, y = _case(rng)
        loss_p, grad_p = py.softmax_loss_grad(w, X, y)
        loss_c, grad_c = cy.softmax_loss_grad(w, X, y)
        assert loss_c == pytest.approx(loss_p, rel=1e-12)
        assert np.allclose(grad_c, grad_p, rtol=1e-12, atol=1e-14)


@needs_cython
def test_descent_trajectories_agree(rng):
    py = kernels.get_backend("python")
    cy = kernels.get_backend("cython")
    w, X, y = _case(rng, n=100, d=8, c=3)
    out_p = py.gd_steps(w, X, y, 200, 0.1)
    out_c = cy.gd_steps(w, X, y, 200, 0.1)
    assert np.allclose(out_c, out_p, rtol=1e-9, atol=1e-11)


@needs_cython
def test_evaluation_agrees(rng):
    py = kernels.get_backend("python")
    cy = kernels.get_backend("cython")
    for _ in range(25):
        w, X, y = _case(rng)
        loss_p, correct_p = py.eval_loss_correct(w, X, y)
        loss_c, correct_c = cy.eval_loss_correct(w, X, y)
        assert correct_c == correct_p
        assert loss_c == pytest.approx(loss_p, rel=1e-12)


def test_each_backend_is_deterministic(rng):
    w, X, y = _case(rng)
    for name in kernels.available_backends():
        backend = kernels.get_backend(name)
        a = backend.gd_steps(w, X, y, 50, 0.1)
        b = backend.gd_steps(w, X, y, 50, 0.1)
        assert np.array_equal(a, b)
