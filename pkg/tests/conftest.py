import numpy as np
import pytest

from aucvt import tensor as T


@pytest.fixture(autouse=True)
def clean_tape():
    T.reset_tape()
    yield
    T.reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def grad_check(forward, leaves, eps=1e-5, tol=1e-4):
    """Backward vs central differences on every leaf; returns worst error."""
    T.reset_tape()
    for t in leaves:
        t.grad = None
    out = forward()
    if out.data.size != 1:
        proj = np.random.default_rng(0).standard_normal(out.data.shape)

        def loss_fn():
            return T.sum_all(T.mul(forward(), T.Tensor(proj)))

        T.backward(T.sum_all(T.mul(out, T.Tensor(proj))))
    else:
        loss_fn = forward
        T.backward(out)
    worst = 0.0
    for t in leaves:
        fd = T.finite_diff_grad(lambda _x: loss_fn(), t, eps=eps)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, T.rel_grad_error(analytic, fd.data))
    T.reset_tape()
    assert worst <= tol, f"gradient mismatch: {worst:.3e} > {tol:g}"
    return worst
