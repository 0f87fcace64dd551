import numpy as np
import pytest

from easyens.tensor import Tensor, finite_difference_grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative deviation, guarded against near-zero references."""
    denom = max(float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / denom


def check_gradient(f, values, *, eps=1e-5, tol=1e-4) -> float:
    """Assert the backward gradient of f matches central finite differences.

    ``f`` maps a Tensor to a scalar Tensor; gradients are checked with
    respect to ``values`` at 64-bit precision.
    """
    x = Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)
    f(x).backward()
    numeric = finite_difference_grad(f, Tensor(x.data), eps=eps).data
    err = max_rel_error(x.grad, numeric)
    assert err <= tol, f"gradient mismatch: relative error {err:.3e} > {tol}"
    return err


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)
