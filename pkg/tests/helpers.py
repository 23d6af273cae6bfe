"""Independent numeric oracles shared across the test suite."""

import numpy as np


def finite_difference_grad(loss_fn, array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of loss_fn with respect to ``array``.

    ``loss_fn`` takes no arguments and must re-read ``array`` (it is mutated
    in place and restored). Independent of any backward pass.
    """
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = array[idx]
        array[idx] = orig + h
        f_plus = loss_fn()
        array[idx] = orig - h
        f_minus = loss_fn()
        array[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
        it.iternext()
    return grad


def assert_grads_close(analytic: np.ndarray, numeric: np.ndarray, rel_tol: float = 1e-3):
    """Elementwise relative-error check with a floor so tiny grads stay strict."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    rel = np.abs(analytic - numeric) / denom
    worst = float(rel.max()) if rel.size else 0.0
    assert worst < rel_tol, f"gradient mismatch, worst relative error {worst:.3e}"
