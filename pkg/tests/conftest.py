"""Shared fixtures and independent oracles for the test suite."""

import numpy as np
import pytest

from sitterid import numerics as nm


def finite_difference(loss_fn, arrays: dict, h: float = 1e-6) -> dict:
    """Central finite-difference gradients of a scalar function.

    ``loss_fn`` takes no arguments and reads the arrays in ``arrays``
    (mutated in place entry by entry). Independent of the tape machinery.
    """
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            up = loss_fn()
            arr[idx] = orig - h
            down = loss_fn()
            arr[idx] = orig
            g[idx] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def rel_err(got: np.ndarray, want: np.ndarray, floor: float = 1e-6) -> float:
    """Worst-case relative error with a small absolute floor."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(got), np.abs(want)), floor)
    return float((np.abs(got - want) / denom).max())


def brute_force_rates(genuine, impostor, threshold):
    """O(n) per threshold counting oracle: accept iff score >= threshold."""
    genuine = np.asarray(genuine)
    impostor = np.asarray(impostor)
    fmr = float((impostor >= threshold).sum()) / impostor.size
    fnmr = float((genuine < threshold).sum()) / genuine.size
    return fmr, fnmr


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_params(rng, shapes: dict) -> dict:
    """Watched leaf tensors with random values."""
    return {name: nm.Tensor(rng.standard_normal(shape), requires_grad=True, name=name)
            for name, shape in shapes.items()}
