"""Shared test oracles: finite differences and scalar-loop reference code."""

from __future__ import annotations

import numpy as np

from fedgeo.nn_core import MlpModel, loss_and_gradients


def finite_difference_grads(
    model: MlpModel, inputs: np.ndarray, labels: np.ndarray, h: float = 1e-5
) -> list[np.ndarray]:
    """Central-difference gradients of the mean cross-entropy, entry by entry."""

    def loss() -> float:
        return loss_and_gradients(model, inputs, labels)[0]

    grads = []
    for group in (model.weights, model.biases):
        for arr in group:
            g = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                saved = arr[idx]
                arr[idx] = saved + h
                above = loss()
                arr[idx] = saved - h
                below = loss()
                arr[idx] = saved
                g[idx] = (above - below) / (2.0 * h)
            grads.append(g)
    return grads


def max_relative_gradient_error(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def frobenius_scalar_loop(a: np.ndarray, b: np.ndarray) -> float:
    """Frobenius distance via an explicit double loop."""
    total = 0.0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            diff = a[i, j] - b[i, j]
            total += diff * diff
    return total**0.5
