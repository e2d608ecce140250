"""Activation-aware per-input-channel scale search."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .grids import rtn_quantize

ACT_FLOOR = 1e-8


def channel_stat(X: np.ndarray) -> np.ndarray:
    return np.maximum(np.mean(np.abs(np.asarray(X, dtype=np.float64)), axis=0), ACT_FLOOR)


def scaled_output_error(weights: Sequence[np.ndarray], X: np.ndarray, s: np.ndarray,
                        quantize: Callable[[np.ndarray], np.ndarray]) -> float:
    """sum_W || X W^T - (X / s) Q(W diag(s))^T ||^2."""
    X = np.asarray(X, dtype=np.float64)
    Xs = X / s
    total = 0.0
    for W in weights:
        W = np.asarray(W, dtype=np.float64)
        D = X @ W.T - Xs @ quantize(W * s).T
        total += float(np.sum(D * D))
    return total


def awq_search_scales(weights: Sequence[np.ndarray], calib_inputs: np.ndarray, bits: int,
                      group_size: int, grid_steps: int = 20,
                      quantize: Callable[[np.ndarray], np.ndarray] | None = None
                      ) -> tuple[np.ndarray, float, list[float]]:
    """Grid-search alpha in {0, 1/g, ..., 1} for s = m**alpha, m = mean |x_j|.

    ``weights`` are all projections reading the same input (their losses are
    summed). Returns (s, best alpha, loss per alpha); ties keep the smaller alpha.
    """
    if quantize is None:
        def quantize(W):
            return rtn_quantize(W, bits, group_size).dequantize()
    m = channel_stat(calib_inputs)
    alphas = np.linspace(0.0, 1.0, grid_steps + 1)
    losses = [scaled_output_error(weights, calib_inputs, m ** a, quantize) for a in alphas]
    best = int(np.argmin(losses))
    return m ** alphas[best], float(alphas[best]), losses
