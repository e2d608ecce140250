"""GPTQ: column-by-column quantization with inverse-Hessian error compensation."""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from ..errors import ConfigError, SingularHessianError
from .grids import QuantizedLinear, group_index, pack_codes, uniform_codes, uniform_params

BLOCK_SIZE = 32


def hessian(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return 2.0 * X.T @ X


def proxy_loss(X: np.ndarray, W: np.ndarray, W_hat: np.ndarray) -> float:
    """sum ||X W^T - X W_hat^T||^2 over calibration rows."""
    X = np.asarray(X, dtype=np.float64)
    D = X @ (np.asarray(W, dtype=np.float64) - np.asarray(W_hat, dtype=np.float64)).T
    return float(np.sum(D * D))


def inverse_hessian_factor(H: np.ndarray) -> np.ndarray:
    """Upper Cholesky factor of H^-1."""
    n = H.shape[0]
    try:
        L = np.linalg.cholesky(H)
        Linv = solve_triangular(L, np.eye(n), lower=True)
        return np.linalg.cholesky(Linv.T @ Linv).T
    except np.linalg.LinAlgError as exc:
        raise SingularHessianError(
            "damped Hessian is not positive definite; increase the damping coefficient") from exc


def gptq_quantize(W, calib_inputs, bits: int, group_size: int, damp: float = 0.01,
                  act_sort: bool = True, block_size: int = BLOCK_SIZE) -> QuantizedLinear:
    """Quantize W (out, in) given calibration input rows X (n, in).

    The grid of every input group is fixed up front from the original W (the
    same grid RTN would use), so the stored form matches rtn_quantize's and
    the two are directly comparable on the proxy objective.
    """
    W = np.array(W, dtype=np.float64)
    X = np.asarray(calib_inputs, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ConfigError("calibration inputs must be a non-empty (n, in) matrix")
    out, width = W.shape
    if X.shape[1] != width:
        raise ConfigError(f"calibration width {X.shape[1]} != weight input dim {width}")

    scale, offset = uniform_params(W, bits, group_size)
    gidx = group_index(width, group_size)

    H = hessian(X)
    dead = np.diag(H) == 0
    H[dead, dead] = 1.0
    H += damp * np.mean(np.diag(H)) * np.eye(width)

    perm = np.argsort(-np.diag(H), kind="stable") if act_sort else np.arange(width)
    W = W[:, perm]
    H = H[np.ix_(perm, perm)]
    g_perm = gidx[perm]
    Hinv = inverse_hessian_factor(H)

    codes = np.zeros((out, width), dtype=np.int64)
    for i1 in range(0, width, block_size):
        i2 = min(i1 + block_size, width)
        W1 = W[:, i1:i2].copy()
        Err1 = np.zeros_like(W1)
        Hinv1 = Hinv[i1:i2, i1:i2]
        for i in range(i2 - i1):
            col = i1 + i
            g = g_perm[col]
            w = W1[:, i]
            c = uniform_codes(w, scale[:, g], offset[:, g], bits)
            q = c * scale[:, g] + offset[:, g]
            codes[:, col] = c
            err = (w - q) / Hinv1[i, i]
            W1[:, i:] -= np.outer(err, Hinv1[i, i:])
            Err1[:, i] = err
        W[:, i2:] -= Err1 @ Hinv[i1:i2, i2:]

    inv = np.argsort(perm)
    codes = codes[:, inv]
    return QuantizedLinear("uniform", bits, group_size, (out, width), pack_codes(codes, bits),
                           scale=scale, offset=offset,
                           meta={"damp": damp, "act_sort": bool(act_sort)})
