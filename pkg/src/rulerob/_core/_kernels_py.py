"""Pure-numpy implementations of the hot kernels.

Same signatures as the compiled module ``rulerob._core._kernels``; used
as the fallback when the extension is unavailable (or forced via the
``RULEROB_PURE_PYTHON`` environment variable).
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def se_ard_cross(queries: np.ndarray, train: np.ndarray, inv_ls_sq: np.ndarray, sigma2: float) -> np.ndarray:
    """Cross-covariance matrix of the anisotropic squared-exponential kernel.

    Parameters
    ----------
    queries : (m, n_z) array
    train : (n, n_z) array
    inv_ls_sq : (n_z,) array
        Per-feature inverse squared length scales.
    sigma2 : float
        Process variance (kernel value at zero distance).

    Returns
    -------
    (m, n) array with entries ``sigma2 * exp(-0.5 * sum_j inv_ls_sq[j] * (q_j - t_j)^2)``.
    """
    qw = queries * inv_ls_sq
    # expanded ||q - t||^2 in the scaled metric; clamp tiny negatives from cancellation
    sq = (qw * queries).sum(axis=1)[:, None] + (train * inv_ls_sq * train).sum(axis=1)[None, :]
    sq -= 2.0 * qw @ train.T
    np.maximum(sq, 0.0, out=sq)
    return sigma2 * np.exp(-0.5 * sq)


def se_ard_gram(train: np.ndarray, inv_ls_sq: np.ndarray, sigma2: float, diag_add: float) -> np.ndarray:
    """Symmetric Gram matrix of the SE-ARD kernel with ``diag_add`` on the diagonal."""
    gram = se_ard_cross(train, train, inv_ls_sq, sigma2)
    # exact symmetry and exact sigma2 on the diagonal regardless of rounding
    gram = 0.5 * (gram + gram.T)
    np.fill_diagonal(gram, sigma2 + diag_add)
    return gram


def quintic_eval(coeffs: np.ndarray, ts: np.ndarray, deriv: int = 0) -> np.ndarray:
    """Evaluate batches of quintic polynomials (or a derivative) on a time grid.

    Parameters
    ----------
    coeffs : (n, 6) array
        Rows of coefficients ``c0..c5`` for ``p(t) = sum c_i t^i``.
    ts : (m,) array
    deriv : int
        Derivative order, 0..3.

    Returns
    -------
    (n, m) array of values.
    """
    if deriv < 0 or deriv > 3:
        raise ValueError(f"derivative order must be 0..3, got {deriv}")
    c = np.asarray(coeffs, dtype=float)
    for _ in range(deriv):
        c = c[:, 1:] * np.arange(1, c.shape[1])
    out = np.zeros((c.shape[0], len(ts)))
    for k in range(c.shape[1] - 1, -1, -1):
        out *= ts
        out += c[:, k][:, None]
    return out
