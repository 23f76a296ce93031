"""Independent reference computations used by the tests.

Built from dense matrices with explicit solves, sharing nothing with the
recursive code path except the kernel Gram function.
"""

import numpy as np

from magmatch.gp.kernels import kernel_div_free


def batch_sor(K_U, K_XU, Y, noise_cov):
    """Batch SoR posterior over inducing values in information form.

    ``K_XU`` is the (3N, 3U) cross-covariance; returns (mean (3U,), cov).
    """
    H = np.linalg.solve(K_U.T, K_XU.T).T  # K_XU K_U^{-1}
    n = K_XU.shape[0] // 3
    R_inv = np.kron(np.eye(n), np.linalg.inv(noise_cov))
    cov = np.linalg.inv(np.linalg.inv(K_U) + H.T @ R_inv @ H)
    mean = cov @ (H.T @ R_inv @ np.asarray(Y, dtype=float).reshape(-1))
    return mean, cov


def sor_predictive_mean(K_SU, K_U, K_XU, Y, noise_cov):
    """Textbook SoR predictive mean K_SU (K_UX R^-1 K_XU + K_U)^-1 K_UX R^-1 y."""
    n = K_XU.shape[0] // 3
    R_inv = np.kron(np.eye(n), np.linalg.inv(noise_cov))
    A = K_XU.T @ R_inv @ K_XU + K_U
    return K_SU @ np.linalg.solve(A, K_XU.T @ R_inv @ np.asarray(Y, dtype=float).reshape(-1))


def fd_first(x, x2, params, i, step):
    e = np.zeros(3)
    e[i] = step
    return (kernel_div_free(x + e, x2, params) - kernel_div_free(x - e, x2, params)) / (2 * step)


def fd_second(x, x2, params, i, j, step):
    ei, ej = np.zeros(3), np.zeros(3)
    ei[i] = step
    ej[j] = step
    K = lambda p: kernel_div_free(p, x2, params)
    return (K(x + ei + ej) - K(x + ei - ej) - K(x - ei + ej) + K(x - ei - ej)) / (4 * step**2)


def fd_divergence(f, x, step):
    div = 0.0
    for i in range(3):
        e = np.zeros(3)
        e[i] = step
        div += (f(x + e)[i] - f(x - e)[i]) / (2 * step)
    return div


def fd_hessian(f, x, step):
    """Central second differences of a scalar function."""
    H = np.empty((3, 3))
    I = np.eye(3) * step
    for i in range(3):
        for j in range(3):
            H[i, j] = (f(x + I[i] + I[j]) - f(x + I[i] - I[j]) - f(x - I[i] + I[j]) + f(x - I[i] - I[j])) / (4 * step**2)
    return H
