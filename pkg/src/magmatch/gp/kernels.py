"""Divergence-free squared-exponential kernel and its analytic derivatives.

All batched functions take point arrays ``X`` (N, 3) and ``Y`` (M, 3) and
return per-pair 3x3 blocks. Derivatives are always taken with respect to the
*first* argument, so ``d1[n, m, i]`` is Cov(dB/dx_i at X[n], B at Y[m]).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# (i, j) order of the six distinct second derivatives
SECOND_PAIRS = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))
PAIR_INDEX = {p: k for k, p in enumerate(SECOND_PAIRS)} | {(j, i): k for k, (i, j) in enumerate(SECOND_PAIRS)}

_I3 = np.eye(3)


@dataclass(frozen=True)
class KernelParams:
    """Hyperparameters of the divergence-free kernel.

    ``sigma_f2`` scales the kernel so that each field component has prior
    variance ``2 * sigma_f2 / lengthscale**2``. ``noise_cov`` is the 3x3
    measurement noise covariance; a scalar is read as an isotropic variance.
    """

    sigma_f2: float
    lengthscale: float
    noise_cov: np.ndarray = field(default_factory=lambda: 1e-6 * np.eye(3))

    def __post_init__(self):
        if not self.sigma_f2 > 0:
            raise ValueError("sigma_f2 must be positive")
        if not self.lengthscale > 0:
            raise ValueError("lengthscale must be positive")
        n = np.asarray(self.noise_cov, dtype=float)
        n = n * np.eye(3) if n.ndim == 0 else n.reshape(3, 3)
        if not np.allclose(n, n.T) or np.linalg.eigvalsh(n).min() <= 0:
            raise ValueError("noise_cov must be symmetric positive definite")
        object.__setattr__(self, "sigma_f2", float(self.sigma_f2))
        object.__setattr__(self, "lengthscale", float(self.lengthscale))
        object.__setattr__(self, "noise_cov", n)

    @classmethod
    def isotropic(cls, sigma_f2: float, lengthscale: float, noise_std: float) -> KernelParams:
        return cls(sigma_f2, lengthscale, noise_std**2 * np.eye(3))

    @classmethod
    def from_field_scale(cls, field_std: float, lengthscale: float, noise_std: float) -> KernelParams:
        """Pick ``sigma_f2`` so each prior field component has std ``field_std``."""
        return cls.isotropic(0.5 * field_std**2 * lengthscale**2, lengthscale, noise_std)

    @property
    def prior_component_var(self) -> float:
        return 2.0 * self.sigma_f2 / self.lengthscale**2

    def to_dict(self) -> dict:
        return {
            "sigma_f2": self.sigma_f2,
            "lengthscale": self.lengthscale,
            "noise_cov": [float(v) for v in self.noise_cov.ravel()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> KernelParams:
        return cls(d["sigma_f2"], d["lengthscale"], np.asarray(d["noise_cov"], dtype=float).reshape(3, 3))


def _scaled_lag(X, Y, l):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    q = (X[:, None, :] - Y[None, :, :]) / l
    s = np.einsum("nmk,nmk->nm", q, q)
    return q, s


def _shape_matrix(q, s):
    # M = q q^T + (2 - |q|^2) I
    return q[..., :, None] * q[..., None, :] + (2.0 - s)[..., None, None] * _I3


def _shape_deriv(q, i):
    # dM/dq_i = e_i q^T + q e_i^T - 2 q_i I
    D = np.zeros(q.shape[:-1] + (3, 3))
    D[..., i, :] += q
    D[..., :, i] += q
    D -= 2.0 * q[..., i, None, None] * _I3
    return D


def kernel_blocks(X, Y, params: KernelParams) -> np.ndarray:
    """K^B for every pair, shape (N, M, 3, 3)."""
    q, s = _scaled_lag(X, Y, params.lengthscale)
    c = params.sigma_f2 / params.lengthscale**2
    return (c * np.exp(-0.5 * s))[..., None, None] * _shape_matrix(q, s)


def kernel_first_blocks(X, Y, params: KernelParams) -> np.ndarray:
    """First derivatives, shape (N, M, 3, 3, 3) indexed [n, m, i, a, b]."""
    l = params.lengthscale
    q, s = _scaled_lag(X, Y, l)
    pref = (params.sigma_f2 / l**3) * np.exp(-0.5 * s)
    M = _shape_matrix(q, s)
    out = np.empty(q.shape[:-1] + (3, 3, 3))
    for i in range(3):
        out[..., i, :, :] = pref[..., None, None] * (_shape_deriv(q, i) - q[..., i, None, None] * M)
    return out


def kernel_second_blocks(X, Y, params: KernelParams) -> np.ndarray:
    """Second derivatives for ``SECOND_PAIRS``, shape (N, M, 6, 3, 3)."""
    l = params.lengthscale
    q, s = _scaled_lag(X, Y, l)
    pref = (params.sigma_f2 / l**4) * np.exp(-0.5 * s)
    M = _shape_matrix(q, s)
    D = [_shape_deriv(q, i) for i in range(3)]
    out = np.empty(q.shape[:-1] + (6, 3, 3))
    for k, (i, j) in enumerate(SECOND_PAIRS):
        dij = 1.0 if i == j else 0.0
        # d2M/dq_i dq_j = e_i e_j^T + e_j e_i^T - 2 delta_ij I
        Dij = np.zeros((3, 3))
        Dij[i, j] += 1.0
        Dij[j, i] += 1.0
        Dij -= 2.0 * dij * _I3
        term = (
            (q[..., i] * q[..., j] - dij)[..., None, None] * M
            - q[..., j, None, None] * D[i]
            - q[..., i, None, None] * D[j]
            + Dij
        )
        out[..., k, :, :] = pref[..., None, None] * term
    return out


def blocks_to_matrix(B: np.ndarray) -> np.ndarray:
    """(N, M, 3, 3) blocks -> (3N, 3M) matrix, point-major ordering."""
    N, M = B.shape[:2]
    return B.transpose(0, 2, 1, 3).reshape(3 * N, 3 * M)


def gram(X, Y, params: KernelParams) -> np.ndarray:
    return blocks_to_matrix(kernel_blocks(X, Y, params))


def kernel_div_free(x, x2, params: KernelParams) -> np.ndarray:
    """K^B(x, x') as a 3x3 matrix."""
    return kernel_blocks(x, x2, params)[0, 0]


def kernel_first_deriv(x, x2, params: KernelParams, i: int) -> np.ndarray:
    """Cov(dB/dx_i at x, B at x')."""
    if i not in (0, 1, 2):
        raise ValueError("derivative index must be 0, 1 or 2")
    return kernel_first_blocks(x, x2, params)[0, 0, i]


def kernel_second_deriv(x, x2, params: KernelParams, i: int, j: int) -> np.ndarray:
    """Cov(d2B/dx_i dx_j at x, B at x'); symmetric in (i, j)."""
    if i not in (0, 1, 2) or j not in (0, 1, 2):
        raise ValueError("derivative indices must be 0, 1 or 2")
    return kernel_second_blocks(x, x2, params)[0, 0, PAIR_INDEX[(i, j)]]


def contract(X, Y, params: KernelParams, w, order: int = 0) -> np.ndarray:
    """Apply kernels between ``X`` and ``Y`` to per-point weights ``w`` (M, 3).

    Same result as contracting the block arrays above, without forming them:
    order 0 gives (N, 3) field values, order 1 the Jacobians (N, 3, 3)
    indexed [n, a, i], order 2 the second derivatives (N, 6, 3).
    """
    l = params.lengthscale
    q, s = _scaled_lag(X, Y, l)
    w = np.asarray(w, dtype=float)
    phi = np.exp(-0.5 * s)
    qw = np.einsum("nmk,mk->nm", q, w)
    Mw = q * qw[..., None] + (2.0 - s)[..., None] * w[None]
    if order == 0:
        return (params.sigma_f2 / l**2) * np.einsum("nm,nma->na", phi, Mw)

    def Dw(i):
        # (e_i q^T + q e_i^T - 2 q_i I) w
        out = q * w[None, :, i, None] - 2.0 * q[..., i, None] * w[None]
        out[..., i] += qw
        return out

    D = [Dw(i) for i in range(3)]
    if order == 1:
        J = np.empty((len(q), 3, 3))
        for i in range(3):
            J[:, :, i] = np.einsum("nm,nma->na", phi, D[i] - q[..., i, None] * Mw)
        return (params.sigma_f2 / l**3) * J
    if order == 2:
        S2 = np.empty((len(q), 6, 3))
        for k, (i, j) in enumerate(SECOND_PAIRS):
            dij = 1.0 if i == j else 0.0
            Dijw = -2.0 * dij * np.broadcast_to(w, q.shape[1:])
            Dijw = Dijw.copy()
            Dijw[:, i] += w[:, j]
            Dijw[:, j] += w[:, i]
            term = (
                (q[..., i] * q[..., j] - dij)[..., None] * Mw
                - q[..., j, None] * D[i]
                - q[..., i, None] * D[j]
                + Dijw[None]
            )
            S2[:, k] = np.einsum("nm,nma->na", phi, term)
        return (params.sigma_f2 / l**4) * S2
    raise ValueError("order must be 0, 1 or 2")
