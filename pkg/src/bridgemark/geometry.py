"""Gaussian kernels, landmark configurations and the landmark Hamiltonian.

Positions and momenta are stored flat with landmark i, coordinate alpha at
index ``i*d + alpha``.  The compute routines take arrays shaped
``(..., n, d)`` so they work batched over replicates and with forward-mode
Jets (see :mod:`bridgemark.ad`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ad
from .errors import NumericalError

# Configurations closer than this multiple of the kernel scale are treated
# as coincident: the Gram matrix is numerically singular there.
MIN_SEPARATION_FACTOR = 1e-8


@dataclass(frozen=True)
class KernelParams:
    """Gaussian kernel c * exp(-|x|^2 / (2 a^2))."""

    a: float
    c: float = 1.0

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"kernel length-scale must be positive, got {self.a}")
        if not self.c > 0:
            raise ValueError(f"kernel amplitude must be positive, got {self.c}")


@dataclass(frozen=True)
class LandmarkConfig:
    """n distinct landmarks in R^d, positions flattened to length n*d."""

    n: int
    d: int
    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(-1)
        object.__setattr__(self, "q", q)
        if q.shape != (self.n * self.d,):
            raise ValueError(
                f"expected {self.n * self.d} position entries, got {q.shape[0]}")
        if self.n > 1 and min_pairwise_distance(self.points) <= 0.0:
            raise ValueError("landmark positions must be pairwise distinct")

    @property
    def points(self) -> np.ndarray:
        return self.q.reshape(self.n, self.d)


@dataclass(frozen=True)
class PhaseState:
    """Positions and conjugate momenta of a landmark configuration."""

    q: np.ndarray
    p: np.ndarray
    n: int
    d: int

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(-1)
        p = np.asarray(self.p, dtype=float).reshape(-1)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)
        if q.shape != p.shape or q.shape != (self.n * self.d,):
            raise ValueError("positions and momenta must both have length n*d")

    @classmethod
    def from_flat(cls, x: np.ndarray, n: int, d: int) -> "PhaseState":
        x = np.asarray(x, dtype=float).reshape(-1)
        return cls(x[: n * d], x[n * d :], n, d)

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.q, self.p])


def min_pairwise_distance(points: np.ndarray) -> float:
    pts = np.asarray(points, dtype=float)
    if pts.shape[0] < 2:
        return np.inf
    diffs = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diffs ** 2).sum(axis=-1))
    iu = np.triu_indices(pts.shape[0], k=1)
    return float(dist[iu].min())


def check_separation(points: np.ndarray, params: KernelParams) -> None:
    """Reject configurations with nearly coincident landmarks."""
    if min_pairwise_distance(points) < MIN_SEPARATION_FACTOR * params.a:
        raise ValueError(
            "landmark configuration has (near-)coincident points relative to "
            f"the kernel scale a={params.a}")


def kernel_eval(params: KernelParams, x):
    """Kernel value at displacement x, batched over leading axes of (..., d)."""
    sq = ad.asum(x * x, axis=-1)
    k = ad.exp(sq * (-0.5 / params.a ** 2))
    if params.c != 1.0:
        k = k * params.c
    return k


def kernel_grad(params: KernelParams, x):
    """Gradient of the kernel at displacement x; zero at the origin."""
    k = kernel_eval(params, x)
    return k[..., None] * x * (-1.0 / params.a ** 2)


def _pair_diffs(q):
    # q: (..., n, d) -> (..., n, n, d) of q_i - q_j
    return q[..., :, None, :] - q[..., None, :, :]


def hamiltonian(params: KernelParams, q, p):
    """H(q, p) = 1/2 sum_ij <p_i, p_j> k(q_i - q_j) for (..., n, d) arrays."""
    kmat = kernel_eval(params, _pair_diffs(q))
    pdot = ad.matmul(p, ad.transpose_last2(p))
    return ad.asum(ad.asum(pdot * kmat, axis=-1), axis=-1) * 0.5


def hamiltonian_partials(params: KernelParams, q, p):
    """dH/dp and dH/dq for (..., n, d) arrays, returned in the same shape.

    dH/dp_i = sum_j p_j k(q_i - q_j)
    dH/dq_i = sum_j <p_i, p_j> grad k(q_i - q_j)
    """
    n = ad.value(q).shape[-2]
    if n == 1:
        dHdp = p * params.c
        dHdq = p * 0.0
        return dHdp, dHdq
    diffs = _pair_diffs(q)
    kmat = kernel_eval(params, diffs)
    gradk = kmat[..., None] * diffs * (-1.0 / params.a ** 2)
    dHdp = ad.matmul(kmat, p)
    pdot = ad.matmul(p, ad.transpose_last2(p))
    dHdq = ad.asum(pdot[..., None] * gradk, axis=-2)
    return dHdp, dHdq


def hamiltonian_state(params: KernelParams, state: PhaseState) -> float:
    q = state.q.reshape(state.n, state.d)
    p = state.p.reshape(state.n, state.d)
    return float(hamiltonian(params, q, p))


def gram_matrix(params: KernelParams, points: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Block kernel matrix with (i, j) block k(q_i - q_j) * I_d."""
    pts = np.asarray(points, dtype=float)
    n, d = pts.shape
    kmat = kernel_eval(params, _pair_diffs(pts))
    gram = np.kron(kmat, np.eye(d))
    if jitter:
        gram = gram + jitter * np.eye(n * d)
    return gram


def gram_cholesky(params: KernelParams, points: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Lower Cholesky factor of the Gram matrix.

    Raises NumericalError when the factorization does not exist, which
    signals coincident or near-coincident landmarks.
    """
    gram = gram_matrix(params, points, jitter=jitter)
    try:
        return np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "Gram matrix is not positive definite; landmarks are coincident "
            "or nearly so") from exc
