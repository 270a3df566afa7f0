"""Ito-form drift and diffusion of the three stochastic landmark models.

The Lagrangian model puts independent additive noise on each momentum
coordinate; the Langevin model adds a dissipative drift on momenta; the
Eulerian model drives the landmarks through spatially fixed noise fields
(transport noise), which requires a Stratonovich-to-Ito drift correction.
Each model also exposes its linear auxiliary process (Btil, betatil,
sigmatil), the tractable surrogate that the guiding machinery is built on.

State layout: x = [q_flat, p_flat] with landmark i, coordinate alpha at
index i*d + alpha inside each block.  All coefficient functions accept
batched states shaped (..., 2*n*d) and forward-mode Jets.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import ad
from .errors import NumericalError
from .geometry import KernelParams, check_separation, hamiltonian_partials, kernel_eval

LAGRANGIAN = "lagrangian"
LANGEVIN = "langevin"
EULERIAN = "eulerian"
VARIANTS = (LAGRANGIAN, LANGEVIN, EULERIAN)

# Field amplitude scaling keeping the position noise close to a
# decomposition of unity on a grid of spacing 2*tau.
FIELD_SCALE = 2.0 / np.pi


@dataclass(frozen=True)
class NoiseFieldGrid:
    """Gaussian noise fields on fixed centers, one field per center per axis."""

    centers: np.ndarray  # (J_loc, d)
    tau: float
    gamma: np.ndarray  # (d,) per-direction amplitudes

    def __post_init__(self):
        centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "gamma", gamma)
        if not self.tau > 0:
            raise ValueError(f"noise-field scale tau must be positive, got {self.tau}")
        if centers.shape[1] != gamma.shape[0]:
            raise ValueError("gamma must have one amplitude per coordinate direction")

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    @property
    def n_centers(self) -> int:
        return self.centers.shape[0]

    @property
    def n_fields(self) -> int:
        return self.n_centers * self.d

    @property
    def field_centers(self) -> np.ndarray:
        """(J, d) center of each field; each center repeats d times."""
        return np.repeat(self.centers, self.d, axis=0)

    @property
    def field_amps(self) -> np.ndarray:
        """(J, d) amplitude vector of each field: (2/pi) gamma_beta e_beta."""
        amps = np.zeros((self.n_fields, self.d))
        for j in range(self.n_centers):
            for beta in range(self.d):
                amps[j * self.d + beta, beta] = FIELD_SCALE * self.gamma[beta]
        return amps


def auto_grid(points: np.ndarray, tau: float, gamma, pad_cells: int = 1) -> NoiseFieldGrid:
    """Axis-aligned grid of centers spaced 2*tau covering the data.

    The grid covers the bounding box of ``points`` expanded by
    ``pad_cells`` spacings per side.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d = pts.shape[1]
    gamma = np.broadcast_to(np.atleast_1d(np.asarray(gamma, dtype=float)), (d,))
    spacing = 2.0 * tau
    axes = []
    for k in range(d):
        lo = pts[:, k].min() - pad_cells * spacing
        hi = pts[:, k].max() + pad_cells * spacing
        count = int(np.ceil((hi - lo) / spacing)) + 1
        axes.append(lo + spacing * np.arange(count))
    mesh = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([m.reshape(-1) for m in mesh], axis=-1)
    return NoiseFieldGrid(centers=centers, tau=tau, gamma=gamma.copy())


@dataclass(frozen=True)
class ModelSpec:
    """Variant tag plus every parameter the coefficient functions need."""

    variant: str
    n: int
    d: int
    kernel: KernelParams
    gamma: float = 0.1  # total amplitude; per-landmark amplitude is gamma/sqrt(n)
    lam: float = 0.0
    fields: NoiseFieldGrid | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}")
        if self.variant == LAGRANGIAN and self.lam != 0.0:
            raise ValueError("the Lagrangian model has no dissipation (lam must be 0)")
        if self.variant == LANGEVIN and self.lam < 0:
            raise ValueError("dissipation lam must be nonnegative")
        if self.variant == EULERIAN:
            if self.fields is None:
                raise ValueError("the Eulerian model requires a NoiseFieldGrid")
            if self.fields.d != self.d:
                raise ValueError("noise-field dimension does not match the model")

    @property
    def nd(self) -> int:
        return self.n * self.d

    @property
    def state_dim(self) -> int:
        return 2 * self.n * self.d

    @property
    def gamma_i(self) -> float:
        return self.gamma / np.sqrt(self.n)

    def with_kernel_scale(self, a: float) -> "ModelSpec":
        return replace(self, kernel=KernelParams(a=a, c=self.kernel.c))


def lagrangian(n, d, kernel, gamma=0.1):
    return ModelSpec(LAGRANGIAN, n, d, kernel, gamma=gamma)


def langevin(n, d, kernel, gamma=0.1, lam=0.25):
    return ModelSpec(LANGEVIN, n, d, kernel, gamma=gamma, lam=lam)


def eulerian(n, d, kernel, fields):
    return ModelSpec(EULERIAN, n, d, kernel, fields=fields)


def wiener_dim(spec: ModelSpec) -> int:
    """Dimension of the driving Wiener process."""
    if spec.variant == EULERIAN:
        return spec.fields.n_fields
    return spec.nd


def split_state(spec: ModelSpec, x):
    """(..., 2nd) flat state -> q, p shaped (..., n, d)."""
    nd = spec.nd
    q = ad.reshape_trailing(x[..., :nd], 1, (spec.n, spec.d))
    p = ad.reshape_trailing(x[..., nd:], 1, (spec.n, spec.d))
    return q, p


def join_blocks(spec: ModelSpec, qblock, pblock):
    """q, p shaped (..., n, d) -> flat (..., 2nd)."""
    nd = spec.nd
    qf = ad.reshape_trailing(qblock, 2, (nd,))
    pf = ad.reshape_trailing(pblock, 2, (nd,))
    return ad.concat([qf, pf], axis=-1)


def noise_field_eval(grid: NoiseFieldGrid, q, kernel_for_noise: KernelParams | None = None):
    """All J field vectors at a point q in R^d, returned as (J, d)."""
    kern = kernel_for_noise or KernelParams(a=grid.tau)
    y = np.asarray(q, dtype=float) - grid.field_centers
    kb = kernel_eval(kern, y)
    return kb[:, None] * grid.field_amps


def _field_geometry(grid: NoiseFieldGrid, q):
    """Per-landmark field kernel values and derivatives.

    q: (..., n, d).  Returns kb (..., n, J), gk (..., n, J, d),
    where kb is the field kernel and gk its gradient in q.
    """
    inv_t2 = 1.0 / grid.tau ** 2
    y = q[..., :, None, :] - grid.field_centers
    kb = ad.exp(ad.asum(y * y, axis=-1) * (-0.5 * inv_t2))
    gk = kb[..., None] * y * (-inv_t2)
    return y, kb, gk


def strat_to_ito_correction(spec: ModelSpec, x):
    """Drift correction from reading the transport noise in Ito form.

    Zero for the Lagrangian and Langevin models.  For the Eulerian model,
    per landmark, with z_l(q) = <grad kb(q - delta_l), g_l>:
      q-block: 1/2 sum_l z_l(q) kb(q - delta_l) g_l
      p-block: 1/2 sum_l <p, g_l> (z_l(q) grad kb - kb grad z_l)
    """
    if spec.variant != EULERIAN:
        return x * 0.0
    grid = spec.fields
    q, p = split_state(spec, x)
    amps = grid.field_amps
    inv_t2 = 1.0 / grid.tau ** 2
    y, kb, gk = _field_geometry(grid, q)
    z = ad.asum(gk * amps, axis=-1)                      # (..., n, J)
    ydotg = ad.asum(y * amps, axis=-1)                   # (..., n, J)
    gz = (kb * inv_t2)[..., None] * (ydotg[..., None] * y * inv_t2 - amps)
    corr_q = ad.asum((z * kb)[..., None] * amps, axis=-2) * 0.5
    pg = ad.asum(p[..., :, None, :] * amps, axis=-1)     # (..., n, J)
    corr_p = ad.asum(pg[..., None] * (z[..., None] * gk - kb[..., None] * gz),
                     axis=-2) * 0.5
    return join_blocks(spec, corr_q, corr_p)


def hamiltonian_drift(spec: ModelSpec, x):
    """Canonical drift (dH/dp, -dH/dq), with -lam dH/dp damping if set."""
    q, p = split_state(spec, x)
    dHdp, dHdq = hamiltonian_partials(spec.kernel, q, p)
    pdot = -dHdq
    if spec.lam != 0.0:
        pdot = pdot - spec.lam * dHdp
    return join_blocks(spec, dHdp, pdot)


def drift(spec: ModelSpec, t, x):
    """Full Ito drift at state x (time-homogeneous; t kept for the interface)."""
    b = hamiltonian_drift(spec, x)
    if spec.variant == EULERIAN:
        b = b + strat_to_ito_correction(spec, x)
    return b


def drift_stratonovich(spec: ModelSpec, t, x):
    """Drift of the Stratonovich reading (no Ito correction)."""
    return hamiltonian_drift(spec, x)


def diffusion(spec: ModelSpec, t, x):
    """Diffusion matrix sigma(t, x), shaped (..., 2nd, N')."""
    if spec.variant != EULERIAN:
        nd = spec.nd
        sig = np.zeros((2 * nd, nd))
        sig[nd:, :] = spec.gamma_i * np.eye(nd)
        xval = ad.value(x)
        if xval.ndim > 1:
            sig = np.broadcast_to(sig, xval.shape[:-1] + sig.shape)
        return sig
    grid = spec.fields
    q, p = split_state(spec, x)
    amps = grid.field_amps
    _, kb, gk = _field_geometry(grid, q)
    sigq = kb[..., None] * amps                       # (..., n, J, d)
    pg = ad.asum(p[..., :, None, :] * amps, axis=-1)  # (..., n, J)
    sigp = pg[..., None] * gk * (-1.0)                # (..., n, J, d)
    J = grid.n_fields
    nd = spec.nd
    sigq = ad.reshape_trailing(ad.transpose_last2(sigq), 3, (nd, J))
    sigp = ad.reshape_trailing(ad.transpose_last2(sigp), 3, (nd, J))
    return ad.concat([sigq, sigp], axis=-2)


def noise_increment(spec: ModelSpec, x, dw):
    """sigma(t, x) @ dw without assembling the matrix for additive models."""
    if spec.variant != EULERIAN:
        scaled = dw * spec.gamma_i
        return ad.concat([scaled * 0.0, scaled], axis=-1)
    return ad.bmatvec(diffusion(spec, 0.0, x), dw)


@dataclass(frozen=True)
class AuxiliaryProcess:
    """Linear process dXtil = (Btil Xtil + betatil) dt + sigmatil dW."""

    Btil: np.ndarray      # (2nd, 2nd)
    betatil: np.ndarray   # (2nd,)
    sigmatil: np.ndarray  # (2nd, N')
    atil: np.ndarray      # sigmatil @ sigmatil.T, cached
    n: int
    d: int

    def drift(self, x):
        return ad.bmatvec(self.Btil, x) + self.betatil


def auxiliary_for(spec: ModelSpec, qT_points: np.ndarray) -> AuxiliaryProcess:
    """Linear auxiliary process frozen at the observed final positions.

    For all variants the position rows reproduce dH/dp with the kernel
    evaluated at the observed positions.  The Langevin damping is kept
    (it is linear in momenta); the nonlinear -dH/dq momentum drift is
    dropped.  For the Eulerian model the frozen Ito corrections are
    superimposed: their momentum-linear part enters Btil, the constant
    part betatil, and the diffusion is frozen at (qT, p=0) so that the
    position rows of sigmatil match the model exactly.
    """
    qT = np.asarray(qT_points, dtype=float).reshape(spec.n, spec.d)
    check_separation(qT, spec.kernel)
    n, d, nd = spec.n, spec.d, spec.nd
    kmat = kernel_eval(spec.kernel, qT[:, None, :] - qT[None, :, :])
    kblock = np.kron(kmat, np.eye(d))

    Btil = np.zeros((2 * nd, 2 * nd))
    Btil[:nd, nd:] = kblock
    betatil = np.zeros(2 * nd)

    if spec.variant == LANGEVIN:
        Btil[nd:, nd:] = -spec.lam * kblock

    if spec.variant != EULERIAN:
        sigmatil = np.zeros((2 * nd, nd))
        sigmatil[nd:, :] = spec.gamma_i * np.eye(nd)
    else:
        grid = spec.fields
        corr = strat_to_ito_correction(
            spec, np.concatenate([qT.reshape(-1), np.zeros(nd)]))
        betatil[:nd] = corr[:nd]
        # Momentum correction is linear in p: fold 1/2 sum_l w_l g_l^T per
        # landmark into the (i, i) momentum block of Btil.
        amps = grid.field_amps
        inv_t2 = 1.0 / grid.tau ** 2
        y, kb, gk = _field_geometry(grid, qT)
        z = np.sum(gk * amps, axis=-1)
        ydotg = np.sum(y * amps, axis=-1)
        gz = (kb * inv_t2)[..., None] * (ydotg[..., None] * y * inv_t2 - amps)
        w = z[..., None] * gk - kb[..., None] * gz      # (n, J, d)
        for i in range(n):
            Ci = 0.5 * np.einsum('ja,jb->ab', w[i], amps)
            Btil[nd + i * d: nd + (i + 1) * d, nd + i * d: nd + (i + 1) * d] = Ci
        J = grid.n_fields
        sigmatil = np.zeros((2 * nd, J))
        sigmatil[:nd, :] = np.swapaxes(kb[..., None] * amps, -1, -2).reshape(nd, J)

    aux = AuxiliaryProcess(Btil=Btil, betatil=betatil, sigmatil=sigmatil,
                           atil=sigmatil @ sigmatil.T, n=n, d=d)
    _check_matching(spec, aux, qT)
    return aux


def matching_residuals(spec: ModelSpec, aux: AuxiliaryProcess, qT_points, p):
    """Position-row mismatches between model and auxiliary at time T.

    Returns (drift_resid, drift_scale, diff_resid, diff_scale) where the
    residuals compare L_T b against L_T btil and L_T a L_T' against
    L_T atil L_T' at a state whose positions equal the observation.
    """
    qT = np.asarray(qT_points, dtype=float).reshape(-1)
    nd = spec.nd
    x = np.concatenate([qT, np.asarray(p, dtype=float).reshape(-1)])
    b = drift(spec, 0.0, x)
    btil = aux.drift(x)
    drift_resid = np.linalg.norm(b[:nd] - btil[:nd])
    drift_scale = 1.0 + np.linalg.norm(b)
    sig = diffusion(spec, 0.0, x)
    a_qq = sig[:nd] @ sig[:nd].T
    atil_qq = aux.atil[:nd, :nd]
    diff_resid = np.linalg.norm(a_qq - atil_qq)
    diff_scale = 1.0 + np.linalg.norm(sig @ sig.T)
    return drift_resid, drift_scale, diff_resid, diff_scale


def _check_matching(spec, aux, qT, tol=1e-9):
    # Drift clause checked at p=0 (the frozen Eulerian correction is only
    # defined at the observed positions); diffusivity clause is p-free.
    dr, ds, ar, ascale = matching_residuals(spec, aux, qT, np.zeros(spec.nd))
    if dr > tol * ds or ar > tol * ascale:
        raise NumericalError(
            "auxiliary process fails the time-T matching conditions "
            f"(drift residual {dr:.2e}, diffusivity residual {ar:.2e})")
