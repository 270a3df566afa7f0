"""Backward information filter and guided-proposal simulation.

The conditioning on a noisy terminal observation enters through three
time-dependent quantities (L, Mdagger, mu) obtained by integrating linear
ODEs backward from the observation time.  From those, the guiding term

    rtil(t, x) = L(t)' M(t) (v(t) - mu(t) - L(t) x),   M = inv(Mdagger)

is superimposed on the model drift, and the likelihood correction log Psi
is accumulated along the simulated path.  Mdagger is never inverted:
every product with M goes through triangular solves against its stored
Cholesky factor, and the per-knot affine coefficients of rtil are
precomputed once per solve.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular

from . import ad, models
from .errors import NumericalError
from .models import AuxiliaryProcess, ModelSpec

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing knots 0 = t_0 < ... < t_K = T."""

    knots: np.ndarray

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, "knots", knots)
        if knots.ndim != 1 or knots.shape[0] < 2:
            raise ValueError("a time grid needs at least two knots")
        if knots[0] != 0.0 or np.any(np.diff(knots) <= 0):
            raise ValueError("knots must start at 0 and increase strictly")

    @property
    def T(self) -> float:
        return float(self.knots[-1])

    @property
    def K(self) -> int:
        return self.knots.shape[0] - 1

    @property
    def dts(self) -> np.ndarray:
        return np.diff(self.knots)


def make_grid(T: float, h: float) -> TimeGrid:
    """Uniform mesh of width h on [0, T] warped by s -> s(2 - s).

    The warp leaves the endpoints fixed and shrinks the spacing toward T,
    where the guiding term is largest.
    """
    if not 0 < h <= T:
        raise ValueError(f"mesh width must satisfy 0 < h <= T, got h={h}, T={T}")
    K = max(1, int(round(T / h)))
    u = np.linspace(0.0, 1.0, K + 1)
    return TimeGrid(knots=T * u * (2.0 - u))


@dataclass(frozen=True)
class ObservationScheme:
    """Noisy linear observations of the state at time T (and optionally 0)."""

    LT: np.ndarray
    SigmaT: np.ndarray
    vT: np.ndarray
    L0: np.ndarray | None = None
    Sigma0: np.ndarray | None = None
    v0: np.ndarray | None = None

    def __post_init__(self):
        LT = np.atleast_2d(np.asarray(self.LT, dtype=float))
        object.__setattr__(self, "LT", LT)
        object.__setattr__(self, "SigmaT", np.atleast_2d(np.asarray(self.SigmaT, dtype=float)))
        object.__setattr__(self, "vT", np.asarray(self.vT, dtype=float).reshape(-1))
        if not np.allclose(LT @ LT.T, np.eye(LT.shape[0]), atol=1e-12):
            raise ValueError("observation rows must be orthonormal (L L' = I)")
        if self.vT.shape[0] != LT.shape[0]:
            raise ValueError("observed vector does not match the projection")
        if (self.L0 is None) != (self.v0 is None):
            raise ValueError("time-0 observation needs both L0 and v0")


def position_observation(n: int, d: int, vT, eps: float,
                         v0=None, sigma0: float | None = None) -> ObservationScheme:
    """Observe landmark positions at T with N(0, eps^2 I) noise."""
    if not eps > 0:
        raise ValueError("observation noise eps must be strictly positive")
    nd = n * d
    LT = np.hstack([np.eye(nd), np.zeros((nd, nd))])
    L0 = Sigma0 = v0arr = None
    if v0 is not None:
        if sigma0 is None or not sigma0 > 0:
            raise ValueError("a time-0 observation needs sigma0 > 0")
        L0 = LT.copy()
        Sigma0 = sigma0 ** 2 * np.eye(nd)
        v0arr = np.asarray(v0, dtype=float).reshape(-1)
    return ObservationScheme(LT=LT, SigmaT=eps ** 2 * np.eye(nd),
                             vT=np.asarray(vT, dtype=float).reshape(-1),
                             L0=L0, Sigma0=Sigma0, v0=v0arr)


@dataclass(frozen=True)
class GuidingTables:
    """Per-knot backward quantities plus precomputed guiding coefficients.

    Fs and Hs are the affine coefficients of the guiding term,
    rtil(t_k, x) = Fs[k] - Hs[k] @ x, with Hs[k] = L' M L the negative
    log-density Hessian.  ``aug0`` holds the time-0 quantities augmented
    with the initial observation when one is configured; index 0 of the
    knot arrays always holds the 0+ limit.
    """

    grid: TimeGrid
    L: np.ndarray        # (K+1, m, N)
    cholMd: np.ndarray   # (K+1, m, m) lower Cholesky factors of Mdagger
    mu: np.ndarray       # (K+1, m)
    v: np.ndarray        # (m,)
    Hs: np.ndarray       # (K+1, N, N)
    Fs: np.ndarray       # (K+1, N)
    logdets: np.ndarray  # (K+1,) log det Mdagger(t_k)
    aug0: tuple | None = None  # (L, cholMd, mu, v, logdet) at t=0

    @property
    def state_dim(self) -> int:
        return self.L.shape[2]


def solve_backward(aux: AuxiliaryProcess, obs: ObservationScheme,
                   grid: TimeGrid) -> GuidingTables:
    """Integrate the backward ODEs for (L, Mdagger, mu) on the grid.

    L uses an implicit Euler step, solving L_k (I - dt Btil) = L_{k+1};
    Mdagger and mu use the trapezoid rule on the already-computed L values.
    Terminal values are assigned exactly.
    """
    knots = grid.knots
    K = grid.K
    m, N = obs.LT.shape
    L = np.empty((K + 1, m, N))
    Md = np.empty((K + 1, m, m))
    mu = np.empty((K + 1, m))
    L[K] = obs.LT
    Md[K] = obs.SigmaT
    mu[K] = 0.0
    LaL_next = L[K] @ aux.atil @ L[K].T
    Lbeta_next = L[K] @ aux.betatil
    eye = np.eye(N)
    for k in range(K - 1, -1, -1):
        dt = knots[k + 1] - knots[k]
        step = eye - dt * aux.Btil
        L[k] = np.linalg.solve(step.T, L[k + 1].T).T
        LaL_k = L[k] @ aux.atil @ L[k].T
        Lbeta_k = L[k] @ aux.betatil
        Md[k] = Md[k + 1] + 0.5 * dt * (LaL_k + LaL_next)
        mu[k] = mu[k + 1] + 0.5 * dt * (Lbeta_k + Lbeta_next)
        LaL_next, Lbeta_next = LaL_k, Lbeta_k

    cholMd = np.empty_like(Md)
    Hs = np.empty((K + 1, N, N))
    Fs = np.empty((K + 1, N))
    logdets = np.empty(K + 1)
    for k in range(K + 1):
        try:
            cholMd[k] = np.linalg.cholesky(Md[k])
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                f"Mdagger is not positive definite at knot {k} "
                "(observation noise too small for this grid, or an "
                "ill-posed auxiliary process)") from exc
        Z = solve_triangular(cholMd[k], L[k], lower=True)
        Hs[k] = Z.T @ Z
        resid = obs.vT - mu[k]
        w = solve_triangular(cholMd[k], resid, lower=True)
        Fs[k] = Z.T @ w
        logdets[k] = 2.0 * np.sum(np.log(np.diag(cholMd[k])))

    aug0 = None
    if obs.L0 is not None:
        L0aug = np.vstack([obs.L0, L[0]])
        m0 = obs.L0.shape[0]
        Md0aug = np.zeros((m0 + m, m0 + m))
        Md0aug[:m0, :m0] = obs.Sigma0
        Md0aug[m0:, m0:] = Md[0]
        mu0aug = np.concatenate([np.zeros(m0), mu[0]])
        v0aug = np.concatenate([obs.v0, obs.vT])
        try:
            chol0 = np.linalg.cholesky(Md0aug)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("augmented time-0 covariance is singular") from exc
        logdet0 = 2.0 * np.sum(np.log(np.diag(chol0)))
        aug0 = (L0aug, chol0, mu0aug, v0aug, logdet0)

    return GuidingTables(grid=grid, L=L, cholMd=cholMd, mu=mu, v=obs.vT.copy(),
                         Hs=Hs, Fs=Fs, logdets=logdets, aug0=aug0)


def _chol_solve_vec(chol, r):
    """inv(chol) @ r along the last axis, for plain or Jet r."""
    if isinstance(r, ad.Jet):
        return ad.Jet(_chol_solve_vec(chol, r.val), _chol_solve_vec(chol, r.tan))
    if r.ndim == 1:
        return solve_triangular(chol, r, lower=True)
    m = r.shape[-1]
    flat = r.reshape(-1, m)
    out = solve_triangular(chol, flat.T, lower=True).T
    return out.reshape(r.shape)


def guiding_r(tables: GuidingTables, k: int, x):
    """rtil(t_k, x) evaluated through two triangular solves."""
    resid = tables.v - tables.mu[k] - ad.bmatvec(tables.L[k], x)
    chol = tables.cholMd[k]
    w = _chol_solve_vec(chol, resid)
    if isinstance(w, ad.Jet):
        w2 = ad.Jet(_upper_solve(chol, w.val), _upper_solve(chol, w.tan))
    else:
        w2 = _upper_solve(chol, w)
    return ad.bmatvec(tables.L[k].T, w2)


def _upper_solve(chol, w):
    if w.ndim == 1:
        return solve_triangular(chol.T, w, lower=False)
    m = w.shape[-1]
    flat = w.reshape(-1, m)
    return solve_triangular(chol.T, flat.T, lower=False).T.reshape(w.shape)


def log_rho_tilde(tables: GuidingTables, k: int, x):
    """Log-density of N(mu + L x, Mdagger) at the observed vector v(t_k).

    At knot 0 the augmented quantities are used when a time-0 observation
    is configured; otherwise this is the 0+ limit.
    """
    if k == 0 and tables.aug0 is not None:
        L, chol, mu, v, logdet = tables.aug0
    else:
        L, chol, mu, v, logdet = (tables.L[k], tables.cholMd[k], tables.mu[k],
                                  tables.v, tables.logdets[k])
    resid = v - mu - ad.bmatvec(L, x)
    z = _chol_solve_vec(chol, resid)
    quad = ad.vdot(z, z)
    m = L.shape[0]
    return quad * (-0.5) + (-0.5) * (logdet + m * LOG_2PI)


@dataclass(frozen=True)
class SDECoefficients:
    """Coefficient callables the guided simulator integrates.

    ``a_apply`` serves models whose diffusivity equals the auxiliary one
    exactly (the trace term of the likelihood integrand then vanishes and
    is skipped); state-dependent diffusivities supply ``diffusion``
    instead and set ``trace_term``.
    """

    drift: Callable
    noise: Callable           # (t, x, dw) -> sigma(t, x) @ dw
    a_apply: Callable | None = None
    diffusion: Callable | None = None
    trace_term: bool = False


def coefficients_for(spec: ModelSpec) -> SDECoefficients:
    if spec.variant == models.EULERIAN:
        return SDECoefficients(
            drift=lambda t, x: models.drift(spec, t, x),
            noise=lambda t, x, dw: models.noise_increment(spec, x, dw),
            diffusion=lambda t, x: models.diffusion(spec, t, x),
            trace_term=True)
    nd = spec.nd
    gi2 = spec.gamma_i ** 2

    def a_apply(r):
        rp = r[..., nd:] * gi2
        return ad.concat([rp * 0.0, rp], axis=-1)

    return SDECoefficients(
        drift=lambda t, x: models.drift(spec, t, x),
        noise=lambda t, x, dw: models.noise_increment(spec, x, dw),
        a_apply=a_apply)


def linear_coefficients(aux: AuxiliaryProcess) -> SDECoefficients:
    """Treat the auxiliary process itself as the model (linear SDEs)."""
    return SDECoefficients(
        drift=lambda t, x: aux.drift(x),
        noise=lambda t, x, dw: ad.bmatvec(aux.sigmatil, dw),
        a_apply=lambda r: ad.bmatvec(aux.atil, r))


def g_integrand(spec: ModelSpec, aux: AuxiliaryProcess, tables: GuidingTables,
                k: int, x):
    """Integrand of log Psi at knot k and state x.

    (b - btil)' rtil - 1/2 tr[(a - atil)(H - rtil rtil')]; the trace part
    is skipped for models whose diffusivity matches the auxiliary exactly.
    """
    coeffs = coefficients_for(spec)
    return _g_eval(coeffs, aux, tables.Hs[k], tables.Fs[k],
                   tables.grid.knots[k], x)


def _g_eval(coeffs, aux, Hk, Fk, t, x):
    r = Fk - ad.bmatvec(Hk, x)
    b = coeffs.drift(t, x)
    btil = ad.bmatvec(aux.Btil, x) + aux.betatil
    g = ad.vdot(b - btil, r)
    if coeffs.trace_term:
        sig = coeffs.diffusion(t, x)
        adiff = ad.matmul(sig, ad.transpose_last2(sig)) - aux.atil
        tr = ad.asum(ad.asum(adiff * Hk, axis=-1), axis=-1)
        quad = ad.vdot(r, ad.bmatvec(adiff, r))
        g = g - 0.5 * (tr - quad)
    return g


def simulate_core(coeffs: SDECoefficients, aux: AuxiliaryProcess,
                  tables: GuidingTables, x0, dw, record_states: bool = True):
    """Euler-Maruyama on the guided SDE with left-point log Psi accumulation.

    ``dw`` has the step axis first: (K, N') or (K, R, N') for R batched
    paths.  ``x0`` may be a plain (possibly batched) state or a Jet; the
    returned log Psi then carries tangents.  Returns (states, x_T, logpsi)
    where states stacks the value lane at every knot (or None).
    """
    knots = tables.grid.knots
    dts = tables.grid.dts
    Fs, Hs = tables.Fs, tables.Hs
    Btil, betatil = aux.Btil, aux.betatil
    drift_f, noise_f, a_apply = coeffs.drift, coeffs.noise, coeffs.a_apply
    trace_term = coeffs.trace_term
    diffusion_f = coeffs.diffusion

    x = x0
    logpsi = 0.0
    states = [ad.value(x0)] if record_states else None
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        for k in range(len(dts)):
            t = knots[k]
            dt = dts[k]
            r = Fs[k] - ad.bmatvec(Hs[k], x)
            b = drift_f(t, x)
            btil = ad.bmatvec(Btil, x) + betatil
            g = ad.vdot(b - btil, r)
            if trace_term:
                sig = diffusion_f(t, x)
                adiff = ad.matmul(sig, ad.transpose_last2(sig)) - aux.atil
                tr = ad.asum(ad.asum(adiff * Hs[k], axis=-1), axis=-1)
                quad = ad.vdot(r, ad.bmatvec(adiff, r))
                g = g - 0.5 * (tr - quad)
                ar = ad.bmatvec(sig, ad.bmatvec(ad.transpose_last2(sig), r))
            else:
                ar = a_apply(r)
            logpsi = logpsi + g * dt
            x = x + (b + ar) * dt + noise_f(t, x, dw[k])
            if record_states:
                states.append(ad.value(x))
    if not (ad.where_finite(x) and ad.where_finite(logpsi)):
        raise NumericalError("guided simulation produced a non-finite state "
                             "(step too coarse or exploding guiding term)")
    if record_states:
        states = np.asarray(states)
    return states, x, logpsi


@dataclass(frozen=True)
class GuidedPath:
    """A realized guided proposal on the grid with its accumulated log Psi."""

    states: np.ndarray   # (K+1, N)
    logpsi: float
    wiener: object       # the WienerPath (or increment array) that drove it


def _increments(W):
    return W.increments if hasattr(W, "increments") else np.asarray(W)


def simulate_guided(spec: ModelSpec, aux: AuxiliaryProcess, tables: GuidingTables,
                    x0: np.ndarray, W) -> GuidedPath:
    """Deterministic map from (x0, W) to a guided path and its log Psi."""
    coeffs = coefficients_for(spec)
    states, _, logpsi = simulate_core(coeffs, aux, tables,
                                      np.asarray(x0, dtype=float), _increments(W))
    return GuidedPath(states=states, logpsi=float(logpsi), wiener=W)


def simulate_guided_generic(coeffs: SDECoefficients, aux: AuxiliaryProcess,
                            tables: GuidingTables, x0: np.ndarray, W) -> GuidedPath:
    """Guided simulation for custom (e.g. linear test) coefficients."""
    states, _, logpsi = simulate_core(coeffs, aux, tables,
                                      np.asarray(x0, dtype=float), _increments(W))
    return GuidedPath(states=states, logpsi=float(logpsi), wiener=W)


def log_likelihood_ratio_terms(path: GuidedPath, tables: GuidingTables, x0):
    """The two tractable likelihood pieces: (log Psi, log rho-tilde at 0).

    The intractable transition-density factor cancels in every acceptance
    ratio and is never computed.
    """
    return path.logpsi, float(log_rho_tilde(tables, 0, np.asarray(x0, dtype=float)))
