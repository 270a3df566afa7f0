"""MCMC for landmark matching and template estimation.

The Gibbs sampler updates, in turn, the driving Wiener increments (pCN
moves), the initial momenta (MALA), the kernel parameter (log-normal
random walk), and in template mode the latent template configuration
(Riemannian-manifold MALA preconditioned by the kernel Gram matrix).
Updating the increments instead of the paths keeps the scheme valid when
parameters enter the diffusion coefficient.

Gradients for the Langevin-type proposals differentiate the entire guided
simulation map in forward mode (see :mod:`bridgemark.ad`); finite
differences are kept as a test oracle only.  The intractable transition
density cancels in every acceptance ratio and is never evaluated.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from . import ad, models, rng as rngmod
from .config import RunConfig
from .errors import ConfigError, NumericalError
from .geometry import KernelParams, gram_cholesky, min_pairwise_distance, MIN_SEPARATION_FACTOR
from .guiding import (GuidingTables, TimeGrid, coefficients_for, log_rho_tilde,
                      make_grid, position_observation, simulate_core, solve_backward)
from .models import ModelSpec


@dataclass
class WienerPath:
    """Increments dW_k ~ N(0, dt_k I) on the grid intervals."""

    increments: np.ndarray  # (K, N')


def sample_wiener(rng, grid: TimeGrid, nprime: int) -> WienerPath:
    incs = rng.standard_normal((grid.K, nprime)) * np.sqrt(grid.dts)[:, None]
    return WienerPath(increments=incs)


def pcn_blend(W: WienerPath, Z: WienerPath, eta: float) -> WienerPath:
    """Autocorrelated Gaussian proposal preserving the Wiener prior."""
    return WienerPath(increments=eta * W.increments
                      + math.sqrt(1.0 - eta * eta) * Z.increments)


@dataclass(frozen=True)
class Priors:
    """Pareto prior on the kernel scale plus Gaussian state priors."""

    pareto_s: float = 0.1
    pareto_smin: float = 0.1
    kappa_mom: float = 100.0
    kappa_pos: float = 100.0

    def log_pareto(self, a: float) -> float:
        if a < self.pareto_smin:
            return -np.inf
        return math.log(self.pareto_s) - 2.0 * math.log(a)

    def log_position(self, q0: np.ndarray) -> float:
        n = q0.size
        return -0.5 * (float(q0 @ q0) / self.kappa_pos
                       + n * math.log(2.0 * math.pi * self.kappa_pos))


@dataclass(frozen=True)
class MomentumPrior:
    """p0 ~ N(0, kappa * K(q0)^{-1}) with the Gram factor precomputed.

    The Gram kernel is pinned to the configured initial scale a0 so the
    prior does not move with the sampled kernel parameter; this keeps the
    momentum and parameter updates targeting one joint posterior.
    """

    chol: np.ndarray  # lower Cholesky factor of K(q0)
    kappa: float

    @classmethod
    def build(cls, kernel: KernelParams, q0_points: np.ndarray, kappa: float):
        return cls(chol=gram_cholesky(kernel, q0_points), kappa=kappa)

    def logpdf(self, p0: np.ndarray) -> float:
        quad = float(np.sum((self.chol.T @ p0) ** 2)) / self.kappa
        n = p0.size
        logdet_k = 2.0 * float(np.sum(np.log(np.diag(self.chol))))
        return -0.5 * (quad + n * math.log(2.0 * math.pi * self.kappa) - logdet_k)


@dataclass(frozen=True)
class BridgeProblem:
    """Per-shape immutable bundle: model, auxiliary, backward tables."""

    spec: ModelSpec
    aux: models.AuxiliaryProcess
    tables: GuidingTables
    vT: np.ndarray  # observed terminal positions (nd,)


def build_problem(spec: ModelSpec, vT, eps: float, grid: TimeGrid) -> BridgeProblem:
    vT = np.asarray(vT, dtype=float).reshape(-1)
    aux = models.auxiliary_for(spec, vT)
    obs = position_observation(spec.n, spec.d, vT, eps)
    tables = solve_backward(aux, obs, grid)
    return BridgeProblem(spec=spec, aux=aux, tables=tables, vT=vT)


class BridgeEnsemble:
    """Owns the per-shape problems and rebuilds them when theta changes."""

    def __init__(self, spec: ModelSpec, vTs: list[np.ndarray], eps: float,
                 grid: TimeGrid, auto_fields: bool = False):
        self.base_spec = spec
        self.vTs = [np.asarray(v, dtype=float).reshape(-1) for v in vTs]
        self.eps = eps
        self.grid = grid
        self.spec = spec
        self.problems = [build_problem(spec, v, eps, grid) for v in self.vTs]

    @property
    def n_shapes(self) -> int:
        return len(self.problems)

    def rebuilt(self, theta: float) -> tuple[ModelSpec, list[BridgeProblem]]:
        spec = self.base_spec.with_kernel_scale(theta)
        return spec, [build_problem(spec, v, self.eps, self.grid) for v in self.vTs]

    def adopt(self, spec: ModelSpec, problems: list[BridgeProblem]) -> None:
        self.spec = spec
        self.problems = problems


@dataclass
class ChainState:
    """Mutable sampler state with cached paths and log-likelihood pieces."""

    theta: float
    q0: np.ndarray
    p0: np.ndarray
    wieners: list[WienerPath]
    paths: list[np.ndarray] = field(default_factory=list)
    logpsis: list[float] = field(default_factory=list)
    logrho0s: list[float] = field(default_factory=list)
    grad_p0: np.ndarray | None = None
    grad_q0: np.ndarray | None = None
    counters: dict = field(default_factory=dict)

    @property
    def x0(self) -> np.ndarray:
        return np.concatenate([self.q0, self.p0])

    def count(self, move: str, accepted: bool) -> None:
        prop, acc = self.counters.get(move, (0, 0))
        self.counters[move] = (prop + 1, acc + int(accepted))

    def acceptance_rates(self) -> dict:
        return {move: (acc / prop if prop else 0.0)
                for move, (prop, acc) in self.counters.items()}

    def invalidate_gradients(self) -> None:
        self.grad_p0 = None
        self.grad_q0 = None

    def total_logpsi(self) -> float:
        return float(sum(self.logpsis))


def _simulate_shape(problem: BridgeProblem, x0, W: WienerPath):
    """One guided path plus its two likelihood pieces; x0 may be a Jet."""
    coeffs = coefficients_for(problem.spec)
    states, _, logpsi = simulate_core(coeffs, problem.aux, problem.tables,
                                      x0, W.increments)
    logrho0 = log_rho_tilde(problem.tables, 0, x0)
    return states, logpsi, logrho0


def initialize_chain(ensemble: BridgeEnsemble, q0, p0, theta: float,
                     seed: int) -> ChainState:
    q0 = np.asarray(q0, dtype=float).reshape(-1)
    p0 = np.asarray(p0, dtype=float).reshape(-1)
    nprime = models.wiener_dim(ensemble.spec)
    wieners, paths, logpsis, logrho0s = [], [], [], []
    x0 = np.concatenate([q0, p0])
    for i in range(ensemble.n_shapes):
        W = sample_wiener(rngmod.substream(seed, "winit", i), ensemble.grid, nprime)
        states, logpsi, logrho0 = _simulate_shape(ensemble.problems[i], x0, W)
        wieners.append(W)
        paths.append(states)
        logpsis.append(float(logpsi))
        logrho0s.append(float(logrho0))
    return ChainState(theta=theta, q0=q0, p0=p0, wieners=wieners, paths=paths,
                      logpsis=logpsis, logrho0s=logrho0s)


# -- Wiener increment update (pCN) ----------------------------------------

def _bridge_move(state: ChainState, ensemble: BridgeEnsemble, i: int,
                 eta: float, rng) -> bool:
    """Propose W' = eta W + sqrt(1-eta^2) Z for shape i; accept on Psi ratio.

    Commits only to the slots of shape i, so moves for distinct shapes may
    run concurrently; all randomness (proposal and acceptance) comes from
    the supplied stream.  A diverged proposal counts as a rejection.
    """
    problem = ensemble.problems[i]
    nprime = models.wiener_dim(problem.spec)
    Z = sample_wiener(rng, ensemble.grid, nprime)
    Wnew = pcn_blend(state.wieners[i], Z, eta)
    try:
        states, logpsi, _ = _simulate_shape(problem, state.x0, Wnew)
    except NumericalError:
        return False
    log_a = float(logpsi) - state.logpsis[i]
    if math.log(rng.uniform()) < log_a:
        state.wieners[i] = Wnew
        state.paths[i] = states
        state.logpsis[i] = float(logpsi)
        return True
    return False


def update_bridge_pcn(state: ChainState, ensemble: BridgeEnsemble, i: int,
                      eta: float, rng) -> bool:
    accepted = _bridge_move(state, ensemble, i, eta, rng)
    if accepted:
        state.invalidate_gradients()
    state.count("bridge_pcn", accepted)
    return accepted


# -- initial-momenta update (MALA) -----------------------------------------

def momenta_target_grad(ensemble: BridgeEnsemble, state: ChainState, p0):
    """Values and p0-gradient of sum_i [log Psi_i + log rho-tilde_i(0, x0)].

    Differentiates the full simulation map in forward mode; the value lane
    reproduces a plain simulation bitwise.
    """
    m = p0.size
    x0 = ad.concat([ad.const(state.q0, m), ad.seed(p0)])
    grad = np.zeros(m)
    paths, logpsis, logrho0s = [], [], []
    for i, problem in enumerate(ensemble.problems):
        states, logpsi, logrho0 = _simulate_shape(problem, x0, state.wieners[i])
        total = logpsi + logrho0
        grad = grad + total.tan
        paths.append(states)
        logpsis.append(float(ad.value(logpsi)))
        logrho0s.append(float(ad.value(logrho0)))
    return paths, logpsis, logrho0s, grad


def update_momenta_mala(state: ChainState, ensemble: BridgeEnsemble,
                        delta: float, mom_prior: MomentumPrior, rng) -> bool:
    """Langevin proposal on p0 with exact simulation-map gradients."""
    dn = state.p0.size
    if state.grad_p0 is None:
        paths, logpsis, logrho0s, grad = momenta_target_grad(ensemble, state, state.p0)
        state.paths, state.logpsis, state.logrho0s = paths, logpsis, logrho0s
        state.grad_p0 = grad
    grad = state.grad_p0
    z = rng.standard_normal(dn)
    p0_new = state.p0 + 0.5 * delta * grad + math.sqrt(delta) * z
    accepted = False
    try:
        paths_n, logpsis_n, logrho0s_n, grad_n = momenta_target_grad(
            ensemble, state, p0_new)
    except NumericalError:
        state.count("momenta_mala", False)
        return False
    if not np.all(np.isfinite(grad_n)):
        state.count("momenta_mala", False)
        return False

    def logq(y, x, g):
        resid = y - x - 0.5 * delta * g
        return -float(resid @ resid) / (2.0 * delta)

    log_a = (sum(logpsis_n) + sum(logrho0s_n) + mom_prior.logpdf(p0_new)
             - sum(state.logpsis) - sum(state.logrho0s) - mom_prior.logpdf(state.p0)
             + logq(state.p0, p0_new, grad_n) - logq(p0_new, state.p0, grad))
    if math.log(rng.uniform()) < log_a:
        state.p0 = p0_new
        state.paths, state.logpsis, state.logrho0s = paths_n, logpsis_n, logrho0s_n
        state.grad_p0 = grad_n
        state.grad_q0 = None
        accepted = True
    state.count("momenta_mala", accepted)
    return accepted


# -- kernel-parameter update -----------------------------------------------

def update_theta(state: ChainState, ensemble: BridgeEnsemble, sigma_theta: float,
                 priors: Priors, rng) -> bool:
    """Log-normal random-walk on theta with full table rebuild.

    The proposal-density correction q(th|th')/q(th'|th) equals th'/th.
    Log-likelihood contributions from all shapes are added.
    """
    theta_new = math.exp(math.log(state.theta) + sigma_theta * rng.standard_normal())
    log_u = math.log(rng.uniform())
    if theta_new < priors.pareto_smin:
        state.count("theta", False)
        return False
    try:
        spec_new, problems_new = ensemble.rebuilt(theta_new)
    except (NumericalError, ValueError):
        state.count("theta", False)
        return False
    x0 = state.x0
    paths_n, logpsis_n, logrho0s_n = [], [], []
    try:
        for i, problem in enumerate(problems_new):
            states, logpsi, logrho0 = _simulate_shape(problem, x0, state.wieners[i])
            paths_n.append(states)
            logpsis_n.append(float(logpsi))
            logrho0s_n.append(float(logrho0))
    except NumericalError:
        state.count("theta", False)
        return False
    log_a = (sum(logpsis_n) + sum(logrho0s_n) + priors.log_pareto(theta_new)
             - sum(state.logpsis) - sum(state.logrho0s) - priors.log_pareto(state.theta)
             + math.log(theta_new) - math.log(state.theta))
    accepted = False
    if log_u < log_a:
        ensemble.adopt(spec_new, problems_new)
        state.theta = theta_new
        state.paths, state.logpsis, state.logrho0s = paths_n, logpsis_n, logrho0s_n
        state.invalidate_gradients()
        accepted = True
    state.count("theta", accepted)
    return accepted


# -- template update (RMMALA) ----------------------------------------------

def template_target_grad(ensemble: BridgeEnsemble, state: ChainState, q0):
    """Values and q0-gradient of sum_i [log Psi_i + log rho-tilde_i(0, x0)]."""
    m = q0.size
    x0 = ad.concat([ad.seed(q0), ad.const(state.p0, m)])
    grad = np.zeros(m)
    paths, logpsis, logrho0s = [], [], []
    for i, problem in enumerate(ensemble.problems):
        states, logpsi, logrho0 = _simulate_shape(problem, x0, state.wieners[i])
        total = logpsi + logrho0
        grad = grad + total.tan
        paths.append(states)
        logpsis.append(float(ad.value(logpsi)))
        logrho0s.append(float(ad.value(logrho0)))
    return paths, logpsis, logrho0s, grad


def _rmmala_logq(y, x, grad_x, chol_x, delta):
    """log q(y | x) for the proposal N(x + delta/2 K(x) grad, delta K(x))."""
    K_grad = chol_x @ (chol_x.T @ grad_x)
    resid = y - x - 0.5 * delta * K_grad
    w = solve_triangular(chol_x, resid, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol_x))))
    n = y.size
    return -0.5 * (float(w @ w) / delta + n * math.log(delta) + logdet)


def update_template_rmmala(state: ChainState, ensemble: BridgeEnsemble,
                           delta: float, priors: Priors, rng,
                           gram_jitter: float = 0.0) -> bool:
    """Kernel-preconditioned Langevin move on the latent template q0."""
    spec = ensemble.spec
    dn = state.q0.size
    try:
        chol = gram_cholesky(spec.kernel, state.q0.reshape(spec.n, spec.d),
                             jitter=gram_jitter)
    except NumericalError:
        state.count("template_rmmala", False)
        return False
    if state.grad_q0 is None:
        paths, logpsis, logrho0s, grad = template_target_grad(ensemble, state, state.q0)
        state.paths, state.logpsis, state.logrho0s = paths, logpsis, logrho0s
        state.grad_q0 = grad
    grad = state.grad_q0
    z = rng.standard_normal(dn)
    q0_new = (state.q0 + 0.5 * delta * (chol @ (chol.T @ grad))
              + math.sqrt(delta) * (chol @ z))
    accepted = False
    if (min_pairwise_distance(q0_new.reshape(spec.n, spec.d))
            < MIN_SEPARATION_FACTOR * spec.kernel.a):
        state.count("template_rmmala", False)
        return False
    try:
        chol_new = gram_cholesky(spec.kernel, q0_new.reshape(spec.n, spec.d),
                                 jitter=gram_jitter)
    except NumericalError:
        state.count("template_rmmala", False)
        return False
    saved_q0 = state.q0
    try:
        state.q0 = q0_new
        paths_n, logpsis_n, logrho0s_n, grad_n = template_target_grad(
            ensemble, state, q0_new)
    except NumericalError:
        state.q0 = saved_q0
        state.count("template_rmmala", False)
        return False
    finally:
        state.q0 = saved_q0
    if not np.all(np.isfinite(grad_n)):
        state.count("template_rmmala", False)
        return False
    log_a = (sum(logpsis_n) + sum(logrho0s_n) + priors.log_position(q0_new)
             - sum(state.logpsis) - sum(state.logrho0s)
             - priors.log_position(state.q0)
             + _rmmala_logq(state.q0, q0_new, grad_n, chol_new, delta)
             - _rmmala_logq(q0_new, state.q0, grad, chol, delta))
    if math.log(rng.uniform()) < log_a:
        state.q0 = q0_new
        state.paths, state.logpsis, state.logrho0s = paths_n, logpsis_n, logrho0s_n
        state.grad_q0 = grad_n
        state.grad_p0 = None
        accepted = True
    state.count("template_rmmala", accepted)
    return accepted


# -- drivers -----------------------------------------------------------------

@dataclass
class ChainRecord:
    """Traces a driver collects for file emission and figures."""

    knots: np.ndarray
    saved_iters: list = field(default_factory=list)
    saved_paths: list = field(default_factory=list)      # full states (K+1, 2nd)
    momenta_iters: list = field(default_factory=list)
    momenta0: list = field(default_factory=list)
    momentaT: list = field(default_factory=list)
    template_iters: list = field(default_factory=list)
    templates: list = field(default_factory=list)
    theta_trace: list = field(default_factory=list)      # (iter, theta, logpsi)
    acceptance: dict = field(default_factory=dict)
    tuning: dict = field(default_factory=dict)


def _spec_from_config(cfg: RunConfig, n: int, d: int,
                      field_points: np.ndarray | None = None) -> ModelSpec:
    kernel = KernelParams(a=cfg.a0, c=cfg.c)
    if cfg.model == "lagrangian":
        return models.lagrangian(n, d, kernel, gamma=cfg.gamma)
    if cfg.model == "langevin":
        return models.langevin(n, d, kernel, gamma=cfg.gamma, lam=cfg.lam)
    if cfg.noise_centers is not None:
        centers = np.asarray(cfg.noise_centers, dtype=float).reshape(-1, d)
        grid = models.NoiseFieldGrid(centers=centers, tau=cfg.tau,
                                     gamma=cfg.gamma * np.ones(d))
    else:
        if field_points is None:
            raise ConfigError("auto noise-field grid needs observed points")
        grid = models.auto_grid(field_points, cfg.tau, cfg.gamma)
    return models.eulerian(n, d, kernel, grid)


class _Adapter:
    """Optional step-size adaptation during the first 20% of iterations."""

    def __init__(self, cfg: RunConfig, total: int):
        self.enabled = cfg.adapt
        self.horizon = int(0.2 * total)
        self.window = 50
        self.delta_mala = cfg.delta_mala
        self.delta_rmmala = cfg.delta_rmmala
        self.sigma_theta = cfg.sigma_theta
        self._marks = {}

    def maybe_adapt(self, it: int, state: ChainState) -> None:
        if not self.enabled or it > self.horizon or it % self.window:
            return
        for move, attr in (("momenta_mala", "delta_mala"),
                           ("template_rmmala", "delta_rmmala"),
                           ("theta", "sigma_theta")):
            prop, acc = state.counters.get(move, (0, 0))
            p0, a0 = self._marks.get(move, (0, 0))
            recent_prop, recent_acc = prop - p0, acc - a0
            self._marks[move] = (prop, acc)
            if recent_prop == 0:
                continue
            rate = recent_acc / recent_prop
            if rate > 0.6:
                setattr(self, attr, getattr(self, attr) * 1.3)
            elif rate < 0.4:
                setattr(self, attr, getattr(self, attr) / 1.3)


def run_matching(cfg: RunConfig, v0, vT, d: int = 1) -> tuple[ChainState, ChainRecord]:
    """Bridge two observed configurations: pCN + MALA (+ theta) sweeps.

    The time-0 observation noise is taken as negligible, so q0 is pinned
    to v0 and the momenta carry all initial-state uncertainty.
    """
    v0 = np.asarray(v0, dtype=float).reshape(-1)
    vT = np.asarray(vT, dtype=float).reshape(-1)
    if v0.shape != vT.shape:
        raise ConfigError("v0 and vT must have matching landmark layouts")
    if v0.size % d:
        raise ConfigError(f"shape size {v0.size} is not divisible by d={d}")
    n = v0.size // d
    spec = _spec_from_config(cfg, n, d,
                             field_points=np.vstack([v0.reshape(n, d), vT.reshape(n, d)]))
    grid = make_grid(cfg.T, cfg.grid_mesh)
    ensemble = BridgeEnsemble(spec, [vT], cfg.eps, grid)
    state = initialize_chain(ensemble, q0=v0, p0=np.zeros(n * d),
                             theta=cfg.a0, seed=cfg.seed)
    priors = Priors(pareto_s=cfg.pareto_s, pareto_smin=cfg.pareto_smin,
                    kappa_mom=cfg.kappa_mom, kappa_pos=cfg.kappa_pos)
    mom_prior = MomentumPrior.build(KernelParams(a=cfg.a0, c=cfg.c),
                                    v0.reshape(n, d), cfg.kappa_mom)
    record = ChainRecord(knots=grid.knots.copy())
    adapter = _Adapter(cfg, cfg.iterations)
    for it in range(1, cfg.iterations + 1):
        update_bridge_pcn(state, ensemble, 0, cfg.eta,
                          rngmod.substream(cfg.seed, "pcn", 0, it))
        update_momenta_mala(state, ensemble, adapter.delta_mala, mom_prior,
                            rngmod.substream(cfg.seed, "mala", it))
        if not cfg.fix_theta:
            update_theta(state, ensemble, adapter.sigma_theta, priors,
                         rngmod.substream(cfg.seed, "theta", it))
        adapter.maybe_adapt(it, state)
        record.momenta_iters.append(it)
        record.momenta0.append(state.p0.copy())
        record.momentaT.append(state.paths[0][-1, n * d:].copy())
        record.theta_trace.append((it, state.theta, state.total_logpsi()))
        if it % cfg.save_every == 0:
            record.saved_iters.append(it)
            record.saved_paths.append(state.paths[0].copy())
    record.acceptance = dict(state.counters)
    record.tuning = {"delta_mala": adapter.delta_mala,
                     "sigma_theta": adapter.sigma_theta}
    return state, record


def run_template(cfg: RunConfig, shapes: list[np.ndarray], d: int,
                 q0_init: np.ndarray | None = None) -> tuple[ChainState, ChainRecord]:
    """Estimate a template from I observed shapes (momenta pinned to zero).

    Per sweep: one pCN move per shape (independently, optionally on a
    thread pool with per-(shape, sweep) random substreams), one theta move
    with summed log-likelihoods, one RMMALA template move.
    """
    if len(shapes) == 0:
        raise ConfigError("template estimation needs at least one shape")
    shapes = [np.asarray(s, dtype=float).reshape(-1) for s in shapes]
    sizes = {s.size for s in shapes}
    if len(sizes) != 1:
        raise ConfigError("all shapes must share the same landmark layout")
    nd = shapes[0].size
    if nd % d:
        raise ConfigError(f"shape size {nd} is not divisible by d={d}")
    n = nd // d
    if q0_init is None:
        q0_init = template_initializer(cfg, shapes, n, d)
    spec = _spec_from_config(cfg, n, d,
                             field_points=np.vstack([s.reshape(n, d) for s in shapes]))
    grid = make_grid(cfg.T, cfg.grid_mesh)
    ensemble = BridgeEnsemble(spec, shapes, cfg.eps, grid)
    state = initialize_chain(ensemble, q0=q0_init, p0=np.zeros(nd),
                             theta=cfg.a0, seed=cfg.seed)
    priors = Priors(pareto_s=cfg.pareto_s, pareto_smin=cfg.pareto_smin,
                    kappa_mom=cfg.kappa_mom, kappa_pos=cfg.kappa_pos)
    record = ChainRecord(knots=grid.knots.copy())
    adapter = _Adapter(cfg, cfg.iterations)
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for it in range(1, cfg.iterations + 1):
            _sweep_bridges(state, ensemble, cfg, it, pool)
            if not cfg.fix_theta:
                update_theta(state, ensemble, adapter.sigma_theta, priors,
                             rngmod.substream(cfg.seed, "theta", it))
            update_template_rmmala(state, ensemble, adapter.delta_rmmala, priors,
                                   rngmod.substream(cfg.seed, "template", it))
            adapter.maybe_adapt(it, state)
            record.theta_trace.append((it, state.theta, state.total_logpsi()))
            if it % cfg.save_every == 0:
                record.template_iters.append(it)
                record.templates.append(state.q0.copy())
    finally:
        if pool is not None:
            pool.shutdown()
    record.acceptance = dict(state.counters)
    record.tuning = {"delta_rmmala": adapter.delta_rmmala,
                     "sigma_theta": adapter.sigma_theta}
    return state, record


def _sweep_bridges(state: ChainState, ensemble: BridgeEnsemble, cfg: RunConfig,
                   it: int, pool) -> None:
    """Independent pCN updates for every shape.

    Each shape draws from its own (shape, sweep) substream and commits to
    its own state slots, so results are identical no matter how the pool
    schedules them; counters and gradient invalidation happen serially.
    """
    def one(i: int) -> bool:
        return _bridge_move(state, ensemble, i, cfg.eta,
                            rngmod.substream(cfg.seed, "pcn", i, it))

    indices = range(ensemble.n_shapes)
    results = list(pool.map(one, indices)) if pool is not None else [one(i) for i in indices]
    for accepted in results:
        state.count("bridge_pcn", accepted)
    if any(results):
        state.invalidate_gradients()


def template_initializer(cfg: RunConfig, shapes: list[np.ndarray], n: int, d: int):
    """Template start: an observed shape, optionally rotated and stretched."""
    init = cfg.template_init or {}
    idx = int(init.get("shape_index", 0))
    if not 0 <= idx < len(shapes):
        raise ConfigError(f"template_init.shape_index {idx} out of range")
    pts = shapes[idx].reshape(n, d).copy()
    rot = float(init.get("rotate_deg", 0.0))
    stretch = float(init.get("stretch", 1.0))
    if rot and d == 2:
        ang = math.radians(rot)
        R = np.array([[math.cos(ang), -math.sin(ang)],
                      [math.sin(ang), math.cos(ang)]])
        center = pts.mean(axis=0)
        pts = (pts - center) @ R.T + center
    if stretch != 1.0:
        center = pts.mean(axis=0)
        pts = center + (pts - center) * np.asarray(init.get("stretch_axes",
                                                            [stretch] + [1.0] * (d - 1)))
    return pts.reshape(-1)
