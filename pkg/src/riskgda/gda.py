"""Gradient descent-ascent on ``min_u max_zeta mean(zeta (1 - gamma zeta) J(u))``.

One iteration simulates the fixed scenario batch under ``u_n``, differentiates
the per-scenario costs, takes a descent step in ``u`` weighted by
``zeta_n (1 - gamma zeta_n)`` and a projected ascent step in ``zeta``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .cost import CostModel, CostSample, GradientSample, evaluate_cost, gradient_samples
from .risk import RiskLevel, cvar_primal, inner_maximize, project_capped_mean
from .sde import (
    ControlParams,
    NoiseBatch,
    SdeModel,
    TimeGrid,
    sample_noise,
    simulate_paths,
    simulate_variational,
)

log = logging.getLogger(__name__)


class GdaDivergence(RuntimeError):
    def __init__(self, iteration: int, cause: str):
        super().__init__(f"iteration {iteration}: {cause}; try a smaller descent step eta")
        self.iteration = iteration


@dataclass
class GdaConfig:
    eta: float = 0.1
    beta: float = 0.1
    gamma: float = 0.0
    alpha: float = 1.0
    max_iter: int = 200
    tol_step: float = 1e-6
    scenarios: int = 256
    seed: int = 0
    diagnostics_every: int = 1
    inner_tol: float = 1e-10
    k_est: float = 10.0
    resample_every: int = 0
    variational: str = "step"
    sensitivity: str = "fundamental"
    record_wallclock: bool = True

    def __post_init__(self):
        RiskLevel(self.alpha, self.gamma)
        for name in ("eta", "beta", "tol_step", "inner_tol", "k_est"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive, got {value}")
        for name in ("max_iter", "scenarios", "diagnostics_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.variational not in ("step", "ito"):
            raise ValueError(f"variational must be 'step' or 'ito', got {self.variational!r}")
        if self.sensitivity not in ("fundamental", "costate"):
            raise ValueError(f"sensitivity must be 'fundamental' or 'costate', got {self.sensitivity!r}")
        if self.resample_every < 0:
            raise ValueError("resample_every must be >= 0")
        if self.gamma > 0 and 2.0 * self.gamma / self.alpha >= 1.0:
            raise ValueError("need 2 gamma / alpha < 1 so that 1 - 2 gamma zeta stays positive")

    @property
    def level(self) -> RiskLevel:
        return RiskLevel(self.alpha, self.gamma)


@dataclass
class GdaState:
    u: ControlParams
    zeta: np.ndarray
    iteration: int = 0


@dataclass
class TelemetryRow:
    iter: int
    cost_mean: float
    cvar_alpha: float
    phi_gamma: float
    grad_norm: float
    step_norm_u: float
    step_norm_zeta: float
    zeta_gap: float
    h_value: float
    wallclock_ms: float


TELEMETRY_COLUMNS = [f.name for f in fields(TelemetryRow)]


@dataclass
class GdaResult:
    u: ControlParams
    best_iteration: int
    state: GdaState
    telemetry: list[TelemetryRow] = field(default_factory=list)
    converged: bool = False

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.telemetry])


def gda_step(state: GdaState, grads: GradientSample, costs: CostSample, cfg: GdaConfig) -> GdaState:
    """One simultaneous update of ``(u, zeta)``; ``gamma = 0`` gives the unmodified rule."""
    zeta = state.zeta
    J = costs.total
    w = zeta * (1.0 - cfg.gamma * zeta)
    M = zeta.size
    with np.errstate(over="ignore", invalid="ignore"):
        v = state.u.v - cfg.eta * (np.tensordot(w, grads.gv, axes=1) / M)
        lam = state.u.lam - cfg.eta * (np.tensordot(w, grads.glam, axes=1) / M)
        ascent = zeta + cfg.beta * (1.0 - 2.0 * cfg.gamma * zeta) * J
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(lam)) and np.all(np.isfinite(ascent))):
        raise GdaDivergence(state.iteration, "non-finite update")
    zeta_next = project_capped_mean(ascent, cfg.alpha)
    return GdaState(u=ControlParams(v, lam), zeta=zeta_next, iteration=state.iteration + 1)


def stationarity_residual(zeta: np.ndarray, grads: GradientSample, dt: float) -> float:
    """``| E[zeta grad J] |_U``."""
    return grads.weighted_mean(zeta).norm(dt)


def rms(a: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(a))))


def h_diagnostic(zeta: np.ndarray, samples: np.ndarray, level: RiskLevel, k_est: float, inner_tol: float = 1e-10) -> float:
    """``Phi_gamma(u) + (1 - 1/(4 K^2)) |zeta - zeta_u|^2`` with the mean-square norm."""
    zeta_u, phi = inner_maximize(samples, level, tol=inner_tol)
    return phi + (1.0 - 1.0 / (4.0 * k_est**2)) * rms(zeta - zeta_u) ** 2


@dataclass
class _Evaluation:
    costs: CostSample
    grads: GradientSample


def evaluate(model: SdeModel, cm: CostModel, u: ControlParams, x0, grid: TimeGrid, noise: NoiseBatch,
             variational: str = "step", sensitivity: str = "fundamental") -> _Evaluation:
    path = simulate_paths(model, u, x0, grid, noise)
    # The costate route never multiplies by Psi, so its conditioning is irrelevant there.
    var = simulate_variational(model, u, path, grid, noise, inverse=variational,
                               check=sensitivity == "fundamental")
    costs = evaluate_cost(cm, u, path, grid)
    grads = gradient_samples(cm, model, u, path, var, grid, method=sensitivity)
    return _Evaluation(costs, grads)


def run_gda(
    model: SdeModel,
    cm: CostModel,
    cfg: GdaConfig,
    x0,
    grid: TimeGrid,
    u_init: ControlParams | None = None,
    noise: NoiseBatch | None = None,
) -> GdaResult:
    """Iterate simulate -> differentiate -> step until the step norm stalls.

    Stops when ``|u_{n+1} - u_n|_U / eta <= tol_step`` or after ``max_iter``
    iterations. Returns the iterate with the best ``Phi_gamma`` (the empirical
    CV@R when ``gamma = 0``) together with one telemetry row per iteration.
    """
    if u_init is None:
        u_init = ControlParams.zeros(grid.steps, model.m, model.m * model.n)
    if noise is None:
        noise = sample_noise(grid, cfg.scenarios, cfg.seed, model.d)
    level = cfg.level
    dt = grid.dt
    state = GdaState(u=u_init.copy(), zeta=np.ones(noise.scenarios))
    result = GdaResult(u=state.u, best_iteration=0, state=state)
    best_phi = np.inf
    phi = gap = h = np.nan
    converged = False
    for n in range(cfg.max_iter):
        start = time.perf_counter()
        if cfg.resample_every and n and n % cfg.resample_every == 0:
            noise = sample_noise(grid, cfg.scenarios, cfg.seed + n, model.d)
        try:
            ev = evaluate(model, cm, state.u, x0, grid, noise, cfg.variational, cfg.sensitivity)
        except (ArithmeticError, RuntimeError, ValueError) as exc:
            raise GdaDivergence(n, str(exc)) from exc
        J = ev.costs.total
        if n % cfg.diagnostics_every == 0:
            zeta_u, phi = inner_maximize(J, level, tol=cfg.inner_tol)
            gap = rms(state.zeta - zeta_u)
            h = phi + (1.0 - 1.0 / (4.0 * cfg.k_est**2)) * gap**2
        if phi < best_phi:
            best_phi = phi
            result.u, result.best_iteration = state.u, n
        residual = stationarity_residual(state.zeta, ev.grads, dt)
        nxt = gda_step(state, ev.grads, ev.costs, cfg)
        step_u = (nxt.u.axpy(-1.0, state.u)).norm(dt)
        elapsed = (time.perf_counter() - start) * 1e3 if cfg.record_wallclock else 0.0
        result.telemetry.append(
            TelemetryRow(
                iter=n,
                cost_mean=float(np.mean(J)),
                cvar_alpha=cvar_primal(J, cfg.alpha),
                phi_gamma=float(phi),
                grad_norm=residual,
                step_norm_u=step_u,
                step_norm_zeta=rms(nxt.zeta - state.zeta),
                zeta_gap=float(gap),
                h_value=float(h),
                wallclock_ms=elapsed,
            )
        )
        state = nxt
        if step_u / cfg.eta <= cfg.tol_step:
            converged = True
            break
    log.info("gda finished after %d iterations (converged=%s)", len(result.telemetry), converged)
    result.state = state
    result.converged = converged
    return result
