"""Benchmark problems: scalar LQ, steering vehicle, planar free-flyer.

Each builder returns a :class:`Benchmark` bundling the SDE model, the cost,
the grid, the initial state and the deterministic reference trajectory the
cost tracks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .cost import CostModel
from .sde import ControlParams, SdeModel, StatePath, TimeGrid, simulate_paths, zero_noise

KINDS = ("lq", "steering", "freeflyer")


@dataclass(frozen=True)
class ObstacleSet:
    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    radii: np.ndarray = field(default_factory=lambda: np.zeros(0))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    inflation: float = 0.0

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=float).reshape(-1, 2)
        radii = np.asarray(self.radii, dtype=float).ravel()
        weights = np.asarray(self.weights, dtype=float).ravel()
        if weights.size == 0 and radii.size:
            weights = np.ones_like(radii)
        if not (len(centers) == radii.size == weights.size):
            raise ValueError("obstacle centers, radii and weights differ in length")
        if np.any(radii <= 0) or np.any(weights < 0) or self.inflation < 0:
            raise ValueError("obstacle radii must be > 0, weights and inflation >= 0")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "weights", weights)

    def __len__(self):
        return self.radii.size

    @property
    def effective_radii(self) -> np.ndarray:
        return self.radii * (1.0 + self.inflation)

    def inflated(self, inflation: float) -> "ObstacleSet":
        return replace(self, inflation=inflation)


def obstacle_penalty(p, obs: ObstacleSet):
    """Smooth potential ``sum_j w_j max(0, 1 - |p - c_j|^2 / r_j^2)^2`` and its gradient.

    ``p`` is a position (2,) or a batch (..., 2).
    """
    p = np.asarray(p, dtype=float)
    value = np.zeros(p.shape[:-1])
    grad = np.zeros(p.shape)
    for c, r, w in zip(obs.centers, obs.effective_radii, obs.weights):
        diff = p - c
        s = np.sum(diff * diff, axis=-1) / r**2
        hinge = np.maximum(0.0, 1.0 - s)
        value += w * hinge**2
        grad += (-4.0 * w * hinge / r**2)[..., None] * diff
    return value, grad


def collision_fraction(paths: StatePath | np.ndarray, obs: ObstacleSet, inflation: float = 0.0, position=(0, 1)) -> float:
    """Fraction of scenarios whose sampled positions enter any obstacle inflated by ``inflation``."""
    X = paths.X if isinstance(paths, StatePath) else np.asarray(paths)
    if len(obs) == 0:
        return 0.0
    pos = X[..., list(position)]
    hit = np.zeros(X.shape[0], dtype=bool)
    for c, r in zip(obs.centers, obs.radii * (1.0 + inflation)):
        dist2 = np.sum((pos - c) ** 2, axis=-1)
        hit |= np.any(dist2 <= r**2, axis=1)
    return float(np.count_nonzero(hit)) / X.shape[0]


@dataclass(frozen=True)
class BenchmarkSpec:
    """Physical and cost parameters of one benchmark instance."""

    kind: str
    horizon: float = 1.0
    steps: int = 200
    x0: tuple = (0.0,)
    speed: float = 1.0
    accel: float = 0.0
    sigma: float = 0.1
    sigma_pos: float = 0.0
    sigma_theta: float = 0.0
    sigma_v: float = 0.0
    target: float = 1.0
    obstacles: ObstacleSet = field(default_factory=ObstacleSet)
    w_track: float = 1.0
    w_terminal: float = 1.0
    track_weights: tuple = ()
    control_weight: float = 1.0
    w_obs: float = 0.0
    feedback: bool = True
    energy: str = "running"
    ref_gain: float = 0.0
    ref_start: float = 0.0
    ref_duration: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown system kind {self.kind!r}; expected one of {KINDS}")
        for name in ("horizon", "speed"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("sigma", "sigma_pos", "sigma_theta", "sigma_v", "w_track", "w_terminal",
                     "control_weight", "w_obs", "ref_start", "ref_duration"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.energy not in ("running", "parameters"):
            raise ValueError(f"energy must be 'running' or 'parameters', got {self.energy!r}")
        n = {"lq": 1, "steering": 3, "freeflyer": 4}[self.kind]
        if len(self.x0) != n:
            raise ValueError(f"{self.kind} needs an initial state of length {n}, got {len(self.x0)}")
        if self.track_weights and len(self.track_weights) != n:
            raise ValueError(f"track_weights needs {n} entries")

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.horizon, self.steps)

    @property
    def state_weights(self) -> np.ndarray:
        n = len(self.x0)
        return np.asarray(self.track_weights, dtype=float) if self.track_weights else np.ones(n)


class ScalarIntegrator(SdeModel):
    """``dX = u dt + sigma dW``."""

    n, m, d = 1, 1, 1
    control_affine = True
    state_dependent_noise = False

    def __init__(self, sigma: float):
        self.sigma = sigma

    def drift(self, t, x, u):
        return u.copy()

    def drift_jacobians(self, t, x, u):
        M = x.shape[0]
        return np.zeros((M, 1, 1)), np.ones((M, 1, 1))

    def diffusion(self, t, x):
        return np.full((x.shape[0], 1, 1), self.sigma)

    def diffusion_jacobian(self, t, x):
        return np.zeros((x.shape[0], 1, 1, 1))


class SteeringModel(SdeModel):
    """Unicycle at constant speed: ``b = (V cos th, V sin th, u)``, constant diffusion."""

    n, m, d = 3, 1, 1
    state_dependent_noise = False

    def __init__(self, speed: float, sigma_pos: float, sigma_theta: float):
        self.speed = speed
        self.column = np.array([sigma_pos, sigma_pos, sigma_theta])

    def drift(self, t, x, u):
        th = x[:, 2]
        return np.stack([self.speed * np.cos(th), self.speed * np.sin(th), u[:, 0]], axis=1)

    def drift_jacobians(self, t, x, u):
        M = x.shape[0]
        th = x[:, 2]
        bx = np.zeros((M, 3, 3))
        bx[:, 0, 2] = -self.speed * np.sin(th)
        bx[:, 1, 2] = self.speed * np.cos(th)
        bu = np.zeros((M, 3, 1))
        bu[:, 2, 0] = 1.0
        return bx, bu

    def diffusion(self, t, x):
        return np.broadcast_to(self.column[None, :, None], (x.shape[0], 3, 1))

    def diffusion_jacobian(self, t, x):
        return np.zeros((x.shape[0], 1, 3, 3))


class FreeFlyerModel(SdeModel):
    """Planar double integrator ``d(p, w) = (w, u) dt + (0, 0, s, s) dW``."""

    n, m, d = 4, 2, 1
    control_affine = True
    state_dependent_noise = False

    def __init__(self, sigma_v: float):
        self.column = np.array([0.0, 0.0, sigma_v, sigma_v])
        self.shift = np.zeros((4, 4))
        self.shift[0, 2] = self.shift[1, 3] = 1.0
        self.inputs = np.zeros((4, 2))
        self.inputs[2, 0] = self.inputs[3, 1] = 1.0

    def drift(self, t, x, u):
        return x @ self.shift.T + u @ self.inputs.T

    def drift_jacobians(self, t, x, u):
        M = x.shape[0]
        return np.broadcast_to(self.shift, (M, 4, 4)), np.broadcast_to(self.inputs, (M, 4, 2))

    def diffusion(self, t, x):
        return np.broadcast_to(self.column[None, :, None], (x.shape[0], 4, 1))

    def diffusion_jacobian(self, t, x):
        return np.zeros((x.shape[0], 1, 4, 4))


@dataclass(frozen=True)
class ReferenceTrajectory:
    X_ref: np.ndarray  # (N+1, n)
    u_ref: ControlParams


def make_reference(model: SdeModel, u_ref: ControlParams, x0, grid: TimeGrid) -> ReferenceTrajectory:
    """Noise-free simulation of ``u_ref`` from ``x0``."""
    path = simulate_paths(model, u_ref, x0, grid, zero_noise(grid, 1, model.d))
    return ReferenceTrajectory(X_ref=path.X[0], u_ref=u_ref)


class QuadraticTargetCost(CostModel):
    """``f = u^2``, ``g = (x - target)^2`` for the scalar LQ problem."""

    def __init__(self, target: float = 1.0):
        self.target = target

    def running(self, t, x, u):
        return np.sum(u * u, axis=1)

    def running_grad(self, t, x, u):
        return np.zeros_like(x), 2.0 * u

    def terminal(self, x):
        return np.sum((x - self.target) ** 2, axis=1)

    def terminal_grad(self, x):
        return 2.0 * (x - self.target)


class TrackingCost(CostModel):
    """Reference tracking plus obstacle potential.

    ``f = c_run |u|^2 + w_track |x - X_ref(t)|_W^2 + w_obs P(p)`` and
    ``g = w_terminal |x - X_ref(T)|_W^2``. Setting ``c_run = 0`` and a positive
    ``control_weight`` puts the energy on the parameters instead (control-affine form).
    """

    def __init__(self, reference: ReferenceTrajectory, grid: TimeGrid, state_weights, w_track: float,
                 w_terminal: float, obstacles: ObstacleSet, w_obs: float, c_run: float = 0.0,
                 control_weight: float = 0.0, position=(0, 1)):
        self.X_ref = reference.X_ref
        self.times = grid.times
        self.dt = grid.dt
        self.W = np.asarray(state_weights, dtype=float)
        self.w_track = w_track
        self.w_terminal = w_terminal
        self.obstacles = obstacles
        self.w_obs = w_obs
        self.c_run = c_run
        self.control_weight = control_weight
        self.position = list(position)

    def _ref(self, t):
        k = int(round(t / self.dt))
        if abs(k * self.dt - t) <= 1e-9 * max(1.0, abs(t)):
            return self.X_ref[k]
        return np.array([np.interp(t, self.times, col) for col in self.X_ref.T])

    def running(self, t, x, u):
        err = x - self._ref(t)
        value = self.w_track * np.sum(self.W * err * err, axis=1)
        if self.c_run:
            value = value + self.c_run * np.sum(u * u, axis=1)
        if self.w_obs and len(self.obstacles):
            pen, _ = obstacle_penalty(x[:, self.position], self.obstacles)
            value = value + self.w_obs * pen
        return value

    def running_grad(self, t, x, u):
        err = x - self._ref(t)
        fx = 2.0 * self.w_track * self.W * err
        if self.w_obs and len(self.obstacles):
            _, grad = obstacle_penalty(x[:, self.position], self.obstacles)
            fx[:, self.position] += self.w_obs * grad
        fu = 2.0 * self.c_run * u
        return fx, fu

    def terminal(self, x):
        err = x - self.X_ref[-1]
        return self.w_terminal * np.sum(self.W * err * err, axis=1)

    def terminal_grad(self, x):
        return 2.0 * self.w_terminal * self.W * (x - self.X_ref[-1])


@dataclass
class Benchmark:
    spec: BenchmarkSpec
    model: SdeModel
    cost: CostModel
    grid: TimeGrid
    x0: np.ndarray
    reference: ReferenceTrajectory
    obstacles: ObstacleSet

    @property
    def q(self) -> int:
        return self.model.m * self.model.n if self.spec.feedback else 0

    def initial_control(self) -> ControlParams:
        return ControlParams(self.reference.u_ref.v.copy(), np.zeros(self.q))


def _window_profile(grid: TimeGrid, start: float, duration: float, signs) -> np.ndarray:
    """Piecewise-constant +-1 profile over consecutive windows of length ``duration``."""
    t = grid.times[:-1] + 0.5 * grid.dt
    out = np.zeros(grid.steps)
    for j, s in enumerate(signs):
        lo = start + j * duration
        out[(t >= lo) & (t < lo + duration)] = s
    return out


def steering_reference_control(spec: BenchmarkSpec) -> ControlParams:
    """Swerve: turn left, right for twice as long, then left again (net heading zero)."""
    profile = _window_profile(spec.grid, spec.ref_start, spec.ref_duration, (1, -1, -1, 1))
    return ControlParams(spec.ref_gain * profile[:, None])


def freeflyer_reference_control(spec: BenchmarkSpec) -> ControlParams:
    """Accelerate then brake along x; lateral dodge along y with zero end velocity."""
    grid = spec.grid
    half = spec.horizon / 2.0
    ux = spec.accel * _window_profile(grid, 0.0, half, (1, -1))
    uy = spec.ref_gain * _window_profile(grid, spec.ref_start, spec.ref_duration, (1, -1, -1, 1))
    return ControlParams(np.stack([ux, uy], axis=1))


def build_lq(spec: BenchmarkSpec) -> Benchmark:
    model = ScalarIntegrator(spec.sigma)
    grid = spec.grid
    x0 = np.asarray(spec.x0, dtype=float)
    u_ref = ControlParams.zeros(grid.steps, 1)
    reference = make_reference(model, u_ref, x0, grid)
    return Benchmark(spec, model, QuadraticTargetCost(spec.target), grid, x0, reference, spec.obstacles)


def build_steering(spec: BenchmarkSpec) -> Benchmark:
    model = SteeringModel(spec.speed, spec.sigma_pos, spec.sigma_theta)
    grid = spec.grid
    x0 = np.asarray(spec.x0, dtype=float)
    reference = make_reference(model, steering_reference_control(spec), x0, grid)
    model.feedback_center = reference.X_ref
    # "running" charges C_u u(t)^2 on the applied input (feedback included);
    # "parameters" charges C_u |(v, lam)|_U^2 on the control parameters.
    c_run, c_par = (spec.control_weight, 0.0) if spec.energy == "running" else (0.0, spec.control_weight)
    cost = TrackingCost(reference, grid, spec.state_weights, spec.w_track, spec.w_terminal,
                        spec.obstacles, spec.w_obs, c_run=c_run, control_weight=c_par)
    return Benchmark(spec, model, cost, grid, x0, reference, spec.obstacles)


def build_freeflyer(spec: BenchmarkSpec) -> Benchmark:
    model = FreeFlyerModel(spec.sigma_v)
    grid = spec.grid
    x0 = np.asarray(spec.x0, dtype=float)
    reference = make_reference(model, freeflyer_reference_control(spec), x0, grid)
    model.feedback_center = reference.X_ref
    cost = TrackingCost(reference, grid, spec.state_weights, spec.w_track, spec.w_terminal,
                        spec.obstacles, spec.w_obs, c_run=0.0, control_weight=spec.control_weight)
    return Benchmark(spec, model, cost, grid, x0, reference, spec.obstacles)


def build(spec: BenchmarkSpec) -> Benchmark:
    return {"lq": build_lq, "steering": build_steering, "freeflyer": build_freeflyer}[spec.kind](spec)
