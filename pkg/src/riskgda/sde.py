"""Euler-Maruyama simulation of controlled SDEs and of their variational flow.

All arrays are batched over scenarios along the leading axis:

    states        X    (M, N+1, n)
    controls      U    (M, N, m)      applied values v_k + K(X_k)
    increments    dW   (M, N, d)
    fundamental   Phi  (M, N+1, n, n)

Models implement the vectorised :class:`SdeModel` interface and are driven by
a fixed :class:`NoiseBatch`, so every output is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SimulationDivergence(RuntimeError):
    """A state became non-finite during the forward simulation."""

    def __init__(self, scenario: int, step: int):
        super().__init__(f"non-finite state in scenario {scenario} at step {step}")
        self.scenario = scenario
        self.step = step


class ConditioningError(RuntimeError):
    """The running inverse of the fundamental matrix drifted away from it."""

    def __init__(self, error: float, scenario: int, step: int, tol: float):
        super().__init__(
            f"|Psi Phi - I| = {error:.3e} exceeds {tol:.3e} "
            f"(scenario {scenario}, step {step})"
        )
        self.error = error
        self.scenario = scenario
        self.step = step


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise ValueError(f"horizon must be positive and finite, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt


@dataclass(frozen=True)
class NoiseBatch:
    """Wiener increments ``dW`` of shape (M, N, d) drawn on ``grid``."""

    grid: TimeGrid
    seed: int
    dW: np.ndarray

    @property
    def scenarios(self) -> int:
        return self.dW.shape[0]

    @property
    def channels(self) -> int:
        return self.dW.shape[2]


def scenario_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for scenario ``index``; depends on (seed, index) only."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def sample_noise(grid: TimeGrid, scenarios: int, seed: int, channels: int = 1) -> NoiseBatch:
    if scenarios < 1:
        raise ValueError(f"scenario count must be >= 1, got {scenarios}")
    if channels < 1:
        raise ValueError(f"noise channels must be >= 1, got {channels}")
    dt = grid.dt
    if not np.isfinite(dt):
        raise ValueError("non-finite time step")
    scale = np.sqrt(dt)
    dW = np.empty((scenarios, grid.steps, channels))
    for i in range(scenarios):
        dW[i] = scenario_rng(seed, i).standard_normal((grid.steps, channels)) * scale
    dW.flags.writeable = False
    return NoiseBatch(grid=grid, seed=seed, dW=dW)


def zero_noise(grid: TimeGrid, scenarios: int = 1, channels: int = 1) -> NoiseBatch:
    """Deterministic batch (all increments zero), used for reference trajectories."""
    dW = np.zeros((scenarios, grid.steps, channels))
    dW.flags.writeable = False
    return NoiseBatch(grid=grid, seed=-1, dW=dW)


@dataclass
class ControlParams:
    """Open-loop signal ``v`` (N, m), piecewise constant per step, and feedback gains ``lam``.

    ``lam`` is either empty (pure open loop) or holds the row-major entries of
    the m x n gain matrix of the linear feedback ``K(x) = Lambda x``.
    """

    v: np.ndarray
    lam: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.v = np.atleast_2d(np.asarray(self.v, dtype=float))
        self.lam = np.asarray(self.lam, dtype=float).ravel()
        if not (np.all(np.isfinite(self.v)) and np.all(np.isfinite(self.lam))):
            raise ValueError("control parameters must be finite")

    @property
    def steps(self) -> int:
        return self.v.shape[0]

    @property
    def m(self) -> int:
        return self.v.shape[1]

    @property
    def q(self) -> int:
        return self.lam.size

    @classmethod
    def zeros(cls, steps: int, m: int, q: int = 0) -> "ControlParams":
        return cls(np.zeros((steps, m)), np.zeros(q))

    def copy(self) -> "ControlParams":
        return ControlParams(self.v.copy(), self.lam.copy())

    def inner(self, other: "ControlParams", dt: float) -> float:
        """``<u1, u2>_U = int v1.v2 dt + lam1.lam2`` on the grid."""
        return float(np.sum(self.v * other.v) * dt + self.lam @ other.lam)

    def norm(self, dt: float) -> float:
        return float(np.sqrt(self.inner(self, dt)))

    def axpy(self, a: float, other: "ControlParams") -> "ControlParams":
        """Return ``self + a * other``."""
        return ControlParams(self.v + a * other.v, self.lam + a * other.lam)


def feedback_eval(lam: np.ndarray, x: np.ndarray, m: int):
    """Linear feedback ``K = Lambda x`` with Lambda = lam reshaped row-major to (m, n).

    ``x`` may be a single state (n,) or a batch (M, n). Returns ``(K, Kx, Klam)``
    where ``Kx`` is the (m, n) Jacobian in x and ``Klam`` the (..., m, q)
    Jacobian in lam (``Klam[j, j*n + l] = x[l]``).
    """
    lam = np.asarray(lam, dtype=float).ravel()
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    batch = x.shape[:-1]
    q = lam.size
    if q == 0:
        return np.zeros(batch + (m,)), np.zeros((m, n)), np.zeros(batch + (m, 0))
    if q != m * n:
        raise ValueError(f"feedback parameter length {q} does not match m*n = {m * n}")
    gain = lam.reshape(m, n)
    K = x @ gain.T
    Klam = np.zeros(batch + (m, q))
    for j in range(m):
        Klam[..., j, j * n:(j + 1) * n] = x
    return K, gain, Klam


class SdeModel:
    """Vectorised controlled SDE ``dX = b(t, X, u) dt + sigma(t, X) dW``.

    Subclasses set ``n``, ``m`` and ``d`` and implement the drift, the
    diffusion and their Jacobians for batches ``x`` (M, n), ``u`` (M, m).
    """

    n: int
    m: int
    d: int = 1
    control_affine: bool = False
    # False when sigma does not depend on x; lets the variational pass skip dsigma/dx.
    state_dependent_noise: bool = True
    # Optional (N+1, n) grid trajectory the feedback acts around: K = Lambda (x - center_k).
    feedback_center: np.ndarray | None = None

    def centered(self, x: np.ndarray, k) -> np.ndarray:
        """State relative to the feedback center at grid index ``k`` (int or slice)."""
        if self.feedback_center is None:
            return x
        return x - self.feedback_center[k]

    def drift(self, t: float, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def drift_jacobians(self, t: float, x: np.ndarray, u: np.ndarray):
        """Return ``(db/dx (M, n, n), db/du (M, n, m))``."""
        raise NotImplementedError

    def diffusion(self, t: float, x: np.ndarray) -> np.ndarray:
        """Diffusion columns, shape (M, n, d)."""
        raise NotImplementedError

    def diffusion_jacobian(self, t: float, x: np.ndarray) -> np.ndarray:
        """Per-channel Jacobian of the diffusion column, shape (M, d, n, n)."""
        raise NotImplementedError


@dataclass(frozen=True)
class StatePath:
    X: np.ndarray  # (M, N+1, n)
    U: np.ndarray  # (M, N, m) applied controls

    @property
    def scenarios(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class VariationalPath:
    Phi: np.ndarray  # (M, N+1, n, n)
    Psi: np.ndarray  # (M, N+1, n, n)
    Bu: np.ndarray  # (M, N, n, m) input Jacobians db/du along the path
    S: np.ndarray  # (M, N, n, n) one-step tangent maps, Phi_{k+1} = S_k Phi_k
    max_inverse_error: float


def batched_inv(S: np.ndarray) -> np.ndarray:
    """Inverse of a stack of small square matrices (closed form up to 3x3)."""
    n = S.shape[-1]
    if n == 1:
        return 1.0 / S
    if n == 2:
        a, b, c, d = S[..., 0, 0], S[..., 0, 1], S[..., 1, 0], S[..., 1, 1]
        det = a * d - b * c
        out = np.empty_like(S)
        out[..., 0, 0], out[..., 0, 1] = d / det, -b / det
        out[..., 1, 0], out[..., 1, 1] = -c / det, a / det
        return out
    if n == 3:
        a, b, c = S[..., 0, 0], S[..., 0, 1], S[..., 0, 2]
        d, e, f = S[..., 1, 0], S[..., 1, 1], S[..., 1, 2]
        g, h, i = S[..., 2, 0], S[..., 2, 1], S[..., 2, 2]
        A, B, C = e * i - f * h, f * g - d * i, d * h - e * g
        det = a * A + b * B + c * C
        out = np.empty_like(S)
        out[..., 0, 0], out[..., 1, 0], out[..., 2, 0] = A / det, B / det, C / det
        out[..., 0, 1] = (c * h - b * i) / det
        out[..., 1, 1] = (a * i - c * g) / det
        out[..., 2, 1] = (b * g - a * h) / det
        out[..., 0, 2] = (b * f - c * e) / det
        out[..., 1, 2] = (c * d - a * f) / det
        out[..., 2, 2] = (a * e - b * d) / det
        return out
    return np.linalg.inv(S)


def _check_inputs(model: SdeModel, u: ControlParams, x0: np.ndarray, grid: TimeGrid, noise: NoiseBatch):
    if noise.grid.steps != grid.steps or noise.grid.horizon != grid.horizon:
        raise ValueError("noise batch was drawn on a different grid")
    if u.steps != grid.steps or u.m != model.m:
        raise ValueError(f"control has shape {u.v.shape}, expected ({grid.steps}, {model.m})")
    if model.feedback_center is not None and model.feedback_center.shape != (grid.steps + 1, model.n):
        raise ValueError("feedback center does not match the grid")
    if x0.shape != (model.n,):
        raise ValueError(f"initial state has shape {x0.shape}, expected ({model.n},)")
    if noise.channels != model.d:
        raise ValueError(f"noise has {noise.channels} channels, model expects {model.d}")


def simulate_paths(model: SdeModel, u: ControlParams, x0, grid: TimeGrid, noise: NoiseBatch) -> StatePath:
    """Euler-Maruyama: ``X_{k+1} = X_k + b(t_k, X_k, u_k) dt + sigma(t_k, X_k) dW_k``."""
    x0 = np.asarray(x0, dtype=float)
    _check_inputs(model, u, x0, grid, noise)
    M, N, dt = noise.scenarios, grid.steps, grid.dt
    X = np.empty((M, N + 1, model.n))
    U = np.empty((M, N, model.m))
    X[:, 0] = x0
    x = X[:, 0]
    for k in range(N):
        t = k * dt
        K, _, _ = feedback_eval(u.lam, model.centered(x, k), model.m)
        uk = u.v[k] + K
        U[:, k] = uk
        noise_term = np.einsum("inc,ic->in", model.diffusion(t, x), noise.dW[:, k])
        x = x + model.drift(t, x, uk) * dt + noise_term
        X[:, k + 1] = x
        if not np.all(np.isfinite(x)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(x), axis=1))[0])
            raise SimulationDivergence(bad, k + 1)
    return StatePath(X=X, U=U)


def _inverse_error(Psi: np.ndarray, Phi: np.ndarray) -> np.ndarray:
    # Frobenius norm: an upper bound on the spectral norm, and cheap in batch.
    eye = np.eye(Phi.shape[-1])
    return np.sqrt(np.sum((Psi @ Phi - eye) ** 2, axis=(-2, -1)))


def simulate_variational(
    model: SdeModel,
    u: ControlParams,
    path: StatePath,
    grid: TimeGrid,
    noise: NoiseBatch,
    inverse: str = "step",
    reinvert_every: int | None = None,
    tol: float | None = None,
    check: bool | None = None,
) -> VariationalPath:
    """Fundamental matrix of the linearised SDE and its running inverse.

    ``Phi_{k+1} = (I + A_k dt + sum_c C_kc dW_kc) Phi_k`` with
    ``A_k = db/dx + db/du Kx`` and ``C_kc = dsigma_c/dx``. This is exactly the
    tangent map of the Euler-Maruyama recursion.

    ``inverse`` selects how ``Psi ~ Phi^-1`` is propagated:

    * ``"step"``: ``Psi_{k+1} = Psi_k (I + A_k dt + C_k dW_k)^-1``, the exact
      inverse of the discrete flow.
    * ``"ito"``: the inverse-flow SDE ``dPsi = Psi(-A + sum C^2) dt - Psi C dW``,
      re-inverted from Phi every ``reinvert_every`` steps (default N // 10).

    ``tol`` bounds ``max |Psi Phi - I|`` (default ``10 dt``); exceeding it raises
    :class:`ConditioningError` unless ``check`` is False.
    """
    if inverse not in ("step", "ito"):
        raise ValueError(f"unknown inverse method {inverse!r}")
    M, N, dt = path.X.shape[0], grid.steps, grid.dt
    n = model.n
    if tol is None:
        tol = 10.0 * dt
    if check is None:
        check = True
    if reinvert_every is None:
        reinvert_every = max(N // 10, 1)
    eye = np.eye(n)
    Phi = np.empty((M, N + 1, n, n))
    Psi = np.empty((M, N + 1, n, n))
    Bu = np.empty((M, N, n, model.m))
    S = np.empty((M, N, n, n))
    Phi[:, 0] = eye
    Psi[:, 0] = eye
    _, Kx, _ = feedback_eval(u.lam, path.X[:, 0], model.m)
    for k in range(N):
        t = k * dt
        x, uk = path.X[:, k], path.U[:, k]
        bx, bu = model.drift_jacobians(t, x, uk)
        Bu[:, k] = bu
        A = bx + bu @ Kx
        step = eye + A * dt
        if model.state_dependent_noise:
            C = model.diffusion_jacobian(t, x)  # (M, d, n, n)
            noise_mat = np.einsum("icjl,ic->ijl", C, noise.dW[:, k])
            step = step + noise_mat
        S[:, k] = step
        Phi[:, k + 1] = step @ Phi[:, k]
        if inverse == "step":
            Psi[:, k + 1] = Psi[:, k] @ batched_inv(step)
        elif model.state_dependent_noise:
            ito = np.einsum("icjl,iclr->ijr", C, C)
            Psi[:, k + 1] = Psi[:, k] @ (eye + (ito - A) * dt - noise_mat)
        else:
            Psi[:, k + 1] = Psi[:, k] @ (eye - A * dt)
            if (k + 1) % reinvert_every == 0:
                Psi[:, k + 1] = batched_inv(Phi[:, k + 1])
    err = _inverse_error(Psi, Phi)
    worst = float(err.max())
    if check and (not np.isfinite(worst) or worst > tol):
        flat = int(np.nanargmax(np.where(np.isfinite(err), err, np.inf)))
        i, k = np.unravel_index(flat, err.shape)
        raise ConditioningError(worst, int(i), int(k), tol)
    return VariationalPath(Phi=Phi, Psi=Psi, Bu=Bu, S=S, max_inverse_error=worst)
