"""Per-scenario trajectory cost and its pathwise gradient.

The cost of scenario ``i`` is

    J_i = C_u |u|_U^2 + sum_k f(t_k, X_ik, u_ik) dt + g(X_iN)

and its gradient is obtained from the backward accumulation ``I`` of cost
sensitivities along the fundamental matrix ``Phi``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sde import ControlParams, StatePath, TimeGrid, VariationalPath, feedback_eval


class CostContractError(ValueError):
    """A cost model returned a negative or non-finite value."""


class CostModel:
    """Vectorised running cost ``f(t, x, u)`` and terminal cost ``g(x)``.

    ``control_weight`` is the ``C_u`` factor of an energy term on the
    parameters themselves; leave it at zero when the energy is part of ``f``.
    """

    control_weight: float = 0.0

    def running(self, t: float, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def running_grad(self, t: float, x: np.ndarray, u: np.ndarray):
        """Return ``(df/dx (M, n), df/du (M, m))``."""
        raise NotImplementedError

    def terminal(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def terminal_grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class CostSample:
    energy: np.ndarray
    running: np.ndarray
    terminal: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.energy + self.running + self.terminal


@dataclass(frozen=True)
class GradientSample:
    """Per-scenario Riesz gradients: ``gv`` (M, N, m) and ``glam`` (M, q).

    ``gv`` is a density on the grid: ``<grad, h>_U = sum_k gv_k . hv_k dt + glam . hlam``.
    """

    gv: np.ndarray
    glam: np.ndarray

    def directional(self, h: ControlParams, dt: float) -> np.ndarray:
        return np.einsum("ikj,kj->i", self.gv, h.v) * dt + self.glam @ h.lam

    def weighted_mean(self, weights: np.ndarray) -> ControlParams:
        """``E[w grad]`` as a control-space element (arithmetic mean over scenarios)."""
        M = self.gv.shape[0]
        return ControlParams(
            np.tensordot(weights, self.gv, axes=1) / M,
            np.tensordot(weights, self.glam, axes=1) / M,
        )


def _check(name: str, values: np.ndarray):
    if not np.all(np.isfinite(values)):
        raise CostContractError(f"{name} cost is not finite")
    if np.any(values < 0):
        raise CostContractError(f"{name} cost is negative (min {values.min():.3e})")


def evaluate_cost(cm: CostModel, u: ControlParams, path: StatePath, grid: TimeGrid) -> CostSample:
    M, N, dt = path.X.shape[0], grid.steps, grid.dt
    running = np.zeros(M)
    for k in range(N):
        fk = cm.running(k * dt, path.X[:, k], path.U[:, k])
        _check("running", fk)
        running += fk * dt
    terminal = np.asarray(cm.terminal(path.X[:, N]), dtype=float)
    _check("terminal", terminal)
    energy = np.full(M, cm.control_weight * u.inner(u, dt))
    return CostSample(energy=energy, running=running, terminal=terminal)


def _backward(cm: CostModel, path: StatePath, varpath: VariationalPath, u: ControlParams, grid: TimeGrid):
    M, N, dt = path.X.shape[0], grid.steps, grid.dt
    n = path.X.shape[2]
    _, Kx, _ = feedback_eval(u.lam, path.X[:, 0], u.m)
    Phi = varpath.Phi
    I = np.empty((M, N + 1, n))
    FU = np.empty((M, N, u.m))
    I[:, N] = np.einsum("ij,ijl->il", cm.terminal_grad(path.X[:, N]), Phi[:, N])
    for k in range(N - 1, -1, -1):
        fx, fu = cm.running_grad(k * dt, path.X[:, k], path.U[:, k])
        FU[:, k] = fu
        row = fx + fu @ Kx
        I[:, k] = I[:, k + 1] + np.einsum("ij,ijl->il", row, Phi[:, k]) * dt
    return I, FU


def _costate(cm: CostModel, path: StatePath, varpath: VariationalPath, u: ControlParams, grid: TimeGrid):
    M, N, dt = path.X.shape[0], grid.steps, grid.dt
    n = path.X.shape[2]
    _, Kx, _ = feedback_eval(u.lam, path.X[:, 0], u.m)
    P = np.empty((M, N, n))  # P[:, k] = p_{k+1}
    FU = np.empty((M, N, u.m))
    p = cm.terminal_grad(path.X[:, N])
    for k in range(N - 1, -1, -1):
        P[:, k] = p
        fx, fu = cm.running_grad(k * dt, path.X[:, k], path.U[:, k])
        FU[:, k] = fu
        p = np.einsum("ij,ijl->il", p, varpath.S[:, k]) + (fx + fu @ Kx) * dt
    return P, FU


def compute_Iu(cm: CostModel, path: StatePath, varpath: VariationalPath, u: ControlParams, grid: TimeGrid) -> np.ndarray:
    """Backward sum ``I_N = g_x Phi_N``, ``I_k = I_{k+1} + (f_x + f_u Kx) Phi_k dt``.

    Returns an array of row vectors, shape (M, N+1, n).
    """
    return _backward(cm, path, varpath, u, grid)[0]


def gradient_samples(
    cm: CostModel,
    model,
    u: ControlParams,
    path: StatePath,
    varpath: VariationalPath,
    grid: TimeGrid,
    method: str = "fundamental",
) -> GradientSample:
    """Pathwise gradient of ``J_i`` with respect to ``(v, lam)``.

    A perturbation of the control on ``[t_k, t_{k+1})`` first moves the state
    at ``t_{k+1}``, so the sensitivity row used for step ``k`` is
    ``p_{k+1} db/du_k`` with ``p_k = I_k Psi_k``; the direct ``df/du`` and
    energy terms are added on top. This is the exact derivative of the
    discrete cost.

    ``method="fundamental"`` forms ``p_k`` as the product ``I_k Psi_k``.
    ``method="costate"`` runs the equivalent backward recursion
    ``p_N = g_x``, ``p_k = p_{k+1} S_k + (f_x + f_u Kx)_k dt``, which stays
    accurate when Phi is badly conditioned (strongly contracting feedback over
    long horizons).
    """
    dt = grid.dt
    if method == "fundamental":
        I, FU = _backward(cm, path, varpath, u, grid)
        adj = np.einsum("ikj,ikjl->ikl", I[:, 1:], varpath.Psi[:, 1:])
    elif method == "costate":
        adj, FU = _costate(cm, path, varpath, u, grid)
    else:
        raise ValueError(f"unknown gradient method {method!r}")
    gv = np.einsum("ikj,ikjm->ikm", adj, varpath.Bu) + FU
    if u.q:
        _, _, Klam = feedback_eval(u.lam, model.centered(path.X[:, :-1], slice(0, -1)), u.m)
        glam = np.einsum("ikm,ikmq->iq", gv, Klam) * dt
    else:
        glam = np.zeros((path.X.shape[0], 0))
    cu = cm.control_weight
    if cu:
        gv += 2.0 * cu * u.v
        glam += 2.0 * cu * u.lam
    return GradientSample(gv=gv, glam=glam)
