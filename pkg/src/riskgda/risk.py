"""Sample-level CV@R: primal value, dual weights, and the capped-mean projection.

At sample level the dual set of CV@R_alpha is the capped-mean set

    Z_alpha = { zeta in [0, 1/alpha]^M : mean(zeta) = 1 },

which is non-empty iff ``alpha * M >= 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

_BISECTION_ITERS = 200


class InfeasibleRiskSet(ValueError):
    """``alpha * M < 1``: the tail holds less than one scenario."""


class InnerMaxError(RuntimeError):
    """Projected ascent for the concavified inner problem did not converge."""


@dataclass(frozen=True)
class RiskLevel:
    alpha: float
    gamma: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not self.gamma >= 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")

    @property
    def cap(self) -> float:
        return 1.0 / self.alpha


def _as_samples(samples) -> np.ndarray:
    z = np.asarray(samples, dtype=float).ravel()
    if z.size == 0:
        raise ValueError("empty sample set")
    return z


def _check_feasible(M: int, alpha: float):
    if alpha * M < 1.0 - 1e-12:
        raise InfeasibleRiskSet(f"alpha * M = {alpha * M:g} < 1: the alpha-tail holds less than one scenario; use more scenarios")


def cvar_primal(samples, alpha: float) -> float:
    """Average of the worst ``alpha`` fraction of the samples (fractional at the boundary)."""
    z = _as_samples(samples)
    RiskLevel(alpha)
    if alpha == 1.0:
        return float(np.mean(z))
    M = z.size
    desc = np.sort(z)[::-1]
    k = alpha * M
    whole = min(int(np.floor(k)), M)
    total = desc[:whole].sum()
    frac = k - whole
    if frac > 0 and whole < M:
        total += frac * desc[whole]
    return float(total / k)


def cvar_dual(samples, alpha: float):
    """Greedy maximiser of ``mean(zeta * z)`` over the capped-mean set.

    Returns ``(value, zeta)``; ties are broken by ascending scenario index.
    """
    z = _as_samples(samples)
    M = z.size
    _check_feasible(M, alpha)
    if alpha == 1.0:
        zeta = np.ones(M)
        return float(np.mean(z)), zeta
    cap = 1.0 / alpha
    order = np.argsort(-z, kind="stable")
    k = alpha * M
    whole = min(int(np.floor(k)), M)
    zeta = np.zeros(M)
    zeta[order[:whole]] = cap
    if whole < M:
        zeta[order[whole]] = max(M - whole * cap, 0.0)
    return float(np.mean(zeta * z)), zeta


def _solve_monotone(weights: Callable[[float], np.ndarray], lo: float, hi: float) -> np.ndarray:
    """Find ``zeta = weights(tau)`` with mean 1, for ``mean(weights)`` nonincreasing in tau.

    Bisection on the bracket [lo, hi] followed by a convex combination of the
    two bracketing weight vectors, which hits the mean constraint exactly and
    stays inside the box.
    """
    w_lo, w_hi = weights(lo), weights(hi)
    m_lo, m_hi = w_lo.mean(), w_hi.mean()
    for _ in range(_BISECTION_ITERS):
        if m_lo - m_hi <= 1e-14 or hi - lo <= 1e-15 * max(1.0, abs(lo), abs(hi)):
            break
        mid = 0.5 * (lo + hi)
        w_mid = weights(mid)
        m_mid = w_mid.mean()
        if m_mid >= 1.0:
            lo, w_lo, m_lo = mid, w_mid, m_mid
        else:
            hi, w_hi, m_hi = mid, w_mid, m_mid
    span = m_lo - m_hi
    theta = 0.0 if span <= 0 else (m_lo - 1.0) / span
    return w_lo + theta * (w_hi - w_lo)


def project_capped_mean(y, alpha: float) -> np.ndarray:
    """Euclidean projection of ``y`` onto the capped-mean set.

    The solution is ``clip(y - tau, 0, 1/alpha)`` for the shift ``tau`` making
    the mean equal to one.
    """
    y = _as_samples(y)
    M = y.size
    RiskLevel(alpha)
    _check_feasible(M, alpha)
    if alpha == 1.0:
        return np.ones(M)
    cap = 1.0 / alpha
    lo = float(y.min()) - cap - 1.0
    hi = float(y.max()) + 1.0
    return _solve_monotone(lambda tau: np.clip(y - tau, 0.0, cap), lo, hi)


def concave_objective(zeta: np.ndarray, samples: np.ndarray, gamma: float) -> float:
    """``mean(zeta (1 - gamma zeta) J)``."""
    return float(np.mean(zeta * (1.0 - gamma * zeta) * samples))


def _inner_kkt(J: np.ndarray, cap: float, gamma: float) -> np.ndarray:
    # Stationarity J_i (1 - 2 gamma zeta_i) = tau on the free coordinates.
    positive = J > 0
    Jp = np.where(positive, J, 1.0)

    denom = 2.0 * gamma * Jp
    tiny = denom == 0.0  # gamma * J underflowed: the weights become a step in tau

    def weights(tau):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            free = np.clip((Jp - tau) / np.where(tiny, 1.0, denom), 0.0, cap)
        free = np.where(tiny, np.where(Jp > tau, cap, 0.0), free)
        flat = cap if tau < 0 else 0.0
        return np.where(positive, free, flat)

    lo = min(0.0, float(np.min(J * (1.0 - 2.0 * gamma * cap)))) - 1.0
    hi = float(J.max()) + 1.0
    return _solve_monotone(weights, lo, hi)


def _inner_ascent(J: np.ndarray, alpha: float, gamma: float, tol: float, max_iter: int) -> np.ndarray:
    M = J.size
    step = 1.0 / (2.0 * gamma * float(J.max()) + 1e-12)
    zeta = np.ones(M)
    for _ in range(max_iter):
        nxt = project_capped_mean(zeta + step * (1.0 - 2.0 * gamma * zeta) * J, alpha)
        moved = np.linalg.norm(nxt - zeta) / np.sqrt(M)
        zeta = nxt
        if moved <= tol:
            return zeta
    raise InnerMaxError(f"projected ascent did not reach tol={tol:g} in {max_iter} iterations")


def inner_maximize(samples, level: RiskLevel, tol: float = 1e-10, method: str = "kkt", max_iter: int = 10_000):
    """Maximise ``mean(zeta (1 - gamma zeta) J)`` over the capped-mean set.

    Returns ``(zeta_u, phi_gamma)``. For ``gamma = 0`` the greedy CV@R weights
    are returned (the maximiser may then be non-unique). For ``gamma > 0`` the
    problem is strongly concave on positive samples; ``method="kkt"`` solves its
    optimality conditions by bisection on the multiplier, ``method="ascent"``
    runs projected gradient ascent with step ``1 / (2 gamma max J)``.
    """
    J = _as_samples(samples)
    if np.any(J < 0):
        raise ValueError("inner maximisation requires nonnegative samples")
    _check_feasible(J.size, level.alpha)
    if level.gamma == 0.0:
        value, zeta = cvar_dual(J, level.alpha)
        return zeta, value
    if level.alpha == 1.0:
        zeta = np.ones(J.size)
    elif method == "kkt":
        zeta = _inner_kkt(J, level.cap, level.gamma)
    elif method == "ascent":
        zeta = _inner_ascent(J, level.alpha, level.gamma, tol, max_iter)
    else:
        raise ValueError(f"unknown method {method!r}")
    return zeta, concave_objective(zeta, J, level.gamma)
