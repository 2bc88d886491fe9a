import itertools

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from riskgda.risk import (
    InfeasibleRiskSet,
    InnerMaxError,
    RiskLevel,
    concave_objective,
    cvar_dual,
    cvar_primal,
    inner_maximize,
    project_capped_mean,
)

ALPHAS = [0.05, 0.2, 0.5, 1.0]


def inf_formula(z, alpha):
    """min_t t + mean(max(0, z - t)) / alpha; the minimum is attained at a sample."""
    z = np.asarray(z, dtype=float)
    return min(t + np.mean(np.maximum(0.0, z - t)) / alpha for t in z)


def projection_oracle(y, alpha):
    """Exact projection by enumerating which coordinates sit at 0, at the cap, or free."""
    y = np.asarray(y, dtype=float)
    M, cap = y.size, 1.0 / alpha
    best, best_d = None, np.inf
    for labels in itertools.product((0, 1, 2), repeat=M):
        labels = np.array(labels)
        free = labels == 2
        fixed = np.where(labels == 1, cap, 0.0)
        if free.any():
            tau = (y[free].sum() + fixed[~free].sum() - M) / free.sum()
            z = np.where(free, y - tau, fixed)
        else:
            z = fixed
        if abs(z.mean() - 1) > 1e-12 or z.min() < -1e-12 or z.max() > cap + 1e-12:
            continue
        d = np.sum((z - y) ** 2)
        if d < best_d:
            best, best_d = z, d
    return best


def random_feasible(r, M, alpha, count):
    """Points of the capped-mean set: box samples moved onto mean 1, pulled toward ones if needed."""
    cap = 1.0 / alpha
    x = r.uniform(0, cap, size=(count, M))
    d = x - x.mean(axis=1, keepdims=True) + 1.0
    lo = np.where(d < 0, 1.0 / (1.0 - d), np.inf).min(axis=1)
    hi = np.where(d > cap, (cap - 1.0) / (d - 1.0), np.inf).min(axis=1)
    s = np.minimum(1.0, np.minimum(lo, hi))[:, None]
    return 1.0 + s * (d - 1.0)


def kkt_residual(zeta, y, alpha):
    cap = 1.0 / alpha
    free = (zeta > 1e-12) & (zeta < cap - 1e-12)
    if free.any():
        tau = np.mean(y[free] - zeta[free])
    else:
        lo = np.max(y[zeta <= 1e-12], initial=-np.inf)
        hi = np.min(y[zeta >= cap - 1e-12] - cap, initial=np.inf)
        tau = 0.5 * (lo + hi) if np.isfinite(lo) and np.isfinite(hi) else (lo if np.isfinite(lo) else hi)
    return max(np.max(np.abs(zeta - np.clip(y - tau, 0, cap))), abs(zeta.mean() - 1))


def feasible(zeta, alpha):
    return zeta.min() >= 0 and zeta.max() <= 1 / alpha and abs(zeta.mean() - 1) <= 1e-10


# --- primal -------------------------------------------------------------------


def test_cvar_small_example():
    assert cvar_primal([1, 2, 3, 4], 0.5) == pytest.approx(inf_formula([1, 2, 3, 4], 0.5), abs=1e-14)
    assert cvar_primal([1, 2, 3, 4], 0.5) == 3.5


def test_cvar_one_is_the_mean():
    assert cvar_primal([1, 2, 3, 4], 1.0) == 2.5


@pytest.mark.parametrize("alpha", ALPHAS)
def test_cvar_of_a_constant(alpha):
    assert cvar_primal(np.full(37, 7.3), alpha) == pytest.approx(7.3, abs=1e-12)


def test_cvar_empty():
    with pytest.raises(ValueError):
        cvar_primal([], 0.5)


@given(arrays(float, st.integers(1, 40), elements=st.floats(-1e3, 1e3)), st.sampled_from(ALPHAS + [0.3, 0.77]))
def test_cvar_matches_inf_formula(z, alpha):
    assert cvar_primal(z, alpha) == pytest.approx(inf_formula(z, alpha), rel=1e-9, abs=1e-9)


@given(arrays(float, st.integers(1, 40), elements=st.floats(-1e3, 1e3)),
       st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_cvar_monotone_in_alpha(z, a1, a2):
    lo, hi = min(a1, a2), max(a1, a2)
    assert cvar_primal(z, lo) >= cvar_primal(z, hi) - 1e-9 * (1 + np.abs(z).max())


def test_coherence_axioms(rng):
    for _ in range(100):
        z = rng.normal(size=rng.choice([4, 17, 1000]))
        alpha = rng.choice(ALPHAS)
        t, a = rng.uniform(0.1, 10), rng.normal() * 5
        base = cvar_primal(z, alpha)
        assert abs(cvar_primal(t * z, alpha) - t * base) <= 1e-12 * max(1, abs(t * base))
        assert abs(cvar_primal(z + a, alpha) - (base + a)) <= 1e-12 * max(1, abs(base + a))


# --- dual ---------------------------------------------------------------------


def test_dual_small_example():
    value, zeta = cvar_dual([1, 2, 3, 4], 0.5)
    np.testing.assert_array_equal(zeta, [0, 0, 2, 2])
    assert value == 3.5
    # exhaustive check over vertex weightings of the capped-mean set, M = 4
    verts = [np.array(v) for v in itertools.product((0.0, 2.0), repeat=4) if np.mean(v) == 1.0]
    assert value == max(np.mean(v * [1, 2, 3, 4]) for v in verts)


def test_dual_alpha_one():
    value, zeta = cvar_dual([5, 1, 3], 1.0)
    np.testing.assert_array_equal(zeta, 1.0)
    assert value == 3.0


def test_dual_gaussian_matches_primal(rng):
    z = rng.normal(size=1000)
    assert abs(cvar_dual(z, 0.1)[0] - cvar_primal(z, 0.1)) <= 1e-10


def test_dual_ties_break_by_index():
    _, zeta = cvar_dual([1.0, 5.0, 5.0, 5.0], 0.5)
    np.testing.assert_array_equal(zeta, [0, 2, 2, 0])


def test_primal_dual_equality_sweep(rng):
    for _ in range(100):
        M = int(rng.choice([4, 17, 1000]))
        alpha = float(rng.choice(ALPHAS))
        assume_ok = alpha * M >= 1
        if not assume_ok:
            continue
        z = rng.exponential(size=M) * rng.uniform(0.1, 100)
        value, zeta = cvar_dual(z, alpha)
        assert abs(value - cvar_primal(z, alpha)) <= 1e-10 * max(1, abs(value))
        assert feasible(zeta, alpha)


def test_infeasible_set():
    with pytest.raises(InfeasibleRiskSet):
        cvar_dual([1.0, 2.0], 0.1)
    with pytest.raises(InfeasibleRiskSet):
        project_capped_mean([1.0, 2.0], 0.1)


# --- projection ---------------------------------------------------------------


def test_projection_identity_on_feasible_point():
    np.testing.assert_array_equal(project_capped_mean([0, 0, 2, 2], 0.5), [0, 0, 2, 2])


def test_projection_symmetric_point():
    np.testing.assert_allclose(project_capped_mean([3, 3, 3, 3], 0.5), 1.0, atol=1e-12)


def test_projection_worked_case():
    zeta = project_capped_mean([0, 0, 0, 10], 0.5)
    np.testing.assert_allclose(zeta, [2 / 3, 2 / 3, 2 / 3, 2], atol=1e-10)
    np.testing.assert_allclose(projection_oracle([0, 0, 0, 10], 0.5), zeta, atol=1e-10)


@given(arrays(float, st.integers(1, 6), elements=st.floats(-20, 20)), st.sampled_from([0.2, 0.25, 0.5, 0.8, 1.0]))
@settings(max_examples=200)
def test_projection_matches_enumeration(y, alpha):
    assume(alpha * y.size >= 1)
    np.testing.assert_allclose(project_capped_mean(y, alpha), projection_oracle(y, alpha), atol=1e-9)


@given(arrays(float, st.integers(1, 200), elements=st.floats(-1e4, 1e4)), st.floats(0.005, 1.0))
def test_projection_is_feasible(y, alpha):
    assume(alpha * y.size >= 1)
    zeta = project_capped_mean(y, alpha)
    assert zeta.min() >= 0 and zeta.max() <= 1 / alpha
    assert abs(zeta.mean() - 1) <= 1e-12


def test_projection_beats_random_feasible_points(rng):
    for _ in range(200):
        M = int(rng.integers(2, 7))
        alpha = float(rng.choice([a for a in (0.2, 0.25, 0.34, 0.5, 0.75, 1.0) if a * M >= 1]))
        y = rng.normal(size=M) * rng.uniform(0.5, 5)
        zeta = project_capped_mean(y, alpha)
        pts = random_feasible(rng, M, alpha, 100_000)
        assert np.all(np.sum((pts - y) ** 2, axis=1) >= np.sum((zeta - y) ** 2) - 1e-12)
        assert kkt_residual(zeta, y, alpha) <= 1e-8


# --- inner maximisation -------------------------------------------------------


def test_inner_gamma_zero_is_the_dual(rng):
    z = rng.exponential(size=50)
    zeta, phi = inner_maximize(z, RiskLevel(0.2, 0.0))
    value, dual = cvar_dual(z, 0.2)
    np.testing.assert_array_equal(zeta, dual)
    assert phi == value


@pytest.mark.parametrize("gamma", [0.0, 0.1, 0.4])
def test_inner_alpha_one(gamma):
    z = np.array([1.0, 2.0, 6.0])
    zeta, phi = inner_maximize(z, RiskLevel(1.0, gamma))
    np.testing.assert_array_equal(zeta, 1.0)
    assert phi == pytest.approx((1 - gamma) * 3.0, rel=1e-15)


def test_inner_grid_search_oracle():
    J = np.array([1.0, 2.0, 4.0])
    gamma, cap = 0.1, 2.0
    # zeta3 = 3 - zeta1 - zeta2 on the mean-one slice, all in [0, 2]
    grid = np.linspace(0, cap, 2001)
    z1, z2 = np.meshgrid(grid, grid, indexing="ij")
    z3 = 3.0 - z1 - z2
    ok = (z3 >= 0) & (z3 <= cap)
    vals = (z1 * (1 - gamma * z1) * J[0] + z2 * (1 - gamma * z2) * J[1] + z3 * (1 - gamma * z3) * J[2]) / 3
    vals = np.where(ok, vals, -np.inf)
    i = np.unravel_index(np.argmax(vals), vals.shape)
    best = np.array([z1[i], z2[i], z3[i]])
    for method in ("kkt", "ascent"):
        zeta, phi = inner_maximize(J, RiskLevel(0.5, gamma), method=method)
        assert abs(phi - vals[i]) <= 1e-4
        np.testing.assert_allclose(zeta, best, atol=2e-3)


@given(arrays(float, st.integers(2, 60), elements=st.floats(0.01, 100)),
       st.sampled_from([0.05, 0.2, 0.5]), st.floats(1e-4, 0.02))
@settings(max_examples=60, deadline=None)
def test_kkt_and_ascent_agree(J, alpha, gamma):
    assume(alpha * J.size >= 1 and 2 * gamma / alpha < 1)
    level = RiskLevel(alpha, gamma)
    a, pa = inner_maximize(J, level, method="kkt")
    b, pb = inner_maximize(J, level, method="ascent", tol=1e-12, max_iter=100_000)
    assert feasible(a, alpha)
    assert pa >= pb - 1e-9 * max(1, abs(pb))
    np.testing.assert_allclose(a, b, atol=1e-5)


@given(arrays(float, st.integers(2, 60), elements=st.floats(0, 100)),
       st.sampled_from([0.05, 0.2, 0.5, 1.0]), st.floats(0, 0.02))
@settings(max_examples=60, deadline=None)
def test_phi_gamma_close_to_cvar(J, alpha, gamma):
    assume(alpha * J.size >= 1)
    _, phi = inner_maximize(J, RiskLevel(alpha, gamma))
    _, phi0 = inner_maximize(J, RiskLevel(alpha, 0.0))
    assert phi <= phi0 + 1e-9 * (1 + phi0)
    assert phi0 - phi <= gamma / alpha**2 * J.mean() + 1e-9 * (1 + phi0)


def test_kkt_solution_beats_perturbations(rng):
    J = rng.exponential(size=30)
    level = RiskLevel(0.2, 0.05)
    zeta, phi = inner_maximize(J, level)
    for z in random_feasible(rng, 30, 0.2, 2000):
        assert concave_objective(z, J, 0.05) <= phi + 1e-12


def test_inner_rejects_negative_samples():
    with pytest.raises(ValueError):
        inner_maximize([-1.0, 2.0], RiskLevel(0.5, 0.1))


def test_ascent_non_convergence_is_reported():
    with pytest.raises(InnerMaxError):
        inner_maximize(np.array([1.0, 2.0, 50.0, 3.0]), RiskLevel(0.5, 0.01), method="ascent", tol=1e-15, max_iter=2)


@pytest.mark.parametrize("alpha, gamma", [(0.0, 0.0), (1.5, 0.0), (0.5, -0.1)])
def test_risk_level_validation(alpha, gamma):
    with pytest.raises(ValueError):
        RiskLevel(alpha, gamma)


def test_inner_underflowing_gamma_gives_the_dual():
    J = np.array([1e-20, 2e-20, 3.0, 3.0, 0.5])
    with np.errstate(divide="raise", invalid="raise", over="raise"):
        zeta, phi = inner_maximize(J, RiskLevel(0.4, 1e-300))
    assert phi == pytest.approx(cvar_primal(J, 0.4), rel=1e-12)
    assert np.all(np.isfinite(zeta)) and abs(zeta.mean() - 1) <= 1e-10
