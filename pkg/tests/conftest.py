import numpy as np
import pytest

from riskgda.sde import SdeModel


class GBM(SdeModel):
    """dX = mu X dt + s X dW, with the exact solution as strong-error oracle."""

    n, m, d = 1, 1, 1

    def __init__(self, mu=0.05, s=0.2):
        self.mu, self.s = mu, s

    def drift(self, t, x, u):
        return self.mu * x + u

    def drift_jacobians(self, t, x, u):
        M = x.shape[0]
        return np.full((M, 1, 1), self.mu), np.ones((M, 1, 1))

    def diffusion(self, t, x):
        return (self.s * x)[:, :, None]

    def diffusion_jacobian(self, t, x):
        return np.full((x.shape[0], 1, 1, 1), self.s)


class LinearScalar(SdeModel):
    """dX = (a X + u) dt + sigma dW."""

    n, m, d = 1, 1, 1
    control_affine = True
    state_dependent_noise = False

    def __init__(self, a=0.3, sigma=0.0):
        self.a, self.sigma = a, sigma

    def drift(self, t, x, u):
        return self.a * x + u

    def drift_jacobians(self, t, x, u):
        M = x.shape[0]
        return np.full((M, 1, 1), self.a), np.ones((M, 1, 1))

    def diffusion(self, t, x):
        return np.full((x.shape[0], 1, 1), self.sigma)

    def diffusion_jacobian(self, t, x):
        return np.zeros((x.shape[0], 1, 1, 1))


class Pendulum(SdeModel):
    """Damped pendulum with state-dependent noise on two channels (n=2, m=1, d=2)."""

    n, m, d = 2, 1, 2

    def __init__(self, damping=0.2, s=0.1):
        self.c, self.s = damping, s

    def drift(self, t, x, u):
        return np.stack([x[:, 1], -np.sin(x[:, 0]) - self.c * x[:, 1] + u[:, 0]], axis=1)

    def drift_jacobians(self, t, x, u):
        M = x.shape[0]
        bx = np.zeros((M, 2, 2))
        bx[:, 0, 1] = 1.0
        bx[:, 1, 0] = -np.cos(x[:, 0])
        bx[:, 1, 1] = -self.c
        bu = np.zeros((M, 2, 1))
        bu[:, 1, 0] = 1.0
        return bx, bu

    def diffusion(self, t, x):
        M = x.shape[0]
        out = np.zeros((M, 2, 2))
        out[:, 1, 0] = self.s * np.sin(x[:, 0])
        out[:, 0, 1] = self.s * x[:, 1]
        return out

    def diffusion_jacobian(self, t, x):
        M = x.shape[0]
        out = np.zeros((M, 2, 2, 2))
        out[:, 0, 1, 0] = self.s * np.cos(x[:, 0])
        out[:, 1, 0, 1] = self.s
        return out


class Frozen(SdeModel):
    n, m, d = 2, 1, 1

    def drift(self, t, x, u):
        return np.zeros_like(x)

    def drift_jacobians(self, t, x, u):
        M = x.shape[0]
        return np.zeros((M, 2, 2)), np.zeros((M, 2, 1))

    def diffusion(self, t, x):
        return np.zeros((x.shape[0], 2, 1))

    def diffusion_jacobian(self, t, x):
        return np.zeros((x.shape[0], 1, 2, 2))


def fd_jacobians(model, t, x, u, h=1e-5):
    """Central-difference drift and diffusion Jacobians at a batch of points."""
    M, n = x.shape
    m = u.shape[1]
    bx = np.zeros((M, n, n))
    bu = np.zeros((M, n, m))
    cx = np.zeros((M, model.d, n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h * (1 + np.linalg.norm(x, axis=1, keepdims=True).max())
        step = e[j]
        bx[:, :, j] = (model.drift(t, x + e, u) - model.drift(t, x - e, u)) / (2 * step)
        dsig = (model.diffusion(t, x + e) - model.diffusion(t, x - e)) / (2 * step)  # (M, n, d)
        cx[:, :, :, j] = np.transpose(dsig, (0, 2, 1))
    for j in range(m):
        e = np.zeros(m)
        e[j] = h
        bu[:, :, j] = (model.drift(t, x, u + e) - model.drift(t, x, u - e)) / (2 * h)
    return bx, bu, cx


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
