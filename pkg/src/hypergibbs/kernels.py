"""Proximal maps, conditional samplers and the separable penalty terms built on them.

All functions are elementwise (or groupwise) and allocate fresh arrays. They
are the only arithmetic a chain performs outside the sparse products, and the
serial and distributed samplers call them with identical per-element inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def prox_nonneg(q: np.ndarray, step: float = 1.0) -> np.ndarray:
    """Projection onto the nonnegative orthant (the step is irrelevant)."""
    return np.maximum(q, 0.0)


def prox_poisson(q: np.ndarray, y: np.ndarray, step: float) -> np.ndarray:
    """Prox of ``step * sum(z - y log z)`` over ``z >= 0``.

    The positive root of ``z^2 - (q - step) z - step*y = 0``, evaluated in the
    form that avoids cancellation when ``q - step`` is negative.
    """
    a = np.asarray(q, dtype=np.float64) - step
    y = np.asarray(y, dtype=np.float64)
    disc = np.sqrt(a * a + 4.0 * step * y)
    pos = a >= 0
    out = np.empty(np.broadcast(a, y).shape)
    np.divide(2.0 * step * y, disc - a, out=out, where=~pos)
    np.multiply(0.5, a + disc, out=out, where=pos)
    return out


def prox_group_l21(q: np.ndarray, weight: float, group: int = 2) -> np.ndarray:
    """Group soft-thresholding: prox of ``weight * sum_g ||q_g||_2``.

    ``q`` is flat with consecutive groups of ``group`` entries.
    """
    g = np.asarray(q, dtype=np.float64).reshape(-1, group)
    norms = np.sqrt(np.sum(g * g, axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > weight, 1.0 - weight / norms, 0.0)
    return (g * scale[:, None]).ravel()


def grad_phi(v: np.ndarray, z: np.ndarray, u: np.ndarray, alpha: float) -> np.ndarray:
    """Gradient in ``v`` of the coupling ``||v - z + u||^2 / (2 alpha^2)``."""
    return (v - z + u) / (alpha * alpha)


def psgla_step(x, grad_h, delta, noise, gamma: float, prox_f):
    """One proximal stochastic gradient Langevin step on the image.

    ``prox_f(x - gamma*grad_h - gamma*delta + sqrt(2 gamma) noise, gamma)``;
    ``grad_h`` may be ``None`` when there is no smooth term.
    """
    q = x - gamma * delta if grad_h is None else x - gamma * grad_h - gamma * delta
    q = q + math.sqrt(2.0 * gamma) * noise
    return prox_f(q, gamma)


def psgla_z_step(z, v, u, alpha: float, eta: float, noise, prox_g):
    """Langevin step on a splitting variable, targeting its full conditional.

    The drift is the gradient in ``z`` of ``||v - z + u||^2 / (2 alpha^2)``,
    which vanishes at ``z = v + u``.
    """
    q = z - (eta / (alpha * alpha)) * (z - v - u) + math.sqrt(2.0 * eta) * noise
    return prox_g(q, eta)


def sample_u(v, z, alpha: float, beta: float, noise):
    """Exact draw of an auxiliary variable from its Gaussian conditional.

    Mean ``beta^2 (z - v) / (alpha^2 + beta^2)`` and variance
    ``alpha^2 beta^2 / (alpha^2 + beta^2)``.
    """
    a2, b2 = alpha * alpha, beta * beta
    return (b2 / (a2 + b2)) * (z - v) + math.sqrt(a2 * b2 / (a2 + b2)) * noise


# ---------------------------------------------------------------------------
# separable terms
# ---------------------------------------------------------------------------


class Term:
    """A separable penalty with a value, a prox and per-element restriction."""

    def value(self, z: np.ndarray) -> float:
        raise NotImplementedError

    def prox(self, q: np.ndarray, step: float) -> np.ndarray:
        raise NotImplementedError

    def restrict(self, index: np.ndarray) -> Term:
        """The same term on the scalar entries ``index`` (in that order)."""
        return self


class ZeroTerm(Term):
    def value(self, z):
        return 0.0

    def prox(self, q, step):
        return np.array(q, dtype=np.float64, copy=True)


class NonNegative(Term):
    """Indicator of the nonnegative orthant."""

    def value(self, z):
        return 0.0 if np.all(np.asarray(z) >= 0) else math.inf

    def prox(self, q, step):
        return prox_nonneg(q, step)


@dataclass(eq=False)
class PoissonLikelihood(Term):
    """Negative Poisson log-likelihood ``sum(z - y log z)`` with counts ``y``."""

    y: np.ndarray

    def __post_init__(self):
        self.y = np.ascontiguousarray(self.y, dtype=np.float64).ravel()

    def value(self, z):
        z = np.asarray(z, dtype=np.float64)
        if np.any(z < 0) or np.any((self.y > 0) & (z <= 0)):
            return math.inf
        pos = self.y > 0
        return float(np.sum(z) - np.sum(self.y[pos] * np.log(z[pos])))

    def prox(self, q, step):
        return prox_poisson(q, self.y, step)

    def restrict(self, index):
        return PoissonLikelihood(self.y[np.asarray(index)])


@dataclass(eq=False)
class GroupL21(Term):
    """``weight * sum ||z_g||_2`` over consecutive groups of ``group`` entries."""

    weight: float
    group: int = 2

    def value(self, z):
        g = np.asarray(z, dtype=np.float64).reshape(-1, self.group)
        return float(self.weight * np.sum(np.sqrt(np.sum(g * g, axis=1))))

    def prox(self, q, step):
        return prox_group_l21(q, step * self.weight, self.group)


@dataclass(eq=False)
class Quadratic(Term):
    """``sum w (z - c)^2 / 2``, usable both as a prox term and as a smooth term."""

    center: np.ndarray
    weight: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        self.center = np.atleast_1d(np.asarray(self.center, dtype=np.float64))
        self.weight = np.atleast_1d(np.asarray(self.weight, dtype=np.float64))

    def value(self, z):
        return float(np.sum(self.weight * (np.asarray(z) - self.center) ** 2) / 2.0)

    def grad(self, z):
        return self.weight * (z - self.center)

    def prox(self, q, step):
        return (q + step * self.weight * self.center) / (1.0 + step * self.weight)

    @property
    def lipschitz(self) -> float:
        return float(np.max(self.weight))

    def restrict(self, index):
        index = np.asarray(index)
        c = self.center if self.center.size == 1 else self.center[index]
        w = self.weight if self.weight.size == 1 else self.weight[index]
        return Quadratic(c, w)


@dataclass
class AxdaParams:
    """Coupling tolerances and step sizes of the split sampler.

    Attributes
    ----------
    alpha, beta, eta : tuple of float
        Per splitting term: coupling tolerance, auxiliary-variable tolerance and
        Langevin step on the splitting variable.
    gamma : float
        Langevin step on the image.
    lambda_h : float
        Lipschitz constant of the smooth term's gradient (0 when absent).
    """

    alpha: tuple
    beta: tuple
    eta: tuple
    gamma: float
    lambda_h: float = 0.0

    def __post_init__(self):
        self.alpha = tuple(float(a) for a in self.alpha)
        self.beta = tuple(float(b) for b in self.beta)
        self.eta = tuple(float(e) for e in self.eta)
        if not (len(self.alpha) == len(self.beta) == len(self.eta)):
            raise ValueError("alpha, beta and eta need one entry per splitting term")
        if min(self.alpha + self.beta + self.eta + (self.gamma,)) <= 0:
            raise ValueError("tolerances and step sizes must be positive")

    def gamma_bound(self, norms_sq) -> float:
        return 1.0 / (self.lambda_h + sum(n / a ** 2 for n, a in zip(norms_sq, self.alpha)))

    def eta_bounds(self) -> tuple:
        return tuple(a ** 2 for a in self.alpha)

    def violations(self, norms_sq) -> list[str]:
        out = []
        if self.gamma >= self.gamma_bound(norms_sq):
            out.append(f"gamma={self.gamma} not below {self.gamma_bound(norms_sq)}")
        for i, (e, b) in enumerate(zip(self.eta, self.eta_bounds())):
            if e >= b:
                out.append(f"eta[{i}]={e} not below {b}")
        return out
