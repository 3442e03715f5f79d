"""Numerical checks of the Gaussian regularity condition and the Taylor lower bound."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, backward, matmul, reset_tape, square

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ToyGaussianQ:
    """q(x | z) = N(mean_map @ z + mean_bias, diag(variance))."""

    mean_map: np.ndarray
    mean_bias: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        self.mean_map = np.atleast_2d(np.asarray(self.mean_map, dtype=np.float64))
        self.mean_bias = np.asarray(self.mean_bias, dtype=np.float64).reshape(-1)
        self.variance = np.asarray(self.variance, dtype=np.float64).reshape(-1)
        if np.any(self.variance <= 0):
            raise ValueError("variances must be strictly positive")

    @property
    def dim(self) -> int:
        return len(self.variance)

    @classmethod
    def random(cls, d: int, d_z: int, rng: np.random.Generator):
        return cls(rng.normal(size=(d, d_z)) / np.sqrt(d_z), rng.normal(size=d), rng.uniform(0.1, 3.0, d))

    def mu(self, z: np.ndarray) -> np.ndarray:
        return np.atleast_2d(z) @ self.mean_map.T + self.mean_bias

    def log_density(self, x, z) -> Tensor:
        """Per-row log q(x | z) on the tape (x may be a Tensor)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        mu = np.broadcast_to(self.mu(z), x.shape)
        resid = x - mu
        quad = matmul(square(resid), (1.0 / self.variance).reshape(-1, 1))
        const = -0.5 * (self.dim * LOG_2PI + np.sum(np.log(self.variance)))
        return quad * -0.5 + const

    def log_density_np(self, x, z) -> np.ndarray:
        r = np.atleast_2d(x) - self.mu(z)
        return -0.5 * (self.dim * LOG_2PI + np.sum(np.log(self.variance)) + np.sum(r * r / self.variance, axis=-1))

    def grad_log_density(self, x, z) -> np.ndarray:
        """Closed form: -(x - mu(z)) / variance."""
        return -(np.atleast_2d(x) - self.mu(z)) / self.variance

    def sample(self, z, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mu(z) + np.sqrt(self.variance) * rng.standard_normal((n, self.dim))


@dataclass
class CheckReport:
    check: str
    trials: int
    worst_margin: float
    passed: bool
    detail: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def autodiff_grad(q: ToyGaussianQ, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    xt = Tensor(x, requires_grad=True)
    reset_tape()
    grads = backward(q.log_density(xt, z).sum())
    return grads[xt]


def check_gradient_identity(q: ToyGaussianQ, z: np.ndarray, samples: np.ndarray, tol: float = 1e-10) -> CheckReport:
    """Max |autodiff grad - (-(x - mu)/var)| over the samples."""
    samples = np.atleast_2d(samples)
    dev = float(np.max(np.abs(autodiff_grad(q, samples, z) - q.grad_log_density(samples, z))))
    return CheckReport("gradient_identity", len(samples), tol - dev, dev < tol, {"max_deviation": dev})


def check_regularity_expectation(q: ToyGaussianQ, z: np.ndarray, mc_samples: int = 100_000, seed: int = 0,
                                 rel_tol: float = 0.05) -> CheckReport:
    """Monte-Carlo E|grad log q(X|z)|^2 for X ~ q(.|z) against trace(Sigma^-1)."""
    rng = np.random.default_rng(seed)
    x = q.sample(z, mc_samples, rng)
    g = autodiff_grad(q, x, z)
    estimate = float(np.mean(np.sum(g * g, axis=1)))
    closed = float(np.sum(1.0 / q.variance))
    rel = abs(estimate - closed) / closed
    return CheckReport("regularity_expectation", mc_samples, rel_tol - rel, rel < rel_tol,
                       {"estimate": estimate, "closed_form": closed, "relative_error": rel})


def segment_grad_sup(q: ToyGaussianQ, start: np.ndarray, end: np.ndarray, cond: np.ndarray, points: int = 100):
    """Max of |grad log q(c | y)| over ``points`` grid points c on each [start_i, end_i], all y in ``cond``."""
    ts = np.linspace(0.0, 1.0, points)
    mus = q.mu(cond)  # [m, d]
    best = 0.0
    for t in ts:
        c = (1.0 - t) * start + t * end  # [n, d]
        r = (c[:, None, :] - mus[None, :, :]) / q.variance
        best = max(best, float(np.sqrt(np.max(np.sum(r * r, axis=-1)))))
    return best


def taylor_bound_trial(q: ToyGaussianQ, f0, fstar, f, x: np.ndarray, x_prime: np.ndarray, points: int = 100):
    """Returns (lhs, rhs) with lhs = mean log q(f*(X) | f(X')) and
    rhs = mean log q(f0(X) | f(X')) - C_hat * d_hat."""
    z0, zs, zc = f0(x), fstar(x), f(x_prime)
    lhs = float(np.mean([q.log_density_np(zs, y[None, :]) for y in zc]))
    base = float(np.mean([q.log_density_np(z0, y[None, :]) for y in zc]))
    d_hat = float(np.max(np.linalg.norm(zs - z0, axis=1)))
    c_hat = segment_grad_sup(q, z0, zs, zc, points) if d_hat > 0 else 0.0
    return lhs, base - c_hat * d_hat, {"d_hat": d_hat, "c_hat": c_hat}


def _random_map(rng, d_in, d_out):
    W = rng.normal(size=(d_in, d_out)) / np.sqrt(d_in)
    b = rng.normal(size=d_out) * 0.5
    return lambda x: np.tanh(x @ W + b)


def check_taylor_lower_bound(trials: int = 1000, offset: float | None = 0.1, seed: int = 0, d: int = 3,
                             d_in: int = 2, n: int = 16, points: int = 100, variance: float | None = None,
                             slack: float = 1e-9) -> CheckReport:
    """Randomized trials of lhs >= rhs - slack.

    ``offset`` fixes f* = f0 + offset (None draws an unrelated random f*);
    ``variance`` fixes a constant q variance (None draws random ones).
    """
    rng = np.random.default_rng(seed)
    worst = math.inf
    violations = 0
    max_gap = 0.0
    for _ in range(trials):
        q = ToyGaussianQ.random(d, d, rng)
        if variance is not None:
            q.variance = np.full(d, float(variance))
        f0 = _random_map(rng, d_in, d)
        f = _random_map(rng, d_in, d)
        if offset is None:
            fstar = _random_map(rng, d_in, d)
        else:
            shift = offset * np.ones(d)
            fstar = lambda x, f0=f0, shift=shift: f0(x) + shift  # noqa: E731
        x = rng.uniform(-1.0, 1.0, (n, d_in))
        x_prime = rng.uniform(-1.0, 1.0, (n, d_in))
        lhs, rhs, _ = taylor_bound_trial(q, f0, fstar, f, x, x_prime, points)
        margin = lhs - rhs
        worst = min(worst, margin)
        max_gap = max(max_gap, margin)
        if lhs < rhs - slack:
            violations += 1
    return CheckReport("taylor_lower_bound", trials, worst, violations == 0,
                       {"violations": violations, "offset": offset, "largest_gap": max_gap})


def run_all(seed: int = 0, trials: int = 1000, mc_samples: int = 100_000) -> list[CheckReport]:
    rng = np.random.default_rng(seed)
    q = ToyGaussianQ.random(4, 3, rng)
    z = rng.normal(size=3)
    reports = [
        check_gradient_identity(q, z, q.sample(z, 1000, rng)),
        check_regularity_expectation(q, z, mc_samples, seed),
        check_taylor_lower_bound(trials, offset=0.1, seed=seed, variance=1.0),
        check_taylor_lower_bound(trials, offset=10.0, seed=seed + 1),
        check_taylor_lower_bound(trials, offset=None, seed=seed + 2),
    ]
    return reports
