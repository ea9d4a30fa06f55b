"""Plaintext logistic-regression reference used as the oracle for the protocol.

Labels are in {-1, +1}. Feature matrices are ``n x d`` with one sample per row.
Iterations are numbered ``t = 1..T``; ``batches[t - 1]`` is the batch of step t
and ``thetas[t]`` the parameter after it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np


class ApproxScheme(str, Enum):
    TAYLOR1 = "taylor1"
    MINIMAX3 = "minimax3"
    PIECEWISE = "piecewise"


# Constant in front of sum_i f_i x_i for each scheme.
GRADIENT_SCALE = {
    ApproxScheme.TAYLOR1: 0.25,
    ApproxScheme.MINIMAX3: 1.0,
    ApproxScheme.PIECEWISE: 1.0,
}


def coefficient_from_inner(scheme: ApproxScheme, z, y):
    """Scheme coefficient as a function of the full inner product ``z``."""
    scheme = ApproxScheme(scheme)
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    if scheme is ApproxScheme.TAYLOR1:
        return z - 2.0 * y
    if scheme is ApproxScheme.MINIMAX3:
        return -0.004 * z**3 + 0.197 * z - 0.5 * y
    # |z| = 0.5 exactly falls into the saturated branch.
    inner = np.abs(z) < 0.5
    wrong_side = y * z <= -0.5
    return np.where(inner, z - 0.5 * y, np.where(wrong_side, -y, 0.0))


def coefficient(scheme: ApproxScheme, theta, x, y):
    if np.any(np.abs(np.asarray(y)) != 1):
        raise ValueError("labels must be -1 or +1")
    return coefficient_from_inner(scheme, np.asarray(x, dtype=float) @ np.asarray(theta, dtype=float), y)


def minibatch_gradient(scheme: ApproxScheme, theta, X, y, batch) -> np.ndarray:
    batch = np.asarray(batch, dtype=int)
    if batch.size == 0:
        raise ValueError("batch must be nonempty")
    xb = X[batch]
    f = coefficient_from_inner(scheme, xb @ theta, y[batch])
    return GRADIENT_SCALE[ApproxScheme(scheme)] / batch.size * (xb.T @ f)


@dataclass(frozen=True)
class BatchSchedule:
    n: int
    s: int
    epochs: int
    batches: np.ndarray  # shape (T, s)

    @property
    def m(self) -> int:
        return self.n // self.s

    @property
    def T(self) -> int:
        return self.batches.shape[0]

    def epoch_of(self, t: int) -> int:
        """Zero-based epoch of iteration ``t`` (1-based)."""
        return (t - 1) // self.m

    def truncated(self, T: int) -> "BatchSchedule":
        return BatchSchedule(self.n, self.s, math.ceil(T / self.m), self.batches[:T])


def make_schedule(n: int, s: int, epochs: int, seed) -> BatchSchedule:
    """Fresh uniform permutation per epoch, cut into ``n / s`` batches."""
    if s < 1 or n % s:
        raise ValueError(f"batch size {s} must divide n = {n}")
    rng = np.random.default_rng(seed)
    rows = [rng.permutation(n).reshape(n // s, s) for _ in range(epochs)]
    batches = np.concatenate(rows) if rows else np.empty((0, s), dtype=int)
    return BatchSchedule(n=n, s=s, epochs=epochs, batches=batches)


@dataclass
class Trajectory:
    thetas: np.ndarray  # (T + 1, d)
    coefficients: np.ndarray  # (T, s): f_{i,t} for the batch members of step t
    inner: np.ndarray | None = None  # (T + 1, n): thetas[t] @ x_i

    @property
    def T(self) -> int:
        return self.thetas.shape[0] - 1


def learning_rates(eta, T: int) -> np.ndarray:
    rates = np.broadcast_to(np.asarray(eta, dtype=float), (T,)).copy()
    if np.any(rates < 0):
        raise ValueError("learning rate must be non-negative")
    return rates


def train_plaintext(
    scheme: ApproxScheme,
    X,
    y,
    schedule: BatchSchedule,
    eta,
    theta0,
    record_inner: bool = True,
) -> Trajectory:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] != schedule.n:
        raise ValueError("schedule does not match the number of samples")
    scheme = ApproxScheme(scheme)
    rates = learning_rates(eta, schedule.T)
    scale = GRADIENT_SCALE[scheme] / schedule.s
    theta = np.array(theta0, dtype=float)
    thetas = np.empty((schedule.T + 1, theta.size))
    thetas[0] = theta
    coeffs = np.empty((schedule.T, schedule.s))
    for t in range(1, schedule.T + 1):
        batch = schedule.batches[t - 1]
        xb = X[batch]
        f = coefficient_from_inner(scheme, xb @ theta, y[batch])
        coeffs[t - 1] = f
        theta = theta - rates[t - 1] * scale * (xb.T @ f)
        thetas[t] = theta
    inner = thetas @ X.T if record_inner else None
    return Trajectory(thetas=thetas, coefficients=coeffs, inner=inner)


def surrogate_loss(theta, X, y) -> float:
    r = np.asarray(X) @ np.asarray(theta) - 2.0 * np.asarray(y)
    return float(r @ r) / (8 * len(r))


def surrogate_gradient(theta, X, y) -> np.ndarray:
    X = np.asarray(X)
    r = X @ np.asarray(theta) - 2.0 * np.asarray(y)
    return X.T @ r / (4 * len(r))


def smoothness_check(X) -> float:
    """Largest eigenvalue of ``(1/4n) sum x x^T``; at most 1/4 for unit-bounded rows."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("need a nonempty n x d matrix")
    if not np.any(X):
        return 0.0
    return float(np.linalg.eigvalsh(X.T @ X / (4 * X.shape[0]))[-1])


def init_theta(kind: str, d: int, seed=None, sigma0: float | None = None) -> np.ndarray:
    """Initial parameters: ``zero``, ``xavier``, ``kaiming`` or ``gaussian``.

    Xavier is uniform on +-sqrt(6 / (d + 1)) and Kaiming is normal with variance
    2/d, treating the model as a single layer with one output. ``gaussian`` uses
    standard deviation ``sigma0``, defaulting to 1/sqrt(d).
    """
    rng = np.random.default_rng(seed)
    if kind == "zero":
        return np.zeros(d)
    if kind == "xavier":
        a = math.sqrt(6.0 / (d + 1))
        return rng.uniform(-a, a, d)
    if kind == "kaiming":
        return rng.normal(0.0, math.sqrt(2.0 / d), d)
    if kind == "gaussian":
        return rng.normal(0.0, sigma0 if sigma0 is not None else 1.0 / math.sqrt(d), d)
    raise ValueError(f"unknown init scheme {kind!r}")


def accuracy(theta, X, y) -> float:
    pred = np.where(np.asarray(X) @ np.asarray(theta) >= 0, 1.0, -1.0)
    return float(np.mean(pred == np.asarray(y)))


def split_theta(theta: np.ndarray, dims: Sequence[int]) -> list[np.ndarray]:
    bounds = np.cumsum([0, *dims])
    return [theta[..., bounds[k] : bounds[k + 1]] for k in range(len(dims))]
