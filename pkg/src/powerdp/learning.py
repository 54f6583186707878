"""Local objectives, gradient clipping and projection onto the L2-ball constraint set."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp, softmax

from powerdp.errors import DimensionMismatchError, SingularSystemError


@dataclass(frozen=True)
class ConstraintSet:
    """Closed L2 ball of ``radius`` centered at the origin."""

    radius: float = 10.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius

    def contains(self, x: np.ndarray, tol: float = 1e-12) -> bool:
        return float(np.linalg.norm(x)) <= self.radius * (1.0 + tol)


def project(x: np.ndarray, omega: ConstraintSet) -> np.ndarray:
    """Euclidean projection onto the ball: radial scaling when outside."""
    x = np.asarray(x, dtype=float)
    norm = np.linalg.norm(x)
    # a few ulps of slack so projecting a projected point is a no-op
    if norm <= omega.radius * (1.0 + 4 * np.finfo(float).eps):
        return x.copy()
    return x * (omega.radius / norm)


def clip_gradient(g: np.ndarray, G: float) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    norm = np.linalg.norm(g)
    if norm <= G:
        return g.copy()
    return g * (G / norm)


# ---------------------------------------------------------------------------
# multinomial logistic regression


def _with_bias(features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=float)
    return np.hstack([features, np.ones((features.shape[0], 1))])


def _unpack(x: np.ndarray, features: np.ndarray, labels: np.ndarray, num_classes: int):
    features = np.asarray(features, dtype=float)
    if features.ndim != 2:
        raise DimensionMismatchError("features must be a 2-D array")
    n, d = features.shape
    labels = np.asarray(labels, dtype=int).reshape(-1)
    if labels.size != n:
        raise DimensionMismatchError(f"{n} feature rows but {labels.size} labels")
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        raise DimensionMismatchError(f"labels must lie in [0, {num_classes})")
    x = np.asarray(x, dtype=float)
    if x.size != num_classes * (d + 1):
        raise DimensionMismatchError(
            f"model has {x.size} coefficients, expected num_classes*(d+1) = {num_classes * (d + 1)}"
        )
    return x.reshape(num_classes, d + 1), features, labels


def multinomial_logistic_loss(x, batch, num_classes: int, mu: float = 0.0) -> float:
    """Mean cross-entropy over ``batch = (features, labels)`` plus (mu/2)||x||^2.

    ``x`` holds one weight row of length d+1 (bias last) per class, flattened.
    """
    w, features, labels = _unpack(x, *batch, num_classes)
    reg = 0.5 * mu * float(np.dot(x, x))
    if labels.size == 0:
        return reg
    logits = _with_bias(features) @ w.T
    nll = logsumexp(logits, axis=1) - logits[np.arange(labels.size), labels]
    return float(nll.mean()) + reg


def multinomial_logistic_gradient(x, batch, num_classes: int, mu: float = 0.0) -> np.ndarray:
    w, features, labels = _unpack(x, *batch, num_classes)
    grad = mu * np.asarray(x, dtype=float).reshape(w.shape)
    n = labels.size
    if n:
        aug = _with_bias(features)
        probs = softmax(aug @ w.T, axis=1)
        probs[np.arange(n), labels] -= 1.0
        grad = grad + probs.T @ aug / n
    return grad.reshape(-1)


# ---------------------------------------------------------------------------
# tasks


class LearningTask:
    """K local objectives f_i over a shared constraint set.

    Subclasses provide ``loss(i, x)``, ``gradient(i, x)``, ``dim``, ``mu`` and
    optionally an ``optimum`` of F = sum_i f_i over the constraint set.
    """

    num_nodes: int
    dim: int
    mu: float
    omega: ConstraintSet

    def loss(self, i: int, x: np.ndarray) -> float:
        raise NotImplementedError

    def gradient(self, i: int, x: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        raise NotImplementedError

    def objective(self, x: np.ndarray) -> float:
        return float(sum(self.loss(i, x) for i in range(self.num_nodes)))

    @property
    def optimum(self) -> np.ndarray | None:
        return None

    def accuracy(self, x: np.ndarray) -> float | None:
        return None


class QuadraticTask(LearningTask):
    """f_i(x) = 0.5 x^T Q_i x - b_i^T x with an exact constrained minimizer."""

    def __init__(self, qs, bs, omega: ConstraintSet | None = None):
        self.qs = [np.asarray(q, dtype=float) for q in qs]
        self.bs = [np.asarray(b, dtype=float).reshape(-1) for b in bs]
        if len(self.qs) != len(self.bs) or not self.qs:
            raise DimensionMismatchError("need one (Q_i, b_i) pair per node")
        self.dim = self.bs[0].size
        for q, b in zip(self.qs, self.bs):
            if q.shape != (self.dim, self.dim) or b.size != self.dim:
                raise DimensionMismatchError("every Q_i must be m x m and every b_i of length m")
        self.num_nodes = len(self.qs)
        self.omega = omega or ConstraintSet()
        self.mu = float(min(np.linalg.eigvalsh(0.5 * (q + q.T)).min() for q in self.qs))
        self.q_sum = sum(self.qs)
        self.b_sum = sum(self.bs)
        self._optimum = self._constrained_minimizer()

    def _constrained_minimizer(self) -> np.ndarray:
        q = 0.5 * (self.q_sum + self.q_sum.T)
        w, v = np.linalg.eigh(q)
        if w.min() <= 1e-12 * max(1.0, abs(w).max()):
            raise SingularSystemError("sum of Q_i is not positive definite")
        coef = v.T @ self.b_sum
        x_free = v @ (coef / w)
        r = self.omega.radius
        if np.linalg.norm(x_free) <= r:
            return x_free
        # boundary solution: (Q + lam I) x = b with ||x|| = r, lam > 0
        def excess(lam):
            return np.linalg.norm(coef / (w + lam)) - r

        hi = np.linalg.norm(self.b_sum) / r
        lam = brentq(excess, 0.0, hi, xtol=1e-15, rtol=1e-15, maxiter=500)
        return project(v @ (coef / (w + lam)), self.omega)

    def loss(self, i, x):
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.qs[i] @ x - self.bs[i] @ x)

    def gradient(self, i, x, rng=None):
        return self.qs[i] @ np.asarray(x, dtype=float) - self.bs[i]

    def objective(self, x):
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.q_sum @ x - self.b_sum @ x)

    @property
    def optimum(self):
        return self._optimum


def quadratic_task(qs, bs, omega: ConstraintSet | None = None) -> QuadraticTask:
    return QuadraticTask(qs, bs, omega)


def random_quadratic_task(num_nodes: int, dim: int, rng: np.random.Generator,
                          eig_range: tuple[float, float] = (1.0, 3.0), b_scale: float = 1.0,
                          omega: ConstraintSet | None = None) -> QuadraticTask:
    """Heterogeneous well-conditioned quadratics (random rotations, eigenvalues in ``eig_range``)."""
    qs, bs = [], []
    for _ in range(num_nodes):
        basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        eig = rng.uniform(*eig_range, size=dim)
        qs.append((basis * eig) @ basis.T)
        bs.append(b_scale * rng.standard_normal(dim))
    return QuadraticTask(qs, bs, omega)


class LogisticTask(LearningTask):
    """Per-node multinomial logistic regression with ridge ``mu``.

    ``clients`` holds one ``(features, labels)`` pair per node; ``test`` is
    the shared evaluation set. ``batch_size=None`` uses the full local batch.
    """

    def __init__(self, clients, num_classes: int, test=None, mu: float = 1e-3,
                 omega: ConstraintSet | None = None, batch_size: int | None = None):
        self.clients = [(np.asarray(f, dtype=float), np.asarray(y, dtype=int)) for f, y in clients]
        self.num_nodes = len(self.clients)
        self.num_classes = int(num_classes)
        self.feature_dim = self.clients[0][0].shape[1]
        self.dim = self.num_classes * (self.feature_dim + 1)
        self.test = test
        self.mu = float(mu)
        self.omega = omega or ConstraintSet()
        self.batch_size = batch_size

    def loss(self, i, x):
        return multinomial_logistic_loss(x, self.clients[i], self.num_classes, self.mu)

    def gradient(self, i, x, rng=None):
        features, labels = self.clients[i]
        if self.batch_size is not None and rng is not None and self.batch_size < labels.size:
            idx = rng.choice(labels.size, size=self.batch_size, replace=False)
            features, labels = features[idx], labels[idx]
        return multinomial_logistic_gradient(x, (features, labels), self.num_classes, self.mu)

    def accuracy(self, x):
        if self.test is None:
            return None
        features, labels = self.test
        w = np.asarray(x, dtype=float).reshape(self.num_classes, self.feature_dim + 1)
        pred = np.argmax(_with_bias(features) @ w.T, axis=1)
        return float(np.mean(pred == np.asarray(labels)))

    def _smoothness(self) -> float:
        # softmax cross-entropy Hessian is bounded by 0.5 * E[a a^T]
        total = 0.0
        for f, _ in self.clients:
            if len(f):
                aug = _with_bias(f)
                total += 0.5 * float(np.linalg.eigvalsh(aug.T @ aug / len(f)).max())
        return total + self.num_nodes * self.mu

    def _full_gradient(self, x):
        return sum(multinomial_logistic_gradient(x, c, self.num_classes, self.mu) for c in self.clients)

    @cached_property
    def optimum(self) -> np.ndarray:
        """Minimizer of F over the ball by accelerated projected gradient with restarts.

        Stops when the gradient-mapping norm drops below 1e-8.
        """
        lip = self._smoothness()
        x = np.zeros(self.dim)
        y, mom = x.copy(), 1.0
        for _ in range(200_000):
            x_next = project(y - self._full_gradient(y) / lip, self.omega)
            if lip * np.linalg.norm(x_next - y) <= 1e-8:
                return x_next
            mom_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * mom * mom))
            step = x_next - x
            if np.dot(y - x_next, step) > 0:  # adaptive restart
                mom_next, y = 1.0, x_next.copy()
            else:
                y = x_next + (mom - 1.0) / mom_next * step
            x, mom = x_next, mom_next
        return x
