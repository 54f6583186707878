"""Gaussian mechanism, per-link privacy budgets over the MAC, and basic composition."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

import numpy as np

from powerdp.errors import InvalidDeltaError, NotNeighborsError

if TYPE_CHECKING:
    from powerdp.allocation import PowerAllocation
    from powerdp.topology import NetworkTopology

# Explicit marker for "no noise reaches the receiver, so no DP guarantee".
EPS_UNBOUNDED = math.inf

SCHEDULE_KINDS = ("const", "inv_sqrt", "inv_t")


@dataclass(frozen=True)
class Schedule:
    """Step-indexed positive sequence ``scale * t^-power`` for t >= 1."""

    kind: str = "inv_sqrt"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if not self.scale > 0:
            raise ValueError("schedule scale must be positive")

    def __call__(self, t: int) -> float:
        if t < 1:
            raise ValueError("schedules are defined for t >= 1")
        if self.kind == "const":
            return self.scale
        if self.kind == "inv_sqrt":
            return self.scale / math.sqrt(t)
        return self.scale / t

    def to_dict(self) -> dict:
        return {"kind": self.kind, "scale": self.scale}


@dataclass(frozen=True)
class PrivacyParams:
    """Per-epoch privacy configuration shared by every link.

    ``theta`` bounds 1/z_ii,t and is usually filled in by the allocation fixed
    point. When ``lr_mu`` is set, the learning rate is tied to theta as
    ``gamma_t = 1 / (lr_mu * theta * t)`` and ``lr_schedule`` is rebuilt by
    :meth:`with_theta`.
    """

    eps_max: float
    delta: float
    grad_bound: float
    theta: float | None = None
    sigma_schedule: Schedule = field(default_factory=lambda: Schedule("inv_sqrt", 10.0))
    lr_schedule: Schedule = field(default_factory=lambda: Schedule("inv_sqrt", 1.0))
    lr_mu: float | None = None

    def __post_init__(self):
        _check_delta(self.delta)
        if not self.eps_max > 0:
            raise ValueError("eps_max must be positive")
        if not self.grad_bound > 0:
            raise ValueError("grad_bound must be positive")
        if self.theta is not None and self.theta < 1:
            raise ValueError("theta bounds 1/z_ii <= 1/z with z_ii <= 1, so theta >= 1")
        if self.lr_mu is not None and self.theta is not None:
            object.__setattr__(self, "lr_schedule", Schedule("inv_t", 1.0 / (self.lr_mu * self.theta)))

    def with_theta(self, theta: float) -> "PrivacyParams":
        return replace(self, theta=float(theta))

    def sigma(self, t: int) -> float:
        return self.sigma_schedule(t)

    def gamma(self, t: int) -> float:
        if self.lr_mu is not None and self.theta is None:
            raise ValueError("learning rate tied to theta, but theta is not set")
        return self.lr_schedule(t)

    @property
    def proportional(self) -> bool:
        """True when sigma_t / gamma_t does not depend on t."""
        lr_kind = "inv_t" if self.lr_mu is not None else self.lr_schedule.kind
        return lr_kind == self.sigma_schedule.kind

    def to_dict(self) -> dict:
        return {
            "eps_max": self.eps_max,
            "delta": self.delta,
            "grad_bound": self.grad_bound,
            "theta": self.theta,
            "sigma_schedule": self.sigma_schedule.to_dict(),
            "lr_schedule": self.lr_schedule.to_dict(),
            "lr_mu": self.lr_mu,
        }


def _check_delta(delta: float) -> None:
    if not 0 < delta < 1:
        raise InvalidDeltaError(f"delta must lie in (0, 1), got {delta}")


def gaussian_factor(delta: float) -> float:
    """sqrt(2 ln(1.25 / delta))."""
    _check_delta(delta)
    return math.sqrt(2.0 * math.log(1.25 / delta))


def gaussian_sigma(sensitivity: float, eps: float, delta: float) -> float:
    """Noise std of the Gaussian mechanism: (sensitivity / eps) * sqrt(2 ln(1.25/delta))."""
    return sensitivity / eps * gaussian_factor(delta)


def gaussian_epsilon(sensitivity: float, sigma: float, delta: float) -> float:
    """Inverse of :func:`gaussian_sigma` in eps; unbounded when sigma is zero."""
    factor = gaussian_factor(delta)
    if sensitivity == 0:
        return 0.0
    if sigma == 0:
        return EPS_UNBOUNDED
    return sensitivity / sigma * factor


def sensitivity_bound(G: float, gamma_t: float, theta: float, gain: float, alpha: float, p: float) -> float:
    """Worst-case change of the signal node j contributes to a receiver, 2 G gamma theta |h| sqrt(alpha p)."""
    return 2.0 * G * gamma_t * theta * gain * math.sqrt(alpha * p)


def _require_theta(params: PrivacyParams) -> float:
    if params.theta is None:
        raise ValueError("privacy params need theta before budgets can be evaluated")
    return params.theta


def epsilon_ij(i: int, j: int, topology: "NetworkTopology", alloc: "PowerAllocation",
               params: PrivacyParams, t: int) -> float:
    """Per-epoch budget of receiver ``i`` with respect to sender ``j``.

    The noise masking j's contribution is everything superposed at i's
    receiver: sum over k in N_i of |h_ki|^2 beta_k p_k sigma_t^2.
    """
    gains = topology.gains
    if i == j or gains[j, i] <= 0:
        raise NotNeighborsError(f"node {j} is not a neighbor of node {i}")
    theta = _require_theta(params)
    alpha = np.asarray(alloc.alpha, dtype=float)
    beta = np.asarray(alloc.beta, dtype=float)
    p = np.asarray(alloc.p, dtype=float)
    delta_ij = sensitivity_bound(params.grad_bound, params.gamma(t), theta, gains[j, i], alpha[j], p[j])
    nbrs = gains[:, i] > 0
    sig = params.sigma(t)
    noise_var = float(np.sum(gains[nbrs, i] ** 2 * beta[nbrs] * p[nbrs])) * sig * sig
    return gaussian_epsilon(delta_ij, math.sqrt(noise_var), params.delta)


def epsilon_matrix(topology: "NetworkTopology", alloc: "PowerAllocation", params: PrivacyParams,
                   t: int) -> np.ndarray:
    """``eps[i, j]`` for every link j -> i; zero where there is no link."""
    theta = _require_theta(params)
    factor = gaussian_factor(params.delta)
    gains = topology.gains
    alpha = np.asarray(alloc.alpha, dtype=float)
    p = np.asarray(alloc.p, dtype=float)
    sens = 2.0 * params.grad_bound * params.gamma(t) * theta * gains.T * np.sqrt(alpha * p)[None, :]
    noise = params.sigma(t) * np.sqrt((gains**2).T @ ((1.0 - alpha) * p))
    with np.errstate(divide="ignore", invalid="ignore"):
        eps = np.where(sens > 0, sens / noise[:, None] * factor, 0.0)
    return eps


def unicast_epsilon_matrix(topology: "NetworkTopology", link_alpha: np.ndarray, p: np.ndarray,
                           params: PrivacyParams, t: int) -> np.ndarray:
    """Budgets when each link carries its own transmission (no superposition).

    ``link_alpha[j, i]`` is the fraction sender j spends on signal toward i.
    Only j's own noise masks j's contribution, so the gain cancels.
    """
    theta = _require_theta(params)
    k = topology.num_nodes
    eps = np.zeros((k, k))
    sig = params.sigma(t)
    for i, j in topology.links():
        a = float(link_alpha[j, i])
        h = topology.gains[j, i]
        delta_ij = sensitivity_bound(params.grad_bound, params.gamma(t), theta, h, a, p[j])
        eps[i, j] = gaussian_epsilon(delta_ij, h * math.sqrt((1.0 - a) * p[j]) * sig, params.delta)
    return eps


def max_link_epsilon(eps: np.ndarray, topology: "NetworkTopology") -> float:
    vals = eps[topology.adjacency.T]
    return float(vals.max()) if vals.size else 0.0


class PrivacyLedger:
    """Per-epoch record of link budgets for one run (single writer).

    Keeps the per-epoch maxima and an elementwise running maximum; the full
    K x K matrix of every epoch is retained only when ``audit`` is set.
    """

    def __init__(self, num_nodes: int, delta: float, audit: bool = False):
        _check_delta(delta)
        self.delta = delta
        self.audit = audit
        self.per_epoch_max: list[float] = []
        self.running_max = np.zeros((num_nodes, num_nodes))
        self.matrices: list[np.ndarray] = []
        self._spent = 0.0

    def record(self, eps: np.ndarray, links: np.ndarray | None = None) -> float:
        mask = links if links is not None else np.ones_like(eps, dtype=bool)
        vals = eps[mask]
        m = float(vals.max()) if vals.size else 0.0
        self.per_epoch_max.append(m)
        self._spent += m
        np.maximum(self.running_max, eps, out=self.running_max)
        if self.audit:
            self.matrices.append(eps.copy())
        return m

    @property
    def epochs_run(self) -> int:
        return len(self.per_epoch_max)

    @property
    def per_epoch_eps(self) -> np.ndarray:
        return self.running_max

    @property
    def composed(self) -> tuple[float, float]:
        return compose(self.epochs_run, self)

    def spent(self) -> float:
        """Running total of per-epoch maxima (plain summation, updated per record)."""
        return self._spent


def compose(epochs: int, per_epoch: PrivacyLedger | list[float], delta: float | None = None) -> tuple[float, float]:
    """Basic composition: (sum of per-epoch max eps, epochs * delta).

    ``per_epoch`` is a ledger or a plain list of per-epoch maxima (then
    ``delta`` is required).
    """
    if isinstance(per_epoch, PrivacyLedger):
        maxima, delta = per_epoch.per_epoch_max, per_epoch.delta
    else:
        maxima = list(per_epoch)
        if delta is None:
            raise ValueError("delta is required when composing a plain list")
    if epochs != len(maxima):
        raise ValueError(f"epochs={epochs} but {len(maxima)} per-epoch records")
    if epochs == 0:
        return 0.0, 0.0
    if any(math.isinf(m) for m in maxima):
        return EPS_UNBOUNDED, epochs * delta
    return math.fsum(maxima), epochs * delta


def certified_budget(epochs: int, eps_max: float, delta: float) -> tuple[float, float]:
    """The (T eps_max, T delta) guarantee when every epoch respects the cap eps_max."""
    return epochs * eps_max, epochs * delta
