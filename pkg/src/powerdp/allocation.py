"""Power split between model signal and privacy noise.

The per-link budgets are nonlinear in alpha, but squaring both sides and
substituting beta = 1 - alpha turns every ``eps_ij <= eps_max`` into a linear
inequality, so the allocation is a small LP solved with :mod:`powerdp.simplex`.
Because the mixing matrix depends on alpha and theta depends on the mixing
matrix, :func:`fixed_point_allocate` alternates LP solves and theta estimates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from powerdp.errors import InfeasibleError, NoFixedPointError
from powerdp.privacy import PrivacyParams, epsilon_matrix, gaussian_factor, max_link_epsilon
from powerdp.simplex import simplex_max
from powerdp.topology import MixingMatrix, NetworkTopology, build_mixing_matrix, estimate_theta

FEAS_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class PowerAllocation:
    """Fractions of each node's maximum power ``p`` spent on signal (alpha) and noise (beta)."""

    alpha: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        a = np.array(self.alpha, dtype=float).reshape(-1)
        p = np.array(self.p, dtype=float).reshape(-1)
        if a.shape != p.shape:
            raise ValueError(f"alpha has {a.size} entries but p has {p.size}")
        if np.any(a < 0) or np.any(a > 1):
            raise ValueError("alpha must lie in [0, 1]")
        if np.any(~(p > 0)):
            raise ValueError("maximum powers must be positive")
        a.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "p", p)

    @property
    def beta(self) -> np.ndarray:
        return 1.0 - self.alpha

    @classmethod
    def uniform(cls, num_nodes: int, alpha: float = 1.0, p: float = 1.0) -> "PowerAllocation":
        return cls(np.full(num_nodes, alpha), np.full(num_nodes, p))

    def to_dict(self) -> dict:
        return {"alpha": self.alpha.tolist(), "beta": self.beta.tolist(), "p": self.p.tolist()}


@dataclass(frozen=True, eq=False)
class LinearProgram:
    """``max objective @ alpha`` s.t. ``constraint_matrix @ alpha <= constraint_rhs``, alpha in bounds.

    Row ``r`` encodes the squared budget of link ``links[r] = (i, j)``.
    """

    objective: np.ndarray
    constraint_matrix: np.ndarray
    constraint_rhs: np.ndarray
    variable_bounds: tuple[np.ndarray, np.ndarray]
    links: list[tuple[int, int]] = field(default_factory=list)

    @property
    def num_constraints(self) -> int:
        return self.constraint_matrix.shape[0]


def build_lp(topology: NetworkTopology, params: PrivacyParams, p, t: int = 1) -> LinearProgram:
    """Linearized budget constraints for every ordered link (i, j), j in N_i.

    For each link the squared budget reads

        (2 G gamma theta |h_ji|)^2 * 2 ln(1.25/delta) * p_j * alpha_j
            <= eps_max^2 * sigma^2 * sum_{k in N_i} |h_ki|^2 p_k (1 - alpha_k)

    which is moved into ``row @ alpha <= rhs`` form and scaled so the
    largest entry of each row is one. With an unbounded ``eps_max`` no
    constraint is emitted.
    """
    if params.theta is None:
        raise ValueError("build_lp needs theta fixed in params")
    k = topology.num_nodes
    p = np.asarray(p, dtype=float).reshape(-1)
    if p.size != k:
        raise ValueError(f"expected {k} powers, got {p.size}")
    bounds = (np.zeros(k), np.ones(k))
    if math.isinf(params.eps_max):
        return LinearProgram(np.ones(k), np.zeros((0, k)), np.zeros(0), bounds, [])

    gains = topology.gains
    lead = (2.0 * params.grad_bound * params.gamma(t) * params.theta) ** 2 * gaussian_factor(params.delta) ** 2
    budget = params.eps_max**2 * params.sigma(t) ** 2
    links = topology.links()
    rows = np.zeros((len(links), k))
    rhs = np.zeros(len(links))
    for r, (i, j) in enumerate(links):
        nbrs = gains[:, i] > 0
        noise_w = np.where(nbrs, budget * gains[:, i] ** 2 * p, 0.0)
        rows[r] = noise_w
        rows[r, j] += lead * gains[j, i] ** 2 * p[j]
        rhs[r] = noise_w.sum()
        norm = max(np.abs(rows[r]).max(), rhs[r])
        if norm > 0:
            rows[r] /= norm
            rhs[r] /= norm
    return LinearProgram(np.ones(k), rows, rhs, bounds, links)


def solve_lp(lp: LinearProgram) -> np.ndarray:
    """Optimal alpha for ``lp`` (box bounds folded in as extra rows), clamped to [0, 1].

    Raises:
        InfeasibleError: no point of the box meets every constraint.
    """
    lo, hi = lp.variable_bounds
    k = lp.objective.size
    if np.any(lo != 0):
        raise ValueError("only zero lower bounds are supported")
    a = np.vstack([lp.constraint_matrix, np.eye(k)])
    b = np.concatenate([lp.constraint_rhs, hi])
    res = simplex_max(lp.objective, a, b)
    alpha = np.clip(res.x, lo, hi)
    slack = lp.constraint_matrix @ alpha - lp.constraint_rhs
    if slack.size and slack.max() > FEAS_TOL:
        raise InfeasibleError(f"LP solution violates a constraint by {slack.max():.3e}")
    return alpha


def binding_constraints(lp: LinearProgram, alpha: np.ndarray, tol: float = 1e-9) -> list[tuple[int, int]]:
    """Links whose budget constraint is active at ``alpha``."""
    slack = lp.constraint_rhs - lp.constraint_matrix @ alpha
    return [lp.links[r] for r in np.flatnonzero(slack <= tol)]


@dataclass
class AllocationResult:
    allocation: PowerAllocation
    theta: float
    mixing: MixingMatrix
    rounds: int
    theta_history: list[float]
    lp: LinearProgram

    def __iter__(self):
        return iter((self.allocation, self.theta, self.mixing))

    def achieved_max_epsilon(self, topology: NetworkTopology, params: PrivacyParams, t: int = 1) -> float:
        eps = epsilon_matrix(topology, self.allocation, params.with_theta(self.theta), t)
        return max_link_epsilon(eps, topology)


def fixed_point_allocate(
    topology: NetworkTopology,
    params: PrivacyParams,
    p,
    horizon: int,
    safety: float = 1.1,
    tol: float = 1e-9,
    max_rounds: int = 50,
    theta0: float | None = None,
) -> AllocationResult:
    """Alternate {LP with current theta -> mixing matrix -> theta re-estimate}.

    A round is accepted once the re-estimated theta moves by at most ``tol``
    and the theta the LP was solved with still bounds every 1/z_ii of the
    resulting mixing matrix; that theta is returned, so the allocation is
    exactly feasible under it. ``theta0`` defaults to K.

    Raises:
        NoFixedPointError: no accepted round within ``max_rounds``.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    p = np.asarray(p, dtype=float)
    theta = float(theta0) if theta0 is not None else float(topology.num_nodes)
    history = [theta]
    prev = theta
    for rnd in range(1, max_rounds + 1):
        lp = build_lp(topology, params.with_theta(theta), p)
        alloc = PowerAllocation(solve_lp(lp), p)
        mixing = build_mixing_matrix(topology, alloc)
        theta_new = estimate_theta(mixing, horizon, safety)
        history.append(theta_new)
        if abs(theta_new - theta) <= tol and theta >= theta_new / safety:
            return AllocationResult(alloc, theta, mixing, rnd, history, lp)
        prev, theta = theta, theta_new
    raise NoFixedPointError(
        f"theta did not settle within {max_rounds} rounds (last values {prev:.6g}, {theta:.6g})",
        prev,
        theta,
    )
