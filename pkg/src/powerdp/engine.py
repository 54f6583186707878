"""Epoch-synchronous simulation of power-controlled DP decentralized learning.

Every epoch each node draws its privacy noise once, multicasts
``sqrt(alpha p) x + sqrt(beta p) eta`` over the multiple-access channel,
receives the gain-weighted superposition of its neighbors' signals and takes
a projected, Perron-corrected gradient step. The unicast baseline sends one
differently scaled signal per link and pays ``max_i d_i`` channel uses.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from powerdp.allocation import PowerAllocation, build_lp, solve_lp
from powerdp.errors import DegenerateZError, MissingNeighborSignalError, NoOracleError, ZeroAlphaError
from powerdp.learning import ConstraintSet, LearningTask, clip_gradient, project
from powerdp.privacy import PrivacyLedger, PrivacyParams, epsilon_matrix, unicast_epsilon_matrix
from powerdp.rng import StreamFactory
from powerdp.topology import MixingMatrix, NetworkTopology, build_mixing_matrix, compensation_factors

logger = logging.getLogger(__name__)

Z_FLOOR = 1e-12
POWER_SLACK = 0.05


@dataclass
class NodeState:
    x: np.ndarray
    z: np.ndarray
    node: int


@dataclass
class EpochMetrics:
    epoch: int
    per_node_loss: np.ndarray
    objective: np.ndarray  # F(x_i,t) for every node
    test_accuracy: np.ndarray | None
    cumulative_regret: np.ndarray | None
    channel_uses_cumulative: int
    eps_spent: float


# ---------------------------------------------------------------------------
# per-node operations


def draw_noise(streams: StreamFactory, node: int, epoch: int, dim: int, sigma_t: float) -> np.ndarray:
    return sigma_t * streams.generator(node, epoch).standard_normal(dim)


def construct_signal(x: np.ndarray, alpha: float, p: float, eta: np.ndarray) -> np.ndarray:
    """Multicast signal sqrt(alpha p) x + sqrt((1 - alpha) p) eta."""
    beta = 1.0 - alpha
    if beta == 0.0:
        return math.sqrt(alpha * p) * x
    return math.sqrt(alpha * p) * x + math.sqrt(beta * p) * eta


def mac_aggregate(signals: Mapping[int, np.ndarray] | Sequence, gains_column: np.ndarray) -> np.ndarray:
    """Noiseless superposition y_i = sum_{j in N_i} |h_ji| signal_j (receiver noise ignored)."""
    total = None
    for j in np.flatnonzero(gains_column):
        j = int(j)
        sig = signals.get(j) if isinstance(signals, dict) else signals[j]
        if sig is None:
            raise MissingNeighborSignalError(f"no signal from neighbor {j} this epoch")
        term = gains_column[j] * np.asarray(sig, dtype=float)
        total = term if total is None else total + term
    if total is None:
        raise MissingNeighborSignalError("receiver has no neighbors")
    return total


def _self_noise_scale(alpha: float) -> float:
    beta = 1.0 - alpha
    if beta == 0.0:
        return 0.0
    if alpha <= 0.0:
        raise ZeroAlphaError("alpha = 0 with beta > 0 makes sqrt(beta/alpha) unbounded")
    return math.sqrt(beta / alpha)


def algorithm1_update(
    x_i: np.ndarray,
    z_ii: float,
    y_i: np.ndarray,
    own_eta: np.ndarray,
    alpha_i: float,
    c_i: float,
    degree_i: int,
    degree_bound: int,
    grad: np.ndarray,
    gamma_t: float,
    omega: ConstraintSet,
) -> np.ndarray:
    """Receiver-side update from the superposed signal.

    x+ = P( y / (c R) + (1 - d/R) (x + sqrt(beta/alpha) eta) - gamma g / z_ii ),
    with ``grad`` already clipped and ``own_eta`` the realization node i
    multicast this epoch.
    """
    if z_ii <= Z_FLOOR:
        raise DegenerateZError(f"z_ii = {z_ii} is too small to rescale the gradient")
    own = x_i + _self_noise_scale(alpha_i) * own_eta
    v = y_i / (c_i * degree_bound) + (1.0 - degree_i / degree_bound) * own - gamma_t / z_ii * grad
    return project(v, omega)


def mixing_update(
    i: int,
    xs: np.ndarray,
    etas: np.ndarray,
    alpha: np.ndarray,
    a: MixingMatrix,
    grad: np.ndarray,
    gamma_t: float,
    z_ii: float,
    omega: ConstraintSet,
) -> np.ndarray:
    """Same step written with mixing weights: P( sum_j a_ij (x_j + sqrt(beta_j/alpha_j) eta_j) - gamma g / z_ii )."""
    if z_ii <= Z_FLOOR:
        raise DegenerateZError(f"z_ii = {z_ii} is too small to rescale the gradient")
    row = a.entries[i]
    v = np.zeros_like(xs[0], dtype=float)
    for j in np.flatnonzero(row):
        v = v + row[j] * (xs[j] + _self_noise_scale(float(alpha[j])) * etas[j])
    return project(v - gamma_t / z_ii * grad, omega)


# ---------------------------------------------------------------------------
# simulation


@dataclass
class RunResult:
    metrics: list[EpochMetrics]
    states: list[NodeState]
    ledger: PrivacyLedger
    theta: float
    allocation: PowerAllocation
    mixing: MixingMatrix
    channel_uses_per_epoch: int
    mean_signal_power: np.ndarray
    power_violations: list[int] = field(default_factory=list)
    alpha_history: list[np.ndarray] = field(default_factory=list)


class Simulation:
    """Algorithm-1 run over a fixed topology with a fixed (or per-epoch) power split.

    Args:
        topology: graph and gains.
        allocation: power split used every epoch (the LP output).
        params: privacy parameters with ``theta`` set.
        task: local objectives.
        seed: master seed for all noise and initialization streams.
        channel_uses_per_epoch: accounting override; defaults to one multicast slot.
        resolve_each_epoch: re-solve the LP at every epoch (only meaningful
            when sigma_t / gamma_t varies with t).
        power_cap: monitor E||signal||^2 <= p_i and warn on violations.
        audit: keep every epoch's full eps matrix in the ledger.
        workers: node updates per epoch run on this many threads.
    """

    clip = True

    def __init__(
        self,
        topology: NetworkTopology,
        allocation: PowerAllocation,
        params: PrivacyParams,
        task: LearningTask,
        seed: int = 0,
        channel_uses_per_epoch: int | None = None,
        resolve_each_epoch: bool = False,
        power_cap: bool = False,
        audit: bool = False,
        init_std: float = 0.1,
        track_regret: bool = True,
        workers: int = 1,
    ):
        if params.theta is None:
            raise ValueError("simulation needs params with theta set")
        self.topology = topology
        self.params = params
        self.task = task
        self.omega = task.omega
        self.streams = StreamFactory(seed)
        self.resolve_each_epoch = resolve_each_epoch and not params.proportional
        self.power_cap = power_cap
        self.audit = audit
        self.init_std = init_std
        self.track_regret = track_regret
        self.workers = workers
        self.channel_uses_per_epoch = (
            channel_uses_per_epoch if channel_uses_per_epoch is not None else self.default_channel_uses()
        )
        self._set_allocation(allocation)

    def default_channel_uses(self) -> int:
        return 1

    def _set_allocation(self, allocation: PowerAllocation) -> None:
        self.allocation = allocation
        self.mixing = build_mixing_matrix(self.topology, allocation)
        self.comp = compensation_factors(self.topology, allocation)

    # -- hooks overridden by the unicast baseline --------------------------

    def epoch_epsilon(self, t: int) -> np.ndarray:
        return epsilon_matrix(self.topology, self.allocation, self.params, t)

    def transmit(self, xs: np.ndarray, etas: np.ndarray) -> list[np.ndarray]:
        alloc = self.allocation
        return [construct_signal(xs[j], alloc.alpha[j], alloc.p[j], etas[j]) for j in range(len(xs))]

    def receive(self, i: int, sent) -> np.ndarray:
        return mac_aggregate(sent, self.topology.gains[:, i])

    def self_alpha(self, i: int) -> float:
        return float(self.allocation.alpha[i])

    def signal_power(self, sent) -> np.ndarray:
        return np.array([float(np.dot(v, v)) for v in sent])

    # ----------------------------------------------------------------------

    def initial_states(self) -> list[NodeState]:
        k, m = self.topology.num_nodes, self.task.dim
        states = []
        for i in range(k):
            x0 = project(self.init_std * self.streams.generator(i, 0).standard_normal(m), self.omega)
            states.append(NodeState(x0, np.eye(k)[i], i))
        return states

    def _node_step(self, i, states, sent, etas, rngs, gamma_t):
        st = states[i]
        g = self.task.gradient(i, st.x, rngs[i])
        if self.clip:
            g = clip_gradient(g, self.params.grad_bound)
        y = self.receive(i, sent)
        return algorithm1_update(
            st.x, float(st.z[i]), y, etas[i], self.self_alpha(i), float(self.comp[i]),
            int(self.topology.degrees[i]), self.topology.degree_bound, g, gamma_t, self.omega,
        )

    def run_epoch(self, states: list[NodeState], t: int, ledger: PrivacyLedger,
                  prev: EpochMetrics | None = None, f_star: float | None = None) -> tuple[list[NodeState], EpochMetrics]:
        """Advance every node from epoch t-1 to t behind a barrier."""
        if t < 1:
            raise ValueError("epochs are numbered from 1")
        if self.resolve_each_epoch:
            lp = build_lp(self.topology, self.params, self.allocation.p, t)
            self._set_allocation(PowerAllocation(solve_lp(lp), self.allocation.p))
        k, m = self.topology.num_nodes, self.task.dim
        sigma_t = self.params.sigma(t)
        gamma_t = self.params.gamma(t)
        rngs = [self.streams.generator(i, t) for i in range(k)]
        etas = np.stack([sigma_t * rngs[i].standard_normal(m) for i in range(k)])
        sent = self.transmit(np.stack([s.x for s in states]), etas)

        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                new_x = list(pool.map(lambda i: self._node_step(i, states, sent, etas, rngs, gamma_t), range(k)))
        else:
            new_x = [self._node_step(i, states, sent, etas, rngs, gamma_t) for i in range(k)]

        zs = self.mixing.entries @ np.stack([s.z for s in states])
        new_states = [NodeState(new_x[i], zs[i], i) for i in range(k)]

        eps = self.epoch_epsilon(t)
        ledger.record(eps, self.topology.adjacency.T)
        if self.power_cap:
            self._power_sum += self.signal_power(sent)

        losses = np.array([self.task.loss(i, new_x[i]) for i in range(k)])
        objective = np.array([self.task.objective(x) for x in new_x])
        acc = [self.task.accuracy(x) for x in new_x]
        acc = None if acc[0] is None else np.array(acc)
        regret = None
        if f_star is not None:
            base = prev.cumulative_regret if prev is not None and prev.cumulative_regret is not None else 0.0
            regret = base + (objective - f_star)
        uses = (prev.channel_uses_cumulative if prev is not None else 0) + self.channel_uses_per_epoch
        return new_states, EpochMetrics(t, losses, objective, acc, regret, uses, ledger.spent())

    def run(self, num_epochs: int, states: list[NodeState] | None = None) -> RunResult:
        states = states if states is not None else self.initial_states()
        ledger = PrivacyLedger(self.topology.num_nodes, self.params.delta, audit=self.audit)
        f_star = None
        if self.track_regret and self.task.optimum is not None:
            f_star = self.task.objective(self.task.optimum)
        self._power_sum = np.zeros(self.topology.num_nodes)
        metrics: list[EpochMetrics] = []
        alphas = []
        prev = None
        for t in range(1, num_epochs + 1):
            states, prev = self.run_epoch(states, t, ledger, prev, f_star=f_star)
            metrics.append(prev)
            if self.resolve_each_epoch:
                alphas.append(self.allocation.alpha.copy())
        mean_power = self._power_sum / max(num_epochs, 1)
        violations = []
        if self.power_cap:
            cap = np.asarray(self.allocation.p) * (1.0 + POWER_SLACK)
            violations = [int(i) for i in np.flatnonzero(mean_power > cap)]
            for i in violations:
                logger.warning("node %d mean signal power %.4g exceeds cap %.4g", i, mean_power[i], cap[i])
        return RunResult(metrics, states, ledger, self.params.theta, self.allocation, self.mixing,
                         self.channel_uses_per_epoch, mean_power, violations, alphas)


class BaselineSimulation(Simulation):
    """Unicast baseline with one power fraction per link.

    ``link_alpha[j, i]`` is the fraction node j spends on signal toward i.
    Each receiver has its own compensation factor; a sender draws one noise
    realization per epoch and scales it per link. Each epoch costs
    ``max_i d_i`` channel uses because per-link signals cannot superpose.
    """

    def __init__(self, topology, link_alpha, p, params, task, **kwargs):
        self.link_alpha = np.asarray(link_alpha, dtype=float)
        self.p = np.asarray(p, dtype=float)
        kwargs.pop("resolve_each_epoch", None)
        adj = topology.adjacency
        self_alpha = np.array([self.link_alpha[i, adj[i]].mean() for i in range(topology.num_nodes)])
        super().__init__(topology, PowerAllocation(self_alpha, self.p), params, task, **kwargs)

    def default_channel_uses(self) -> int:
        return int(self.topology.degrees.max())

    def _set_allocation(self, allocation):
        self.allocation = allocation
        amp = self.topology.gains * np.sqrt(self.link_alpha * self.p[:, None])  # amp[j, i]
        deg = self.topology.degrees
        self.comp = amp.sum(axis=0) / deg
        r = self.topology.degree_bound
        a = amp.T / (self.comp[:, None] * r)
        np.fill_diagonal(a, 1.0 - deg / r)
        self.mixing = MixingMatrix(a)

    def epoch_epsilon(self, t):
        return unicast_epsilon_matrix(self.topology, self.link_alpha, self.p, self.params, t)

    def transmit(self, xs, etas):
        """Per-link signals keyed by (sender, receiver)."""
        return {
            (int(j), int(i)): construct_signal(xs[j], self.link_alpha[j, i], self.p[j], etas[j])
            for j, i in zip(*np.nonzero(self.topology.adjacency))
        }

    def receive(self, i, sent):
        col = self.topology.gains[:, i]
        return mac_aggregate({j: sent.get((int(j), i)) for j in np.flatnonzero(col)}, col)

    def signal_power(self, sent):
        out = np.zeros(self.topology.num_nodes)
        for j in range(self.topology.num_nodes):
            out[j] = np.mean([float(np.dot(v, v)) for (src, _), v in sent.items() if src == j])
        return out


def baseline_link_alpha(topology: NetworkTopology, value: float = 0.5) -> np.ndarray:
    return np.where(topology.adjacency, value, 0.0)


# ---------------------------------------------------------------------------
# regret


def compute_regret(objective_trace: np.ndarray, x_star: np.ndarray | None, task: LearningTask) -> np.ndarray:
    """Cumulative regret curves from a (T, K) trace of F(x_i,t).

    Row T-1 holds R_i(T) = sum_{t<=T} F(x_i,t) - T F(x*).
    """
    if x_star is None:
        raise NoOracleError("regret needs the constrained optimum of F")
    trace = np.asarray(objective_trace, dtype=float)
    return np.cumsum(trace - task.objective(x_star), axis=0)


def objective_trace(metrics: Sequence[EpochMetrics]) -> np.ndarray:
    return np.stack([m.objective for m in metrics])


def replicate_mean(curves: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Mean over seed replicates and its standard error (zero for a single replicate)."""
    arr = np.stack([np.asarray(c, dtype=float) for c in curves])
    mean = arr.mean(axis=0)
    if arr.shape[0] < 2:
        return mean, np.zeros_like(mean)
    return mean, arr.std(axis=0, ddof=1) / math.sqrt(arr.shape[0])
