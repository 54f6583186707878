"""Directed multicast graph with channel gains, mixing matrix and Perron quantities.

Convention: ``gains[j, i]`` is the amplitude gain |h_ji| of the link on which
node ``j`` transmits to node ``i``. Node ``i`` therefore reads column ``i`` of
the gain matrix to find its in-neighbors.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import cached_property
from typing import TYPE_CHECKING, Mapping

import numpy as np

from powerdp.errors import (
    DegenerateZError,
    InvalidTopologyError,
    NoConvergenceError,
    ZeroCompensationError,
)

if TYPE_CHECKING:
    from powerdp.allocation import PowerAllocation

# Channel gains drawn once in the reference experiment (row = sender, column = receiver).
H1 = np.array(
    [
        [0.0, 0.92, 0.94, 0.98],
        [0.92, 0.0, 0.92, 0.96],
        [0.92, 0.96, 0.0, 0.95],
        [0.88, 0.92, 0.98, 0.0],
    ]
)
H2 = np.array(
    [
        [0.0, 0.92, 0.94, 0.98],
        [0.92, 0.0, 0.92, 0.96],
        [0.95, 0.943, 0.0, 0.95],
        [0.95, 0.96, 0.98, 0.0],
    ]
)
GAIN_PRESETS = {"h1": H1, "h2": H2}

R_POLICIES = ("max_degree_plus_one", "max_degree")


def _reachable(adj: np.ndarray, start: int) -> set[int]:
    seen = {start}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in np.flatnonzero(adj[u]):
            v = int(v)
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return seen


def is_strongly_connected(adj: np.ndarray) -> bool:
    """Single-SCC test: every node reachable from node 0 in the graph and its reverse."""
    k = adj.shape[0]
    if k == 0:
        return False
    return len(_reachable(adj, 0)) == k and len(_reachable(adj.T, 0)) == k


@dataclass(frozen=True, eq=False)
class NetworkTopology:
    """Fixed, strongly connected directed graph with per-link amplitude gains.

    Attributes:
        gains: K x K nonnegative matrix, ``gains[j, i] = |h_ji|``; zero diagonal.
        degree_bound: R, used to normalize the mixing weights. Must be >= max degree.
    """

    gains: np.ndarray
    degree_bound: int

    def __post_init__(self):
        g = np.array(self.gains, dtype=float)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise InvalidTopologyError(f"gain matrix must be square, got shape {g.shape}")
        if not np.all(np.isfinite(g)) or np.any(g < 0):
            raise InvalidTopologyError("gains must be finite and nonnegative")
        if np.any(np.diag(g) != 0):
            raise InvalidTopologyError("gain matrix diagonal must be zero (no self-channel)")
        adj = g > 0
        if not np.array_equal(adj, adj.T):
            raise InvalidTopologyError("edge set must be symmetric: gains[j,i] > 0 iff gains[i,j] > 0")
        if not is_strongly_connected(adj):
            raise InvalidTopologyError("graph is not strongly connected")
        g.setflags(write=False)
        object.__setattr__(self, "gains", g)
        max_deg = int(adj.sum(axis=0).max())
        if int(self.degree_bound) < max(max_deg, 1):
            raise InvalidTopologyError(
                f"degree bound R={self.degree_bound} is below the maximum degree {max_deg}"
            )
        object.__setattr__(self, "degree_bound", int(self.degree_bound))

    @classmethod
    def from_gains(
        cls,
        gains,
        degree_bound: int | None = None,
        r_policy: str = "max_degree_plus_one",
        allow_zero_self_loops: bool = False,
    ) -> "NetworkTopology":
        """Build a topology, choosing R from ``r_policy`` unless given explicitly.

        ``max_degree_plus_one`` keeps every self-loop weight positive.
        ``max_degree`` zeroes the self-loop of every max-degree node and is
        rejected on regular graphs (where every self-loop would vanish) unless
        ``allow_zero_self_loops`` is set.
        """
        g = np.asarray(gains, dtype=float)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise InvalidTopologyError(f"gain matrix must be square, got shape {g.shape}")
        deg = (g > 0).sum(axis=0)
        if degree_bound is None:
            if r_policy == "max_degree_plus_one":
                degree_bound = int(deg.max()) + 1
            elif r_policy == "max_degree":
                if deg.min() == deg.max() and not allow_zero_self_loops:
                    raise InvalidTopologyError(
                        "R = max degree on a regular graph gives a_ii = 0 for every node; "
                        "pass allow_zero_self_loops=True to force it"
                    )
                degree_bound = max(int(deg.max()), 1)
            else:
                raise InvalidTopologyError(f"unknown R policy {r_policy!r}; expected one of {R_POLICIES}")
        return cls(g, degree_bound)

    @property
    def num_nodes(self) -> int:
        return self.gains.shape[0]

    @cached_property
    def adjacency(self) -> np.ndarray:
        adj = self.gains > 0
        adj.setflags(write=False)
        return adj

    @cached_property
    def degrees(self) -> np.ndarray:
        deg = self.adjacency.sum(axis=0).astype(int)
        deg.setflags(write=False)
        return deg

    def neighbors(self, i: int) -> list[int]:
        """In-neighbors of node ``i`` (equal to out-neighbors by symmetry)."""
        return [int(j) for j in np.flatnonzero(self.gains[:, i])]

    def links(self) -> list[tuple[int, int]]:
        """Ordered (receiver i, sender j) pairs with j in N_i."""
        return [(i, j) for i in range(self.num_nodes) for j in self.neighbors(i)]

    def to_dict(self) -> dict:
        return {"num_nodes": self.num_nodes, "gains": self.gains.tolist(), "degree_bound": self.degree_bound}


def preset_topology(name: str, degree_bound: int | None = None, r_policy: str = "max_degree_plus_one",
                    allow_zero_self_loops: bool = False) -> NetworkTopology:
    try:
        gains = GAIN_PRESETS[name]
    except KeyError:
        raise InvalidTopologyError(f"unknown topology preset {name!r}; known: {sorted(GAIN_PRESETS)}") from None
    return NetworkTopology.from_gains(gains, degree_bound, r_policy, allow_zero_self_loops)


def topology_from_config(cfg: Mapping) -> NetworkTopology:
    """Build a topology from a config mapping.

    Keys: ``preset`` (``h1``/``h2``) or ``gains`` (row-major K x K, row = sender),
    optional ``num_nodes`` (checked against the gain matrix), ``degree_bound``,
    ``r_policy`` and ``allow_zero_self_loops``.
    """
    r_policy = cfg.get("r_policy", "max_degree_plus_one")
    allow = bool(cfg.get("allow_zero_self_loops", False))
    degree_bound = cfg.get("degree_bound")
    if cfg.get("preset") is not None:
        topo = preset_topology(cfg["preset"], degree_bound, r_policy, allow)
    elif cfg.get("gains") is not None:
        topo = NetworkTopology.from_gains(cfg["gains"], degree_bound, r_policy, allow)
    else:
        raise InvalidTopologyError("topology needs either 'preset' or 'gains'")
    k = cfg.get("num_nodes")
    if k is not None and int(k) != topo.num_nodes:
        raise InvalidTopologyError(f"num_nodes={k} does not match the {topo.num_nodes}x{topo.num_nodes} gain matrix")
    return topo


def random_topology(
    num_nodes: int,
    rng: np.random.Generator,
    edge_prob: float = 0.4,
    gain_range: tuple[float, float] = (0.5, 1.0),
    degree_bound: int | None = None,
) -> NetworkTopology:
    """Random connected symmetric-edge graph with independent (asymmetric) gains.

    A random spanning tree guarantees strong connectivity; extra edges are
    added with probability ``edge_prob``.
    """
    k = num_nodes
    adj = np.zeros((k, k), dtype=bool)
    order = rng.permutation(k)
    for pos in range(1, k):
        u = order[pos]
        v = order[rng.integers(pos)]
        adj[u, v] = adj[v, u] = True
    extra = np.triu(rng.random((k, k)) < edge_prob, 1)
    adj |= extra | extra.T
    gains = np.where(adj, rng.uniform(*gain_range, size=(k, k)), 0.0)
    np.fill_diagonal(gains, 0.0)
    return NetworkTopology.from_gains(gains, degree_bound)


@dataclass(frozen=True, eq=False)
class MixingMatrix:
    """Row-stochastic weights ``entries[i, j] = a_ij`` induced by gains and powers."""

    entries: np.ndarray

    @property
    def self_loops(self) -> np.ndarray:
        return np.diag(self.entries).copy()

    @property
    def num_nodes(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True, eq=False)
class PerronVector:
    pi: np.ndarray
    residual: float
    iterations: int


def _as_array(a: MixingMatrix | np.ndarray) -> np.ndarray:
    return a.entries if isinstance(a, MixingMatrix) else np.asarray(a, dtype=float)


def compensation_factors(topology: NetworkTopology, alloc: "PowerAllocation") -> np.ndarray:
    """c_i = sum_{j in N_i} |h_ji| sqrt(alpha_j p_j) / d_i."""
    amp = np.sqrt(np.asarray(alloc.alpha, dtype=float) * np.asarray(alloc.p, dtype=float))
    deg = topology.degrees
    received = topology.gains.T @ amp
    bad = np.flatnonzero((deg == 0) | ~(received > 0))
    if bad.size:
        raise ZeroCompensationError(
            f"nodes {bad.tolist()} receive zero signal power from their neighborhood"
        )
    return received / deg


def build_mixing_matrix(topology: NetworkTopology, alloc: "PowerAllocation") -> MixingMatrix:
    """a_ij = |h_ji| sqrt(alpha_j p_j) / (c_i R) off the diagonal, a_ii = 1 - d_i / R."""
    c = compensation_factors(topology, alloc)
    amp = np.sqrt(np.asarray(alloc.alpha, dtype=float) * np.asarray(alloc.p, dtype=float))
    r = topology.degree_bound
    a = topology.gains.T * amp[None, :] / (c[:, None] * r)
    np.fill_diagonal(a, 1.0 - topology.degrees / r)
    a.setflags(write=False)
    return MixingMatrix(a)


def perron_left_eigenvector(
    a: MixingMatrix | np.ndarray, tol: float = 1e-12, max_iters: int = 100_000
) -> PerronVector:
    """Left Perron vector of a row-stochastic matrix by power iteration on A^T.

    Raises:
        NoConvergenceError: if ``||pi^T A - pi^T||_inf > tol`` after ``max_iters``.
    """
    mat = _as_array(a)
    at = mat.T
    k = mat.shape[0]
    pi = np.full(k, 1.0 / k)
    residual = np.inf
    for it in range(1, max_iters + 1):
        nxt = at @ pi
        nxt /= nxt.sum()
        residual = float(np.max(np.abs(at @ nxt - nxt)))
        pi = nxt
        if residual <= tol:
            return PerronVector(pi, residual, it)
    raise NoConvergenceError(f"power iteration residual {residual:.3e} > tol {tol:.1e} after {max_iters} iterations")


def z_recursion(a: MixingMatrix | np.ndarray, num_epochs: int) -> np.ndarray:
    """Stack of z-matrices ``Z[t]`` for t = 0..num_epochs; row i of ``Z[t]`` is z_{i,t}.

    Z[0] is the identity and Z[t+1] = A Z[t], so Z[t] = A^t.
    """
    if num_epochs < 1:
        raise ValueError("num_epochs must be >= 1")
    mat = _as_array(a)
    k = mat.shape[0]
    out = np.empty((num_epochs + 1, k, k))
    out[0] = np.eye(k)
    for t in range(num_epochs):
        out[t + 1] = mat @ out[t]
    return out


def estimate_theta(a: MixingMatrix | np.ndarray, horizon: int, safety: float = 1.1) -> float:
    """Upper bound on 1/z_ii,t over t in [0, horizon], times ``safety``.

    z depends only on A, so the bound can be computed before any data is seen.
    """
    if safety < 1:
        raise ValueError("safety factor must be >= 1")
    mat = _as_array(a)
    z = np.eye(mat.shape[0])
    min_diag = 1.0
    for t in range(1, max(int(horizon), 0) + 1):
        nxt = mat @ z
        d = float(np.diag(nxt).min())
        if d <= 0:
            raise DegenerateZError(f"z_ii,{t} = {d} <= 0; a zero self-loop makes 1/z_ii unbounded")
        min_diag = min(min_diag, d)
        if np.array_equal(nxt, z):
            break
        z = nxt
    return safety / min_diag

