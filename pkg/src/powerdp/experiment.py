"""Build tasks, allocations and simulations from a :class:`RunConfig` and run replicates."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from powerdp.allocation import AllocationResult, binding_constraints, fixed_point_allocate
from powerdp.config import RunConfig
from powerdp.data_io import load_digits, load_mnist, make_blobs, partition_noniid_sorted, split_train_test
from powerdp.engine import BaselineSimulation, RunResult, Simulation
from powerdp.learning import ConstraintSet, LearningTask, LogisticTask, random_quadratic_task
from powerdp.privacy import PrivacyParams, Schedule, max_link_epsilon, unicast_epsilon_matrix
from powerdp.topology import NetworkTopology, estimate_theta, topology_from_config

LOGISTIC_GRAD_BOUND = 5.0

ALG1 = "algorithm1"
BASELINE = "baseline"


def build_topology(cfg: RunConfig) -> NetworkTopology:
    return topology_from_config({
        "preset": cfg["topology.preset"],
        "gains": cfg["topology.gains"],
        "degree_bound": cfg["topology.degree_bound"],
        "r_policy": cfg["topology.r_policy"],
        "allow_zero_self_loops": cfg["topology.allow_zero_self_loops"],
    })


def build_task(cfg: RunConfig, num_nodes: int) -> LearningTask:
    name = cfg["task.name"]
    omega = ConstraintSet(cfg["task.radius"])
    if name == "quadratic":
        rng = np.random.default_rng(cfg["task.data_seed"])
        return random_quadratic_task(num_nodes, cfg["task.dim"], rng, tuple(cfg["task.eig_range"]),
                                     cfg["task.b_scale"], omega)
    if name == "digits":
        data = load_digits(cfg["task.pool"])
    elif name == "blobs":
        data = make_blobs(cfg["task.num_samples"], cfg["task.num_classes"], cfg["task.dim"],
                          cfg["task.data_seed"], cfg["task.spread"])
    else:
        extra = None
        if cfg["task.mnist_test_images"] and cfg["task.mnist_test_labels"]:
            extra = (cfg["task.mnist_test_images"], cfg["task.mnist_test_labels"])
        data = load_mnist(cfg["task.mnist_images"], cfg["task.mnist_labels"], extra)
    train, test = split_train_test(data, cfg["task.train_fraction"], cfg["task.split_seed"])
    part = partition_noniid_sorted(train, num_nodes)
    clients = [(train.features[idx], train.labels[idx]) for idx in part.client_indices]
    return LogisticTask(clients, data.num_classes, test=(test.features, test.labels), mu=cfg["task.mu"],
                        omega=omega, batch_size=cfg["task.batch_size"])


def default_grad_bound(task: LearningTask) -> float:
    """G for a task when the config leaves it unset.

    Quadratics get the exact gradient bound over the ball (clipping never
    binds); logistic tasks get a fixed clip norm.
    """
    if hasattr(task, "qs"):
        r = task.omega.radius
        return max(float(np.linalg.norm(q, 2)) * r + float(np.linalg.norm(b)) for q, b in zip(task.qs, task.bs))
    return LOGISTIC_GRAD_BOUND


def build_params(cfg: RunConfig, task: LearningTask, eps_max: float | None = None) -> PrivacyParams:
    grad_bound = cfg["privacy.grad_bound"]
    lr_mu = cfg["privacy.lr_mu"]
    if lr_mu == "auto":
        lr_mu = task.mu
        if not lr_mu > 0:
            raise ValueError("privacy.lr_mu=auto needs a strongly convex task (mu > 0)")
    return PrivacyParams(
        eps_max=cfg["privacy.eps_max"] if eps_max is None else eps_max,
        delta=cfg["privacy.delta"],
        grad_bound=grad_bound if grad_bound is not None else default_grad_bound(task),
        sigma_schedule=Schedule(cfg["privacy.sigma.kind"], cfg["privacy.sigma.scale"]),
        lr_schedule=Schedule(cfg["privacy.lr.kind"], cfg["privacy.lr.scale"]),
        lr_mu=lr_mu,
    )


def powers(cfg: RunConfig, num_nodes: int) -> np.ndarray:
    p = cfg["power.p"]
    if isinstance(p, list):
        if len(p) != num_nodes:
            raise ValueError(f"power.p lists {len(p)} powers for {num_nodes} nodes")
        return np.array(p, dtype=float)
    return np.full(num_nodes, float(p))


@dataclass
class BaselineSetup:
    link_alpha: np.ndarray
    params: PrivacyParams
    theta: float
    eps_max: float  # largest per-link budget over the horizon, from the unicast audit


@dataclass
class Experiment:
    cfg: RunConfig
    topology: NetworkTopology
    task: LearningTask
    p: np.ndarray
    params: PrivacyParams  # algorithm 1, theta set
    alloc: AllocationResult
    baseline: BaselineSetup | None
    epochs: int
    seeds: list[int]
    extras: dict = field(default_factory=dict)

    def lp_diagnostics(self) -> dict:
        lp = self.alloc.lp
        alpha = np.asarray(self.alloc.allocation.alpha)
        return {
            "num_constraints": lp.num_constraints,
            "rounds": self.alloc.rounds,
            "theta_history": list(self.alloc.theta_history),
            "binding_links": [list(map(int, link)) for link in binding_constraints(lp, alpha)],
            "achieved_max_eps": self.alloc.achieved_max_epsilon(self.topology, self.params),
        }


def horizon_max(fn, epochs: int, proportional: bool) -> float:
    """max over t in [1, epochs] of fn(t); a single evaluation when it cannot depend on t."""
    if proportional:
        return fn(1)
    return max(fn(t) for t in range(1, epochs + 1))


def prepare(cfg: RunConfig) -> Experiment:
    topo = build_topology(cfg)
    task = build_task(cfg, topo.num_nodes)
    p = powers(cfg, topo.num_nodes)
    epochs = cfg["run.epochs"]
    seeds = cfg["run.seeds"]
    safety = cfg["allocation.theta_safety"]

    baseline = None
    eps_max = None
    if cfg["baseline.enabled"]:
        link_alpha = np.where(topo.adjacency, cfg["baseline.link_alpha"], 0.0)
        bparams = build_params(cfg, task)
        probe = BaselineSimulation(topo, link_alpha, p, bparams.with_theta(1.0), task)
        btheta = estimate_theta(probe.mixing, epochs, safety)
        bparams = bparams.with_theta(btheta)
        beps = horizon_max(
            lambda t: max_link_epsilon(unicast_epsilon_matrix(topo, link_alpha, p, bparams, t), topo),
            epochs, bparams.proportional,
        )
        baseline = BaselineSetup(link_alpha, bparams, btheta, beps)
        if cfg["baseline.match_epsilon"]:
            eps_max = beps

    params = build_params(cfg, task, eps_max)
    alloc = fixed_point_allocate(topo, params, p, horizon=epochs, safety=safety,
                                 tol=cfg["allocation.tol"], max_rounds=cfg["allocation.max_rounds"])
    params = params.with_theta(alloc.theta)
    return Experiment(cfg, topo, task, p, params, alloc, baseline, epochs, seeds)


def make_simulation(exp: Experiment, algorithm: str, seed: int) -> Simulation:
    cfg = exp.cfg
    common = dict(
        seed=seed,
        power_cap=cfg["run.power_cap"],
        init_std=cfg["run.init_std"],
        workers=cfg["run.workers"],
        audit=False,
    )
    if algorithm == ALG1:
        return Simulation(exp.topology, exp.alloc.allocation, exp.params, exp.task,
                          channel_uses_per_epoch=cfg["run.channel_uses"],
                          resolve_each_epoch=cfg["run.resolve_each_epoch"], **common)
    if algorithm == BASELINE:
        if exp.baseline is None:
            raise ValueError("baseline is not enabled in this experiment")
        return BaselineSimulation(exp.topology, exp.baseline.link_alpha, exp.p, exp.baseline.params, exp.task,
                                  channel_uses_per_epoch=cfg["baseline.channel_uses"], **common)
    raise ValueError(f"unknown algorithm {algorithm!r}")


def algorithms(exp: Experiment) -> list[str]:
    return [ALG1, BASELINE] if exp.baseline is not None else [ALG1]


def run_replicates(exp: Experiment) -> dict[tuple[str, int], RunResult]:
    """Every (algorithm, seed) run; replicates may run on several threads."""
    jobs = [(alg, seed) for alg in algorithms(exp) for seed in exp.seeds]
    if exp.task.optimum is not None:
        _ = exp.task.optimum  # computed once, before threads share the task

    def one(job):
        alg, seed = job
        return make_simulation(exp, alg, seed).run(exp.epochs)

    workers = exp.cfg["run.replicate_workers"]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(job) for job in jobs]
    return dict(zip(jobs, results))


def consensus_error(result: RunResult, x_star: np.ndarray) -> float:
    return max(float(np.linalg.norm(s.x - x_star)) for s in result.states)


def final_accuracy(result: RunResult) -> float | None:
    acc = result.metrics[-1].test_accuracy
    return None if acc is None else float(np.mean(acc))


__all__ = [
    "ALG1",
    "BASELINE",
    "Experiment",
    "algorithms",
    "build_params",
    "build_task",
    "build_topology",
    "consensus_error",
    "final_accuracy",
    "make_simulation",
    "prepare",
    "run_replicates",
]
