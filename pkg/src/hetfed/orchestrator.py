"""The federated round loop: select clients, sample budgets, assign a subnet
per client by strategy, train locally, filter failures, aggregate, distill,
evaluate, and advance the simulated clock.

Every source of randomness is a separate stream derived from the master seed
by label (selection / budgets / data / search / distill / init / per-client
shuffling), so two strategies run with the same seed consume identical
client-selection, budget, and partition streams: comparisons are common
random numbers by construction.
"""
from __future__ import annotations

import hashlib
import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .aggregate import ClientUpdate, aggregate, failure_filter
from .costs import Budget, CostParams, comm_time, feasible, memory_cost
from .data import (
    Dataset,
    PartitionPlan,
    feature_moments,
    gen_synthetic,
    partition,
    split_test,
    standardize,
    standardize_with,
)
from .distill import DistillConfig, DistillReport, distill_round
from .nn import MlpModel, apply_update, backward_ce, ce_loss, forward, init_optimizer
from .resources import (
    LimitSpec,
    SimClock,
    budget_at,
    check_failure,
    load_limit_traces,
    reread_traces,
)
from .search import SamplingPool, SearchOutcome, hit_rate, search
from .subnets import (
    ParamStore,
    SearchSpace,
    SubnetSpec,
    full_spec,
    init_store,
    materialize,
    param_count,
    smallest_spec,
    uniform_spec,
)

STRATEGIES = (
    "flexible_search",
    "uniform_prune",
    "fedavg_largest",
    "fedavg_smallest",
    "exclude_infeasible",
)

# lower bound on per-round simulated time so the clock is strictly monotone
MIN_ROUND_S = 1e-3


def derive_rng(seed: int, label: str, *indices: int) -> np.random.Generator:
    """Independent generator for one concern, stable across runs/platforms."""
    entropy = [int(seed), zlib.crc32(label.encode("utf-8")), *[int(i) for i in indices]]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, label: str, *indices: int) -> int:
    entropy = [int(seed), zlib.crc32(label.encode("utf-8")), *[int(i) for i in indices]]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    # multi-step decay at these fractions of the total rounds
    milestones: tuple[float, ...] = (0.6, 0.85)
    decay_factor: float = 0.1

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass(frozen=True)
class DataConfig:
    classes: int = 10
    in_dim: int = 32
    per_class: int = 200
    partition: str = "dirichlet"
    alpha: float = 0.1
    test_fraction: float = 0.1


@dataclass(frozen=True)
class ExperimentConfig:
    space: SearchSpace
    total_clients: int
    clients_per_round: int
    local_epochs: int
    rounds: int
    batch: int
    strategy: str
    limits: LimitSpec
    cost: CostParams = CostParams()
    optimizer: OptimizerConfig = OptimizerConfig()
    data: DataConfig = DataConfig()
    distill: DistillConfig | None = None
    distill_enabled: bool = True
    distill_for_uniform_prune: bool = False
    epsilon: float = 0.8
    t_max: int = 5
    weighted_aggregation: bool = True
    seed: int = 1

    def __post_init__(self):
        if not 1 <= self.clients_per_round <= self.total_clients:
            raise ValueError("need 1 <= clients_per_round <= total_clients")
        if self.local_epochs < 1 or self.rounds < 1 or self.batch < 1:
            raise ValueError("local_epochs, rounds and batch must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.t_max < 0:
            raise ValueError("t_max must be >= 0")
        if self.distill is None:
            object.__setattr__(self, "distill", DistillConfig(n=self.clients_per_round))


@dataclass
class Assignment:
    client: int
    spec: SubnetSpec
    param_count: int
    budget: Budget
    mem_util: float | None
    bw_util: float | None
    random_tries: int | None
    hit_tmax: bool | None
    feasible: bool
    trained: bool
    failed: bool
    train_loss: float | None


@dataclass
class RoundMetrics:
    round: int
    accuracy: float
    mean_mem_util: float | None
    mean_bw_util: float | None
    hit_rate: float | None
    failures: int
    elapsed_s: float
    # the federated objective: global model's cross-entropy over all clients'
    # training data, size-weighted (post aggregation and distillation)
    global_train_loss: float
    # mean of the participating clients' local per-step losses
    mean_local_loss: float | None
    distill_initial_loss: float | None
    distill_final_loss: float | None
    assignments: list[Assignment] = field(default_factory=list)


@dataclass
class RunResult:
    metrics: list[RoundMetrics]
    store: ParamStore
    stream_hashes: dict[str, str]


def learning_rate_at(opt: OptimizerConfig, round_idx: int, total_rounds: int) -> float:
    """Multi-step schedule: decay after each milestone round has passed."""
    lr = opt.learning_rate
    for frac in opt.milestones:
        if round_idx > max(1, int(frac * total_rounds)):
            lr *= opt.decay_factor
    return lr


def utilization(
    space: SearchSpace, spec: SubnetSpec, budget: Budget, batch: int, cost: CostParams
) -> tuple[float | None, float | None]:
    """How much of each budget axis the assigned model uses, clamped to
    [0, 1]; None on a zero budget (undefined, recorded as missing)."""
    if budget.memory_bytes > 0:
        mem_util = min(1.0, memory_cost(space, spec, batch, cost) / budget.memory_bytes)
    else:
        mem_util = None
    if budget.bandwidth_bits_per_s > 0:
        bw_util = min(1.0, comm_time(space, spec, cost, budget) / cost.comm_deadline_s)
    else:
        bw_util = None
    return mem_util, bw_util


def evaluate(
    store: ParamStore, space: SearchSpace, test: Dataset, spec: SubnetSpec | None = None
) -> float:
    """Top-1 accuracy of the global model (the full spec unless one is given)."""
    model, _ = materialize(space, spec if spec is not None else full_spec(space), store)
    logits, _ = forward(model, test.features)
    return float(np.mean(np.argmax(logits, axis=1) == test.labels))


def _eval_spec(cfg: ExperimentConfig) -> SubnetSpec:
    """What 'the global model' means per strategy: fedavg_smallest trains the
    smallest architecture as its global model, so that is what gets scored;
    every other strategy trains (parts of) the full model."""
    if cfg.strategy == "fedavg_smallest":
        return smallest_spec(cfg.space)
    return full_spec(cfg.space)


def global_objective(
    store: ParamStore,
    space: SearchSpace,
    clients: list[Dataset],
    spec: SubnetSpec | None = None,
) -> float:
    """Size-weighted mean cross-entropy of the global model over every
    client's training data: the quantity federated optimization minimizes."""
    model, _ = materialize(space, spec if spec is not None else full_spec(space), store)
    total, weight = 0.0, 0
    for ds in clients:
        logits, _ = forward(model, ds.features)
        total += ce_loss(logits, ds.labels) * ds.size
        weight += ds.size
    return total / weight


def prepare_data(cfg: ExperimentConfig) -> tuple[list[Dataset], Dataset]:
    """Generate, hold out an i.i.d. test set, partition, and standardize.

    Clients standardize with their own statistics (the server never sees
    them); the test set uses the pooled training statistics.
    """
    base = gen_synthetic(
        cfg.data.classes, cfg.data.in_dim, cfg.data.per_class, derive_seed(cfg.seed, "data")
    )
    train_pool, test_raw = split_test(base, cfg.data.test_fraction, derive_rng(cfg.seed, "split"))
    mean, std = feature_moments(train_pool)
    test = standardize_with(test_raw, mean, std)
    plan = PartitionPlan(
        cfg.data.partition, cfg.total_clients, cfg.data.alpha, derive_seed(cfg.seed, "partition")
    )
    clients = [standardize(part) for part in partition(train_pool, plan)]
    return clients, test


def train_client(
    model: MlpModel,
    dataset: Dataset,
    epochs: int,
    batch: int,
    opt: OptimizerConfig,
    learning_rate: float,
    rng: np.random.Generator,
) -> float:
    """Minibatch cross-entropy for the given epochs; returns the mean loss
    over every step this round.  The optimizer is fresh (clients keep no
    state between rounds)."""
    state = init_optimizer(
        model,
        opt.kind,
        learning_rate,
        momentum=opt.momentum,
        weight_decay=opt.weight_decay,
    )
    losses = []
    for _ in range(epochs):
        order = rng.permutation(dataset.size)
        for start in range(0, dataset.size, batch):
            sel = order[start : start + batch]
            logits, cache = forward(model, dataset.features[sel])
            losses.append(ce_loss(logits, dataset.labels[sel]))
            grads = backward_ce(model, cache, dataset.labels[sel])
            apply_update(model, grads, state)
    return float(np.mean(losses))


def _assign_spec(
    cfg: ExperimentConfig, pool: SamplingPool | None, budget: Budget
) -> tuple[SubnetSpec, SearchOutcome | None, bool]:
    """Strategy dispatch: returns (spec, search telemetry, fits-at-assignment)."""
    space, batch, cost = cfg.space, cfg.batch, cfg.cost
    if cfg.strategy == "flexible_search":
        assert pool is not None
        outcome = search(pool, budget, batch, cost, cfg.epsilon, cfg.t_max)
        return outcome.chosen, outcome, outcome.feasible
    if cfg.strategy == "uniform_prune":
        for ratio in reversed(space.ratios):
            spec = uniform_spec(space, ratio)
            if feasible(space, spec, batch, cost, budget):
                return spec, None, True
        return smallest_spec(space), None, False
    if cfg.strategy == "fedavg_largest":
        spec = full_spec(space)
    elif cfg.strategy == "fedavg_smallest":
        spec = smallest_spec(space)
    else:  # exclude_infeasible: fixed largest model, dropped when unfit
        spec = full_spec(space)
    return spec, None, feasible(space, spec, batch, cost, budget)


def _distill_active(cfg: ExperimentConfig) -> bool:
    if not cfg.distill_enabled or cfg.distill is None or cfg.distill.t_skd == 0:
        return False
    if cfg.strategy == "flexible_search":
        return True
    return cfg.strategy == "uniform_prune" and cfg.distill_for_uniform_prune


def _store_is_finite(store: ParamStore) -> bool:
    return all(
        np.isfinite(l.weights).all() and np.isfinite(l.bias).all() for l in store.layers
    )


def run(
    cfg: ExperimentConfig,
    initial_store: ParamStore | None = None,
    on_round_end=None,
) -> RunResult:
    """Execute the configured number of rounds and return per-round metrics
    plus the final store.  Deterministic given the config and seed."""
    space = cfg.space
    clients, test = prepare_data(cfg)
    store = initial_store if initial_store is not None else init_store(space, derive_rng(cfg.seed, "init"))
    if not _store_is_finite(store):
        raise RuntimeError("initial store contains non-finite parameters")

    pool = SamplingPool(space, derive_rng(cfg.seed, "search")) if cfg.strategy == "flexible_search" else None
    select_rng = derive_rng(cfg.seed, "select")
    budget_rng = derive_rng(cfg.seed, "budget")
    distill_rng = derive_rng(cfg.seed, "distill")
    traces = load_limit_traces(cfg.limits)
    clock = SimClock()
    select_hash = hashlib.sha256()
    budget_hash = hashlib.sha256()

    workers = max(1, int(os.environ.get("HETFED_THREADS", "1") or "1"))
    eval_spec = _eval_spec(cfg)
    metrics: list[RoundMetrics] = []

    for round_idx in range(1, cfg.rounds + 1):
        lr = learning_rate_at(cfg.optimizer, round_idx, cfg.rounds)
        selected = np.sort(
            select_rng.choice(cfg.total_clients, size=cfg.clients_per_round, replace=False)
        )
        select_hash.update(selected.astype(np.int64).tobytes())

        budgets: dict[int, Budget] = {}
        for i in selected:
            b = budget_at(cfg.limits, traces, int(i), clock.now_s, budget_rng)
            budgets[int(i)] = b
            budget_hash.update(np.array([b.memory_bytes, b.bandwidth_bits_per_s]).tobytes())

        plans = []  # (client, spec, outcome, fits, trained?)
        for i in (int(j) for j in selected):
            spec, outcome, fits = _assign_spec(cfg, pool, budgets[i])
            trains = fits if cfg.strategy == "exclude_infeasible" else True
            plans.append((i, spec, outcome, fits, trains))

        def _run_one(entry):
            i, spec, _, _, trains = entry
            model, plan = materialize(space, spec, store)
            loss = None
            if trains:
                loss = train_client(
                    model,
                    clients[i],
                    cfg.local_epochs,
                    cfg.batch,
                    cfg.optimizer,
                    lr,
                    derive_rng(cfg.seed, "client", round_idx, i),
                )
            return model, plan, loss

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool_exec:
                trained_models = list(pool_exec.map(_run_one, plans))
        else:
            trained_models = [_run_one(entry) for entry in plans]

        assignments: list[Assignment] = []
        updates: list[ClientUpdate] = []
        failures: set[int] = set()
        outcomes: list[SearchOutcome] = []
        round_dt = 0.0
        trained_sizes = sum(
            clients[i].size for (i, _, _, _, trains) in plans if trains
        )
        for (i, spec, outcome, fits, trains), (model, plan, loss) in zip(plans, trained_models):
            budget = budgets[i]
            count = param_count(space, spec)
            comm_s = comm_time(space, spec, cfg.cost, budget)
            train_s = (
                cfg.cost.train_step_s_per_param
                * count
                * cfg.local_epochs
                * math.ceil(clients[i].size / cfg.batch)
            )
            client_dt = min(comm_s, cfg.cost.comm_deadline_s) + (train_s if trains else 0.0)
            round_dt = max(round_dt, client_dt)

            failed = False
            if trains:
                b_complete = reread_traces(
                    cfg.limits, traces, i, clock.now_s + client_dt, budget
                )
                failed = check_failure(budget, b_complete, space, spec, cfg.batch, cfg.cost)
                if failed:
                    failures.add(i)
                else:
                    updates.append(
                        ClientUpdate(i, spec, plan, model, clients[i].size / trained_sizes)
                    )
            mem_util, bw_util = utilization(space, spec, budget, cfg.batch, cfg.cost)
            if outcome is not None:
                outcomes.append(outcome)
            assignments.append(
                Assignment(
                    client=i,
                    spec=spec,
                    param_count=count,
                    budget=budget,
                    mem_util=mem_util,
                    bw_util=bw_util,
                    random_tries=outcome.random_tries if outcome else None,
                    hit_tmax=outcome.hit_tmax if outcome else None,
                    feasible=fits,
                    trained=trains,
                    failed=failed,
                    train_loss=loss,
                )
            )

        survivors = failure_filter(updates, failures)
        if survivors:
            aggregate(store, survivors, space, weighted=cfg.weighted_aggregation)

        report: DistillReport | None = None
        server_s = 0.0
        if _distill_active(cfg):
            _, report = distill_round(store, space, cfg.distill, distill_rng)
            server_s = (
                cfg.cost.train_step_s_per_param
                * param_count(space, full_spec(space))
                * cfg.distill.n
                * cfg.distill.t_skd
            )

        if not _store_is_finite(store):
            raise RuntimeError(
                f"non-finite parameters in the global store after round {round_idx}"
            )

        accuracy = evaluate(store, space, test, eval_spec)
        objective = global_objective(store, space, clients, eval_spec)
        clock.advance(max(round_dt + server_s, MIN_ROUND_S))

        losses = [a.train_loss for a in assignments if a.train_loss is not None]
        mem_utils = [a.mem_util for a in assignments if a.mem_util is not None]
        bw_utils = [a.bw_util for a in assignments if a.bw_util is not None]
        metrics.append(
            RoundMetrics(
                round=round_idx,
                accuracy=accuracy,
                mean_mem_util=float(np.mean(mem_utils)) if mem_utils else None,
                mean_bw_util=float(np.mean(bw_utils)) if bw_utils else None,
                hit_rate=hit_rate(outcomes) if outcomes else None,
                failures=len(failures),
                elapsed_s=clock.now_s,
                global_train_loss=objective,
                mean_local_loss=float(np.mean(losses)) if losses else None,
                distill_initial_loss=report.initial_loss if report else None,
                distill_final_loss=report.final_loss if report else None,
                assignments=assignments,
            )
        )
        if on_round_end is not None:
            on_round_end(round_idx, store, metrics[-1])

    hashes = {
        "selection": select_hash.hexdigest(),
        "budgets": budget_hash.hexdigest(),
    }
    return RunResult(metrics=metrics, store=store, stream_hashes=hashes)


def summarize(result: RunResult, cfg: ExperimentConfig) -> dict:
    """Run-level summary used by the CLI's summary.json and compare tables."""
    rows = [a for m in result.metrics for a in m.assignments]
    mem = [a.mem_util for a in rows if a.mem_util is not None]
    bw = [a.bw_util for a in rows if a.bw_util is not None]
    hits = [a.hit_tmax for a in rows if a.hit_tmax is not None]
    return {
        "strategy": cfg.strategy,
        "seed": cfg.seed,
        "rounds": cfg.rounds,
        "final_accuracy": result.metrics[-1].accuracy,
        "best_accuracy": max(m.accuracy for m in result.metrics),
        "mean_mem_util": float(np.mean(mem)) if mem else None,
        "mean_bw_util": float(np.mean(bw)) if bw else None,
        "hit_rate": float(np.mean(hits)) if hits else None,
        "total_failures": int(sum(m.failures for m in result.metrics)),
        "simulated_s": result.metrics[-1].elapsed_s,
        "stream_hashes": result.stream_hashes,
    }


def search_only_run(cfg: ExperimentConfig, epsilon: float, t_max: int) -> dict:
    """Budget/search simulation without any training: measures how well the
    chosen specs fill the sampled budgets, and the draw-exhaustion hit rate."""
    space = cfg.space
    pool = SamplingPool(space, derive_rng(cfg.seed, "search"))
    select_rng = derive_rng(cfg.seed, "select")
    budget_rng = derive_rng(cfg.seed, "budget")
    traces = load_limit_traces(cfg.limits)
    clock = SimClock()

    mem_utils: list[float] = []
    bw_utils: list[float] = []
    outcomes: list[SearchOutcome] = []
    for _ in range(cfg.rounds):
        selected = np.sort(
            select_rng.choice(cfg.total_clients, size=cfg.clients_per_round, replace=False)
        )
        round_dt = 0.0
        for i in (int(j) for j in selected):
            budget = budget_at(cfg.limits, traces, i, clock.now_s, budget_rng)
            outcome = search(pool, budget, cfg.batch, cfg.cost, epsilon, t_max)
            outcomes.append(outcome)
            mem_util, bw_util = utilization(space, outcome.chosen, budget, cfg.batch, cfg.cost)
            if mem_util is not None:
                mem_utils.append(mem_util)
            if bw_util is not None:
                bw_utils.append(bw_util)
            comm_s = comm_time(space, outcome.chosen, cfg.cost, budget)
            round_dt = max(round_dt, min(comm_s, cfg.cost.comm_deadline_s))
        clock.advance(max(round_dt, MIN_ROUND_S))

    return {
        "epsilon": epsilon,
        "t_max": t_max,
        "mean_mem_util": float(np.mean(mem_utils)) if mem_utils else None,
        "mean_bw_util": float(np.mean(bw_utils)) if bw_utils else None,
        "hit_rate": hit_rate(outcomes),
    }
