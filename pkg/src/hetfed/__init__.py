"""hetfed: a trace-driven simulator for system-heterogeneous federated
learning that assigns each client, per round, the largest subnet of a global
model fitting its memory and bandwidth budget, aggregates the heterogeneous
subnets element-wise, and sharpens the global model with data-free in-place
distillation on the server."""

from .aggregate import (
    ClientUpdate,
    aggregate,
    failure_filter,
    load_checkpoint,
    save_checkpoint,
    scatter_count,
)
from .costs import Budget, CostParams, comm_time, feasible, memory_cost
from .data import Dataset, PartitionPlan, gen_synthetic, partition, standardize
from .distill import DistillConfig, DistillReport, distill_round, gaussian_batch
from .nn import (
    DenseLayer,
    MlpModel,
    OptimizerState,
    apply_update,
    backward_ce,
    ce_loss,
    forward,
    init_optimizer,
    kl_loss_and_grad,
)
from .orchestrator import (
    DataConfig,
    ExperimentConfig,
    OptimizerConfig,
    RoundMetrics,
    RunResult,
    evaluate,
    run,
    search_only_run,
    utilization,
)
from .resources import (
    BandwidthTrace,
    LimitSpec,
    RangeLimit,
    SimClock,
    TraceLimit,
    budget_at,
    check_failure,
    load_trace,
)
from .search import SamplingPool, SearchOutcome, hit_rate, init_pool, pool_best_feasible, search
from .subnets import (
    ParamStore,
    SearchSpace,
    SubnetSpec,
    full_spec,
    init_store,
    materialize,
    param_count,
    random_spec,
    smallest_spec,
)

__version__ = "0.1.0"
