"""Server-side, data-free in-place distillation.

After aggregation the server samples fresh subnets from the space (weights
inherited from the store), trains each for a fixed number of Adam steps to
match the frozen global model's soft labels on standard-normal inputs, and
folds the trained subnets back into the store.  No client data, public data,
or generated data is involved: the only inputs are noise batches.

Two update modes exist.  ``aggregate_weights`` (default) folds the trained
subnet weights into the store after the last iteration.  ``gradient_eq2``
instead applies, every iteration, the subnet-averaged gradient of the KD
loss with respect to the global model's own parameters via Adam.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregate import ClientUpdate, aggregate
from .nn import (
    MlpModel,
    apply_update,
    backward,
    forward,
    init_optimizer,
    kl_loss_and_grad,
    kl_teacher_grad,
    zero_grads,
)
from .subnets import ParamStore, SearchSpace, SubnetSpec, full_spec, materialize, random_spec

UPDATE_MODES = ("aggregate_weights", "gradient_eq2")


@dataclass(frozen=True)
class DistillConfig:
    n: int
    t_skd: int = 100
    batch: int = 64
    learning_rate: float = 0.001
    update_mode: str = "aggregate_weights"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.t_skd < 0:
            raise ValueError("t_skd must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.update_mode not in UPDATE_MODES:
            raise ValueError(f"update_mode must be one of {UPDATE_MODES}")


@dataclass(frozen=True)
class DistillReport:
    """Mean KD loss over the sampled subnets before and after training;
    None when no iterations ran."""

    initial_loss: float | None
    final_loss: float | None


def sample_distill_subnets(
    space: SearchSpace, n: int, rng: np.random.Generator
) -> list[SubnetSpec]:
    """n independent uniform draws from the whole space (duplicates allowed)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [random_spec(space, rng) for _ in range(n)]


def gaussian_batch(batch: int, in_dim: int, rng: np.random.Generator) -> np.ndarray:
    """[batch, in_dim] of i.i.d. standard-normal samples."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    return rng.standard_normal((batch, in_dim))


def _mean_kd_loss(
    teacher: MlpModel, students: list[MlpModel], batch: int, in_dim: int, rng
) -> float:
    losses = []
    for student in students:
        x = gaussian_batch(batch, in_dim, rng)
        t_logits, _ = forward(teacher, x)
        s_logits, _ = forward(student, x)
        loss, _ = kl_loss_and_grad(s_logits, t_logits)
        losses.append(loss)
    return float(np.mean(losses))


def distill_round(
    store: ParamStore,
    space: SearchSpace,
    cfg: DistillConfig,
    rng: np.random.Generator,
) -> tuple[ParamStore, DistillReport]:
    """Run one round of in-place distillation against the store, in place.

    Teacher logits come from a frozen copy of the pre-distillation store for
    the whole round.  Subnets inherit their initial weights by slicing the
    store, so sampling only full specs is a fixed point: the KD loss starts
    at zero and the store is unchanged.
    """
    if cfg.t_skd == 0:
        return store, DistillReport(None, None)

    teacher, _ = materialize(space, full_spec(space), store)
    specs = sample_distill_subnets(space, cfg.n, rng)
    students = []
    for spec in specs:
        model, plan = materialize(space, spec, store)
        students.append((spec, model, plan))
    opt_states = [
        init_optimizer(model, "adam", cfg.learning_rate) for _, model, _ in students
    ]

    eq2 = cfg.update_mode == "gradient_eq2"
    if eq2:
        # shares the store's arrays so global updates land directly in it
        store_model = MlpModel(store.layers)
        store_opt = init_optimizer(store_model, "adam", cfg.learning_rate)

    initial = _mean_kd_loss(teacher, [m for _, m, _ in students], cfg.batch, space.in_dim, rng)

    for _ in range(cfg.t_skd):
        if eq2:
            global_grads = zero_grads(teacher)
        for (_, student, _), opt in zip(students, opt_states):
            x = gaussian_batch(cfg.batch, space.in_dim, rng)
            t_logits, t_cache = forward(teacher, x)
            s_logits, s_cache = forward(student, x)
            _, dstudent = kl_loss_and_grad(s_logits, t_logits)
            grads = backward(student, s_cache, dstudent)
            apply_update(student, grads, opt)
            if eq2:
                dteacher = kl_teacher_grad(s_logits, t_logits)
                for g_acc, g in zip(global_grads, backward(teacher, t_cache, dteacher)):
                    g_acc.dweights += g.dweights / cfg.n
                    g_acc.dbias += g.dbias / cfg.n
        if eq2:
            apply_update(store_model, global_grads, store_opt)

    final = _mean_kd_loss(teacher, [m for _, m, _ in students], cfg.batch, space.in_dim, rng)

    if not eq2:
        updates = [
            ClientUpdate(i, spec, plan, model, 1.0 / cfg.n)
            for i, (spec, model, plan) in enumerate(students)
        ]
        aggregate(store, updates, space)

    return store, DistillReport(initial, final)
