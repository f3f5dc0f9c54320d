"""Meta-training across task datasets with sign-based inner adaptation.

The inner loop adapts a copy of the shared parameters with
``theta - alpha * sign(grad)`` steps on the task's support pairs; the outer
update sums the query-loss gradients evaluated at the adapted parameters
and applies one plain gradient step.  Because the sign function has zero
derivative almost everywhere, the adaptation Jacobian collapses to the
identity and no second-order terms appear anywhere.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from tsrate.core import CriterionKind
from tsrate.judge import filter_judgments
from tsrate.numutil import derive_seed
from tsrate.rater import (
    PairBatch,
    RaterWeights,
    init_weights,
    pairs_from_judgments,
    pairwise_loss_and_grad,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetaConfig:
    inner_lr_alpha: float = 4e-3
    outer_lr_beta: float = 2.5e-4
    inner_steps: int = 14
    meta_batch_tasks: int = 10
    within_task_batch: int = 16
    epochs: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.inner_lr_alpha <= 0 or self.outer_lr_beta <= 0:
            raise ValueError("learning rates must be positive")
        if self.inner_steps < 0 or self.epochs < 0:
            raise ValueError("step counts must be non-negative")
        if self.meta_batch_tasks < 1 or self.within_task_batch < 1:
            raise ValueError("batch sizes must be positive")


@dataclass(frozen=True)
class AdaptConfig:
    shots: int = 10
    steps: int = 10
    lr: float = 1e-4

    def __post_init__(self):
        if self.shots < 0 or self.steps < 0 or self.lr < 0:
            raise ValueError("adaptation settings must be non-negative")


@dataclass
class MetaTask:
    """One dataset's judged pairs for one criterion, split 4:4:2."""

    task_id: str
    criterion: CriterionKind
    support: PairBatch
    query: PairBatch
    test: PairBatch


def split_442(n: int) -> tuple[int, int, int]:
    """Support/query/test sizes at the fixed 4:4:2 ratio."""
    n_support = (2 * n) // 5
    n_query = (2 * n) // 5
    return n_support, n_query, n - n_support - n_query


def build_tasks(
    datasets,
    criterion: CriterionKind,
    seed: int,
    tau: float = 0.5,
) -> list[MetaTask]:
    """Turn judged datasets into meta-tasks for one criterion.

    ``datasets`` is an iterable of (task_id, records, features_by_block).
    Records are confidence-filtered, shuffled with a task-derived seed, and
    split 4:4:2; datasets with fewer than 5 surviving judgments are skipped
    with a warning.
    """
    tasks = []
    for task_id, records, features_by_block in datasets:
        relevant = [r for r in records if r.criterion is criterion]
        kept = filter_judgments(relevant, tau)
        if len(kept) < 5:
            logger.warning(
                "task %s skipped for %s: only %d filtered judgments (need >= 5)",
                task_id,
                criterion,
                len(kept),
            )
            continue
        batch = pairs_from_judgments(kept, features_by_block)
        rng = np.random.default_rng(derive_seed(seed, f"split:{task_id}:{criterion}"))
        order = rng.permutation(len(batch))
        n_s, n_q, _ = split_442(len(batch))
        tasks.append(
            MetaTask(
                task_id=task_id,
                criterion=criterion,
                support=batch.take(order[:n_s]),
                query=batch.take(order[n_s : n_s + n_q]),
                test=batch.take(order[n_s + n_q :]),
            )
        )
    return tasks


def inner_adapt(
    weights: RaterWeights,
    support: PairBatch,
    alpha: float,
    steps: int,
    batch_size: int | None = None,
    seed: int = 0,
) -> RaterWeights:
    """signSGD adaptation: steps of theta <- theta - alpha * sign(grad).

    Uses the full support set per step when it fits in ``batch_size``,
    otherwise cycles minibatches of a single seeded shuffle.  The input
    weights are never modified.
    """
    adapted = weights.copy()
    if steps == 0:
        return adapted
    n = len(support)
    use_minibatches = batch_size is not None and n > batch_size
    if use_minibatches:
        order = np.random.default_rng(seed).permutation(n)
        cursor = 0
    for _step in range(steps):
        if use_minibatches:
            take = []
            while len(take) < batch_size:
                take.append(order[cursor])
                cursor = (cursor + 1) % n
            mini = support.take(np.array(take))
        else:
            mini = support
        _, grad = pairwise_loss_and_grad(adapted, mini)
        adapted.theta -= alpha * np.sign(grad)
    return adapted


def meta_step(
    weights: RaterWeights,
    task_batch: list[MetaTask],
    config: MetaConfig,
    epoch: int = 0,
) -> dict:
    """One outer update over a batch of tasks; mutates ``weights``.

    Per task: adapt a copy on the support set, take the query-loss gradient
    at the adapted parameters, and sum the contributions (a duplicated task
    counts twice).  Returns per-batch mean losses for logging.
    """
    if not task_batch:
        raise ValueError("meta step needs at least one task")
    total = np.zeros_like(weights.theta)
    query_losses = []
    support_losses = []
    for task in task_batch:
        try:
            adapted = inner_adapt(
                weights,
                task.support,
                config.inner_lr_alpha,
                config.inner_steps,
                batch_size=config.within_task_batch,
                seed=derive_seed(config.seed, f"inner:{epoch}:{task.task_id}"),
            )
            support_loss, _ = pairwise_loss_and_grad(adapted, task.support)
            query_loss, grad = pairwise_loss_and_grad(adapted, task.query)
        except Exception as exc:
            raise RuntimeError(f"meta step failed on task {task.task_id!r}") from exc
        total += grad
        query_losses.append(query_loss)
        support_losses.append(support_loss)
    weights.theta -= config.outer_lr_beta * total
    return {
        "mean_query_loss": float(np.mean(query_losses)),
        "mean_support_loss": float(np.mean(support_losses)),
    }


def meta_train(
    tasks: list[MetaTask],
    config: MetaConfig,
    criterion: CriterionKind | None = None,
    metrics_sink=None,
) -> RaterWeights:
    """Run the full meta-training loop for one criterion's tasks.

    Each epoch shuffles the tasks with the run seed and walks them in
    meta-batches.  ``metrics_sink``, when given, receives one dict per epoch
    with the mean support/query losses.
    """
    if not tasks:
        raise ValueError("no meta-tasks to train on")
    weights = init_weights(config.seed, criterion)
    rng = np.random.default_rng(config.seed)
    for epoch in range(config.epochs):
        order = rng.permutation(len(tasks))
        epoch_query, epoch_support = [], []
        for start in range(0, len(tasks), config.meta_batch_tasks):
            batch = [tasks[k] for k in order[start : start + config.meta_batch_tasks]]
            stats = meta_step(weights, batch, config, epoch=epoch)
            epoch_query.append(stats["mean_query_loss"])
            epoch_support.append(stats["mean_support_loss"])
        if metrics_sink is not None:
            metrics_sink(
                {
                    "epoch": epoch,
                    "criterion": str(criterion) if criterion else None,
                    "mean_query_loss": float(np.mean(epoch_query)),
                    "mean_support_loss": float(np.mean(epoch_support)),
                }
            )
    return weights


def few_shot_adapt(
    weights: RaterWeights, shots: PairBatch | None, config: AdaptConfig
) -> RaterWeights:
    """Plain gradient-descent fine-tuning on a handful of judged pairs.

    Zero shots (or an empty batch) returns the weights unchanged, which is
    the 0-shot evaluation path.
    """
    adapted = weights.copy()
    if shots is None or len(shots) == 0 or config.steps == 0:
        return adapted
    for _step in range(config.steps):
        _, grad = pairwise_loss_and_grad(adapted, shots)
        adapted.theta -= config.lr * grad
    return adapted
