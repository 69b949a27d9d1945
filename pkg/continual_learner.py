"""Prototype bank, continual objectives and the episodic training loop."""

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from checkpoints import RunStore
from episodes import ClassPool, LabeledBatch, Regime, TaskSequence, sample_task_sequence
from target_cnn import WeightBundle, forward_embed, zero_weights
from weight_generator import GeneratorState, generate_weights, save_generator

logger = logging.getLogger(__name__)


class Objective(str, Enum):
    CLASS_INCREMENTAL = "class_incremental"
    TASK_INCREMENTAL = "task_incremental"
    CROSS_ENTROPY = "cross_entropy"


class PrototypeMode(str, Enum):
    FROZEN = "frozen"
    RECOMPUTED = "recomputed"


class PrototypeError(ValueError):
    """Raised on missing labels in a support set or missing bank entries."""


class ObjectiveError(RuntimeError):
    """Raised when a loss cell is not finite."""

    def __init__(self, t: int, tau: int, message: str):
        super().__init__(f"cell (t={t}, tau={tau}): {message}")
        self.t = t
        self.tau = tau


class TrainingError(RuntimeError):
    """Raised when training has to stop."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class TrainConfig:
    """Episodic training configuration."""

    T: int = 2
    K: int = 5
    N: int = 1
    N_query: int = 5
    learning_rate: float = 1e-4
    lr_decay_steps: int = 100_000
    lr_decay_rate: float = 0.97
    total_steps: int = 1000
    objective: Objective = Objective.CLASS_INCREMENTAL
    prototype_mode: PrototypeMode = PrototypeMode.FROZEN
    regime: Regime = Regime.SINGLE_DOMAIN
    episodes_per_step: int = 1
    final_task_only: bool = False  # minimize only the J_{T-1} term
    divergence_threshold: float = 1e4
    checkpoint_every: int = 0
    eval_every: int = 0
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        self.objective = Objective(self.objective)
        self.prototype_mode = PrototypeMode(self.prototype_mode)
        self.regime = Regime(self.regime)

    def validate(self) -> None:
        """Validate configuration.

        Raises:
            ValueError: On an out-of-range field
        """
        for name in ("T", "K", "N", "N_query", "total_steps", "lr_decay_steps", "episodes_per_step"):
            if getattr(self, name) < 1:
                raise ValueError(f"train.{name} must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("train.learning_rate must be > 0")
        if not 0 < self.lr_decay_rate <= 1:
            raise ValueError("train.lr_decay_rate must be in (0, 1]")
        for name in ("checkpoint_every", "eval_every", "log_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"train.{name} must be >= 0")


class PrototypeBank:
    """Class prototypes indexed by (task, class).

    In frozen mode an entry is written once and never replaced; in recomputed
    mode a task's entries may be rewritten with newer weights.
    """

    def __init__(self, frozen: bool = True):
        self.frozen = frozen
        self.entries: Dict[Tuple[int, int], torch.Tensor] = {}
        self.frozen_at: Dict[Tuple[int, int], int] = {}
        self._ways: Dict[int, int] = {}

    def __len__(self) -> int:
        return len(self._ways)

    @property
    def tasks(self) -> List[int]:
        return sorted(self._ways)

    def way(self, tau: int) -> int:
        return self._ways[tau]

    def write_task(self, tau: int, prototypes: torch.Tensor, step: int) -> None:
        """Store the K prototypes of task ``tau`` computed with theta_step."""
        if self.frozen and tau in self._ways:
            raise PrototypeError(f"Prototypes of task {tau} are frozen")
        for k in range(prototypes.shape[0]):
            self.entries[(tau, k)] = prototypes[k]
            self.frozen_at[(tau, k)] = step
        self._ways[tau] = prototypes.shape[0]

    def task_prototypes(self, tau: int) -> torch.Tensor:
        if tau not in self._ways:
            raise PrototypeError(f"No prototypes for task {tau}")
        return torch.stack([self.entries[(tau, k)] for k in range(self._ways[tau])])

    def stacked(self) -> torch.Tensor:
        """All prototypes, task-major then class, shape [sum_tau K, embed_dim]."""
        if not self._ways:
            raise PrototypeError("Prototype bank is empty")
        return torch.cat([self.task_prototypes(tau) for tau in self.tasks])

    def offset(self, tau: int) -> int:
        """Index of (tau, 0) in ``stacked()``."""
        if tau not in self._ways:
            raise PrototypeError(f"No prototypes for task {tau}")
        return sum(self._ways[other] for other in self.tasks if other < tau)

    def restricted(self, last_task: int) -> "PrototypeBank":
        """View holding tasks 0..last_task only."""
        bank = PrototypeBank(self.frozen)
        for tau in self.tasks:
            if tau <= last_task:
                for k in range(self._ways[tau]):
                    bank.entries[(tau, k)] = self.entries[(tau, k)]
                    bank.frozen_at[(tau, k)] = self.frozen_at[(tau, k)]
                bank._ways[tau] = self._ways[tau]
        return bank


def compute_prototypes(weights: WeightBundle, support: LabeledBatch, way: Optional[int] = None) -> torch.Tensor:
    """Mean support embedding per label.

    Args:
        weights: Weights embedding the support
        support: Support batch
        way: Number of labels, defaults to max label + 1

    Returns:
        Prototypes [K, embed_dim]
    """
    embeddings = forward_embed(weights, support.images)
    way = way if way is not None else int(support.labels.max()) + 1
    one_hot = F.one_hot(support.labels, way).to(embeddings.dtype)
    counts = one_hot.sum(dim=0)
    if bool((counts == 0).any()):
        missing = [k for k in range(way) if counts[k] == 0]
        raise PrototypeError(f"Support has no samples for labels {missing}")
    return (one_hot.t() @ embeddings) / counts.unsqueeze(1)


def squared_distances(embeddings: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    return ((embeddings.unsqueeze(1) - prototypes.unsqueeze(0)) ** 2).sum(dim=-1)


def task_incremental_logprobs(query_embeds: torch.Tensor, bank: PrototypeBank, tau: int) -> torch.Tensor:
    """log p(y=k | x, tau): softmax of negative squared distances within task tau."""
    return torch.log_softmax(-squared_distances(query_embeds, bank.task_prototypes(tau)), dim=1)


def class_incremental_logprobs(query_embeds: torch.Tensor, bank: PrototypeBank) -> torch.Tensor:
    """log p(y=k, tau | x) over every (tau, k) in the bank, task-major column order."""
    return torch.log_softmax(-squared_distances(query_embeds, bank.stacked()), dim=1)


@dataclass
class ObjectiveResult:
    """Accumulated loss J with its per-(t, tau) cells."""

    loss: torch.Tensor
    cells: Dict[Tuple[int, int], torch.Tensor]
    weights: List[WeightBundle]
    bank: Optional[PrototypeBank] = None

    def loss_matrix(self) -> np.ndarray:
        T = len(self.weights)
        matrix = np.full((T, T), np.nan)
        for (t, tau), value in self.cells.items():
            matrix[t, tau] = float(value)
        return matrix


def _check_cell(value: torch.Tensor, t: int, tau: int) -> torch.Tensor:
    if not torch.isfinite(value):
        raise ObjectiveError(t, tau, f"non-finite loss {float(value)}")
    return value


def _active_cells(T: int, t: int, final_task_only: bool) -> range:
    if final_task_only and t != T - 1:
        return range(0)
    return range(t + 1)


def episode_objective(state: GeneratorState, tasks: TaskSequence, cfg: TrainConfig) -> ObjectiveResult:
    """J = sum_t sum_{tau<=t} NLL of query set tau under theta_t.

    Each task's support is read exactly once, at its own step, in frozen mode.
    Each cell is the mean NLL over the cell's query samples.
    """
    if cfg.objective is Objective.CROSS_ENTROPY:
        return cross_entropy_objective(state, tasks, cfg)

    T = len(tasks)
    recompute = cfg.prototype_mode is PrototypeMode.RECOMPUTED
    bank = PrototypeBank(frozen=not recompute)
    prev = zero_weights(state.arch, dtype=state.model.dtype)
    weights: List[WeightBundle] = []
    queries: List[LabeledBatch] = []
    cells: Dict[Tuple[int, int], torch.Tensor] = {}
    total = None

    for t, episode in enumerate(tasks):
        support = episode.support
        theta = generate_weights(state, support, prev)
        weights.append(theta)
        if recompute:
            for tau in range(t):
                bank.write_task(tau, compute_prototypes(theta, tasks[tau].support, tasks[tau].way), t)
        bank.write_task(t, compute_prototypes(theta, support, episode.way), t)
        queries.append(episode.query)

        for tau in _active_cells(T, t, cfg.final_task_only):
            query = queries[tau]
            embeds = forward_embed(theta, query.images)
            if cfg.objective is Objective.CLASS_INCREMENTAL:
                logprobs = class_incremental_logprobs(embeds, bank)
                targets = query.labels + bank.offset(tau)
            else:
                logprobs = task_incremental_logprobs(embeds, bank, tau)
                targets = query.labels
            cell = _check_cell(F.nll_loss(logprobs, targets), t, tau)
            cells[(t, tau)] = cell
            total = cell if total is None else total + cell
        prev = theta

    return ObjectiveResult(total, cells, weights, bank)


def cross_entropy_objective(state: GeneratorState, tasks: TaskSequence, cfg: TrainConfig) -> ObjectiveResult:
    """Same accumulation as ``episode_objective`` with the embedding read as K-way logits."""
    embed_dim = state.arch.embed_dim
    for index, episode in enumerate(tasks):
        if episode.way != embed_dim:
            raise ValueError(f"Cross-entropy needs embed_dim == K, task {index} has K={episode.way}, embed_dim={embed_dim}")

    T = len(tasks)
    prev = zero_weights(state.arch, dtype=state.model.dtype)
    weights: List[WeightBundle] = []
    queries: List[LabeledBatch] = []
    cells: Dict[Tuple[int, int], torch.Tensor] = {}
    total = None
    for t, episode in enumerate(tasks):
        theta = generate_weights(state, episode.support, prev)
        weights.append(theta)
        queries.append(episode.query)
        for tau in _active_cells(T, t, cfg.final_task_only):
            logits = forward_embed(theta, queries[tau].images)
            cell = _check_cell(F.cross_entropy(logits, queries[tau].labels), t, tau)
            cells[(t, tau)] = cell
            total = cell if total is None else total + cell
        prev = theta
    return ObjectiveResult(total, cells, weights)


@dataclass
class SequenceScores:
    """Accuracies on one task sequence.

    ``ti[t, tau]``: theta_t on task tau given the task. ``ci[t, r]``: theta_t on
    the merged tasks 0..r, predicting class and task. NaN above the diagonal.
    """

    ti: np.ndarray
    ci: np.ndarray

    @classmethod
    def empty(cls, T: int) -> "SequenceScores":
        return cls(np.full((T, T), np.nan), np.full((T, T), np.nan))


def fill_scores(
    scores: SequenceScores,
    t: int,
    bank: PrototypeBank,
    query_embeds: Sequence[torch.Tensor],
    query_labels: Sequence[torch.Tensor],
) -> None:
    """Score row t from query embeddings of tasks 0..t under theta_t."""
    for tau in range(t + 1):
        predictions = task_incremental_logprobs(query_embeds[tau], bank, tau).argmax(dim=1)
        scores.ti[t, tau] = float((predictions == query_labels[tau]).double().mean())
    for last in range(t + 1):
        restricted = bank.restricted(last)
        correct = total = 0
        for tau in range(last + 1):
            predictions = class_incremental_logprobs(query_embeds[tau], restricted).argmax(dim=1)
            correct += int((predictions == query_labels[tau] + restricted.offset(tau)).sum())
            total += int(query_labels[tau].numel())
        scores.ci[t, last] = correct / total


def score_sequence(
    state: GeneratorState,
    tasks: TaskSequence,
    prototype_mode: PrototypeMode = PrototypeMode.FROZEN,
) -> SequenceScores:
    """Task- and class-incremental accuracies of theta_0..theta_{T-1}."""
    T = len(tasks)
    scores = SequenceScores.empty(T)
    recompute = PrototypeMode(prototype_mode) is PrototypeMode.RECOMPUTED
    bank = PrototypeBank(frozen=not recompute)
    prev = zero_weights(state.arch, dtype=state.model.dtype)
    queries: List[LabeledBatch] = []
    with torch.no_grad():
        for t, episode in enumerate(tasks):
            support = episode.support
            theta = generate_weights(state, support, prev)
            if recompute:
                for tau in range(t):
                    bank.write_task(tau, compute_prototypes(theta, tasks[tau].support, tasks[tau].way), t)
            bank.write_task(t, compute_prototypes(theta, support, episode.way), t)
            queries.append(episode.query)
            embeds = [forward_embed(theta, query.images) for query in queries]
            fill_scores(scores, t, bank, embeds, [query.labels for query in queries])
            prev = theta
    return scores


def cross_entropy_scores(state: GeneratorState, tasks: TaskSequence) -> SequenceScores:
    """Scores of a cross-entropy model, which predicts only the label within a task.

    ``ti[t, tau]`` is the logits accuracy of theta_t on task tau. ``ci[t, r]`` is
    the same prediction pooled over the queries of tasks 0..r; a cross-entropy
    head cannot tell tasks apart, so this is an upper bound of its merged accuracy.
    """
    T = len(tasks)
    scores = SequenceScores.empty(T)
    prev = zero_weights(state.arch, dtype=state.model.dtype)
    queries: List[LabeledBatch] = []
    with torch.no_grad():
        for t, episode in enumerate(tasks):
            theta = generate_weights(state, episode.support, prev)
            queries.append(episode.query)
            correct = [(forward_embed(theta, q.images).argmax(dim=1) == q.labels) for q in queries]
            for tau in range(t + 1):
                scores.ti[t, tau] = float(correct[tau].double().mean())
                pooled = torch.cat(correct[:tau + 1])
                scores.ci[t, tau] = float(pooled.double().mean())
            prev = theta
    return scores


def learning_rate_at(cfg: TrainConfig, step: int) -> float:
    """Exponential decay: lr * rate ** (step / decay_steps)."""
    return cfg.learning_rate * cfg.lr_decay_rate ** (step / cfg.lr_decay_steps)


def metrics_columns(T: int, eval_columns: Sequence[str] = ()) -> List[str]:
    cells = [f"J_cell_{t}_{tau}" for t in range(T) for tau in range(t + 1)]
    return ["step", "lr", "J_total"] + cells + list(eval_columns)


@dataclass
class TrainResult:
    state: GeneratorState
    history: List[Dict[str, float]] = field(default_factory=list)
    checkpoint: Optional[Path] = None


def train(
    state: GeneratorState,
    pools: Sequence[ClassPool],
    cfg: TrainConfig,
    store: Optional[RunStore] = None,
    on_eval: Optional[Callable[[GeneratorState], Dict[str, float]]] = None,
    eval_columns: Sequence[str] = (),
    manifest: Optional[dict] = None,
) -> TrainResult:
    """Episodic SGD over the generator parameters.

    Args:
        state: Generator state, updated in place
        pools: Training pools
        cfg: Training configuration
        store: Run store for metrics.csv and checkpoints
        on_eval: Hook called every ``cfg.eval_every`` steps; its dict is merged
            into the metrics row
        eval_columns: Metric names the hook may return
        manifest: Extra checkpoint manifest fields

    Returns:
        Train result with per-step history and the last checkpoint
    """
    cfg.validate()
    parameters = list(state.model.parameters())
    if state.optimizer is None:
        state.optimizer = torch.optim.SGD(parameters, lr=cfg.learning_rate)
    optimizer = state.optimizer
    if store is not None:
        store.open_metrics(metrics_columns(cfg.T, eval_columns))

    result = TrainResult(state)
    logger.info(
        f"Training {cfg.objective.value} objective: T={cfg.T}, {cfg.K}-way {cfg.N}-shot, "
        f"steps {state.step}..{cfg.total_steps}"
    )
    while state.step < cfg.total_steps:
        step = state.step
        rng = np.random.default_rng([cfg.seed, step])  # episodes depend only on (seed, step)
        lr = learning_rate_at(cfg, step)
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.zero_grad(set_to_none=True)

        total = 0.0
        cells: Dict[Tuple[int, int], float] = defaultdict(float)
        for _ in range(cfg.episodes_per_step):
            tasks = sample_task_sequence(pools, cfg.T, cfg.regime, cfg.K, cfg.N, cfg.N_query, rng)
            try:
                objective = episode_objective(state, tasks, cfg)
            except ObjectiveError as e:
                raise TrainingError(step, str(e)) from e
            (objective.loss / cfg.episodes_per_step).backward()
            total += float(objective.loss) / cfg.episodes_per_step
            for key, value in objective.cells.items():
                cells[key] += float(value) / cfg.episodes_per_step

        if not math.isfinite(total) or total > cfg.divergence_threshold:
            raise TrainingError(step, f"loss {total:.4g} exceeds divergence threshold {cfg.divergence_threshold:g}")
        for parameter in parameters:
            if parameter.grad is not None and not torch.isfinite(parameter.grad).all():
                raise TrainingError(step, "non-finite gradient")
        optimizer.step()
        state.step += 1

        row: Dict[str, float] = {"step": state.step, "lr": lr, "J_total": total}
        row.update({f"J_cell_{t}_{tau}": value for (t, tau), value in sorted(cells.items())})
        if on_eval is not None and cfg.eval_every and state.step % cfg.eval_every == 0:
            row.update(on_eval(state))
        result.history.append(row)
        if store is not None:
            store.append_metrics(row)
        if cfg.log_every and state.step % cfg.log_every == 0:
            logger.info(f"step {state.step}: J={total:.4f} lr={lr:.3g}")
        else:
            logger.debug(f"step {state.step}: J={total:.4f}")
        if store is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            result.checkpoint = save_generator(store, state, manifest)

    if store is not None and (result.checkpoint is None or result.checkpoint.name != f"ckpt_{state.step}"):
        result.checkpoint = save_generator(store, state, manifest)
    return result
