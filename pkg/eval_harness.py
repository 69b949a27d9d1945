"""Episodic evaluation, backward transfer, embedding export and plots."""

import asyncio
import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
import torch.nn.functional as F  # noqa: E402

from baselines import ConstPNState, constpn_scores  # noqa: E402
from continual_learner import (  # noqa: E402
    PrototypeBank,
    PrototypeMode,
    SequenceScores,
    compute_prototypes,
    score_sequence,
)
from episodes import ClassPool, LabeledBatch, Regime, TaskSequence, resample_task_sequence, sample_task_sequence  # noqa: E402
from target_cnn import forward_embed, zero_weights  # noqa: E402
from weight_generator import GeneratorState, generate_weights  # noqa: E402

logger = logging.getLogger(__name__)

Z_95 = 1.96

Scorer = Callable[[TaskSequence], SequenceScores]
System = Union[GeneratorState, ConstPNState, Scorer]


class Protocol(str, Enum):
    TASK_INCREMENTAL = "task_incremental"
    CLASS_INCREMENTAL = "class_incremental"


@dataclass
class EvalConfig:
    """Evaluation protocol settings."""

    T_test: int = 2
    K: int = 5
    N: int = 1
    N_query: int = 5
    episodes: int = 1024
    runs_per_episode: int = 16
    regime: Regime = Regime.SINGLE_DOMAIN
    prototype_mode: PrototypeMode = PrototypeMode.FROZEN
    workers: int = 4
    seed: int = 0

    def __post_init__(self):
        self.regime = Regime(self.regime)
        self.prototype_mode = PrototypeMode(self.prototype_mode)

    def validate(self) -> None:
        if self.T_test < 1:
            raise ValueError("eval.T_test must be >= 1")
        for name in ("K", "N", "N_query", "episodes", "runs_per_episode", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"eval.{name} must be >= 1")


@dataclass
class MetricsTable:
    """Mean accuracy and 95% CI half-width per (theta_t, task or task range).

    ``acc[t, tau]`` is the accuracy of theta_t on task tau (task-incremental) or
    on merged tasks 0..tau (class-incremental). Entries above the diagonal are NaN.
    """

    mode: Protocol
    acc: np.ndarray
    ci95: np.ndarray
    episodes: int
    runs_per_episode: int
    trained_T: Optional[int] = None

    @property
    def T(self) -> int:
        return self.acc.shape[0]

    def column_label(self, tau: int) -> str:
        return str(tau) if self.mode is Protocol.TASK_INCREMENTAL else f"0-{tau}"

    def to_rows(self) -> List[Dict[str, object]]:
        rows = []
        for t in range(self.T):
            for tau in range(t + 1):
                rows.append({
                    "mode": self.mode.value,
                    "t": t,
                    "tau_or_range": self.column_label(tau),
                    "acc": float(self.acc[t, tau]),
                    "ci95": float(self.ci95[t, tau]),
                })
        return rows


def make_scorer(system: System, prototype_mode: PrototypeMode = PrototypeMode.FROZEN) -> Scorer:
    if isinstance(system, GeneratorState):
        return lambda tasks: score_sequence(system, tasks, prototype_mode)
    if isinstance(system, ConstPNState):
        return lambda tasks: constpn_scores(system, tasks)
    if callable(system):
        return system
    raise TypeError(f"Cannot evaluate {type(system).__name__}")


def _episode_scores(scorer: Scorer, pools: Sequence[ClassPool], cfg: EvalConfig, index: int) -> SequenceScores:
    """Mean scores of one episode over its resampled runs."""
    rng = np.random.default_rng([cfg.seed, index])
    base = sample_task_sequence(pools, cfg.T_test, cfg.regime, cfg.K, cfg.N, cfg.N_query, rng)
    runs = []
    with torch.no_grad():
        for run in range(cfg.runs_per_episode):
            tasks = base if run == 0 else resample_task_sequence(pools, base, cfg.N, cfg.N_query, rng)
            runs.append(scorer(tasks))
    return SequenceScores(
        np.mean([scores.ti for scores in runs], axis=0),
        np.mean([scores.ci for scores in runs], axis=0),
    )


async def _gather_episodes(scorer: Scorer, pools: Sequence[ClassPool], cfg: EvalConfig) -> List[SequenceScores]:
    loop = asyncio.get_running_loop()
    with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
        futures = [
            loop.run_in_executor(executor, _episode_scores, scorer, pools, cfg, index)
            for index in range(cfg.episodes)
        ]
        return await asyncio.gather(*futures)


def _reduce(matrices: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and 95% CI half-width over the episode axis, lower triangle only."""
    T = matrices.shape[1]
    acc = np.full((T, T), np.nan)
    ci95 = np.full((T, T), np.nan)
    lower = np.tril_indices(T)
    values = matrices[:, lower[0], lower[1]]
    acc[lower] = values.mean(axis=0)
    if values.shape[0] > 1:
        ci95[lower] = Z_95 * values.std(axis=0, ddof=1) / math.sqrt(values.shape[0])
    else:
        ci95[lower] = 0.0
    return acc, ci95


def evaluate_protocols(
    system: System,
    pools: Sequence[ClassPool],
    cfg: EvalConfig,
    trained_T: Optional[int] = None,
) -> Dict[Protocol, MetricsTable]:
    """Both protocol tables from one pass over the sampled episodes.

    Args:
        system: Generator state, ConstPN state, or a scorer callable
        pools: Held-out pools
        cfg: Evaluation configuration
        trained_T: Training sequence length (rows beyond it are extrapolation)

    Returns:
        Table per protocol
    """
    cfg.validate()
    scorer = make_scorer(system, cfg.prototype_mode)
    logger.info(
        f"Evaluating {cfg.episodes} episodes x {cfg.runs_per_episode} runs, "
        f"T_test={cfg.T_test}, {cfg.K}-way {cfg.N}-shot"
    )
    results = asyncio.run(_gather_episodes(scorer, pools, cfg))
    tables = {}
    for protocol, matrices in (
        (Protocol.TASK_INCREMENTAL, np.stack([r.ti for r in results])),
        (Protocol.CLASS_INCREMENTAL, np.stack([r.ci for r in results])),
    ):
        acc, ci95 = _reduce(matrices)
        tables[protocol] = MetricsTable(protocol, acc, ci95, cfg.episodes, cfg.runs_per_episode, trained_T)
        logger.info(f"{protocol.value}: final row {np.round(acc[-1], 4).tolist()}")
    return tables


def evaluate(
    system: System,
    pools: Sequence[ClassPool],
    cfg: EvalConfig,
    protocol: Protocol,
    trained_T: Optional[int] = None,
) -> MetricsTable:
    """Evaluate under one protocol. See ``evaluate_protocols``."""
    return evaluate_protocols(system, pools, cfg, trained_T)[Protocol(protocol)]


def backward_transfer(table: MetricsTable) -> Tuple[np.ndarray, float]:
    """delta[tau, t] = acc[t, tau] - acc[tau, tau] for t > tau, and their mean.

    Args:
        table: Task-incremental table

    Returns:
        Tuple of (delta matrix with NaN where undefined, mean delta; 0.0 when T=1)
    """
    if table.mode is not Protocol.TASK_INCREMENTAL:
        raise ValueError("Backward transfer needs a task-incremental table")
    T = table.T
    deltas = np.full((T, T), np.nan)
    for tau in range(T):
        for t in range(tau + 1, T):
            deltas[tau, t] = table.acc[t, tau] - table.acc[tau, tau]
    defined = deltas[~np.isnan(deltas)]
    return deltas, float(defined.mean()) if defined.size else 0.0


def forgetting(table: MetricsTable) -> float:
    """Mean drop from the best earlier accuracy to the final accuracy per task."""
    if table.mode is not Protocol.TASK_INCREMENTAL:
        raise ValueError("Forgetting needs a task-incremental table")
    if table.T < 2:
        return 0.0
    drops = [np.max(table.acc[tau:table.T - 1, tau]) - table.acc[-1, tau] for tau in range(table.T - 1)]
    return float(np.mean(drops))


@dataclass
class MamlReport:
    max_rel_err_W: float
    max_rel_err_b: float
    prototype_alignment: float

    def passed(self, tolerance: float = 1e-5) -> bool:
        return max(self.max_rel_err_W, self.max_rel_err_b, self.prototype_alignment) <= tolerance


def relative_error(actual: torch.Tensor, expected: torch.Tensor, floor: float = 0.0) -> float:
    """Max absolute difference over the larger of both magnitudes and ``floor``."""
    if not expected.numel():
        return 0.0
    scale = max(float(expected.abs().max()), float(actual.abs().max()), floor)
    diff = float((actual - expected).abs().max())
    return diff / scale if scale > 0 else diff


def maml_one_step_check(
    embedder: Callable[[torch.Tensor], torch.Tensor],
    support: LabeledBatch,
    gamma: float,
    num_classes: Optional[int] = None,
    init_W: Optional[torch.Tensor] = None,
    init_b: Optional[torch.Tensor] = None,
) -> MamlReport:
    """Compare one SGD step on a logits layer with its closed form.

    With label-independent init the step is
    dW_k = (gamma/n) sum_i (1[y_i=k] - 1/C) f(x_i) and
    db_k = (gamma/n) sum_i (1[y_i=k] - 1/C), so every row of dW is a
    combination of class prototypes.

    Args:
        embedder: Fixed embedding function f
        support: Support batch (n samples)
        gamma: Step size
        num_classes: C, defaults to max label + 1
        init_W: Logits weights [C, D], zero when omitted; rows must be equal
        init_b: Logits bias [C], zero when omitted; entries must be equal

    Returns:
        Relative errors of dW, db and of the prototype form of dW
    """
    labels = support.labels
    with torch.no_grad():
        features = embedder(support.images).to(torch.float64)
    n, dim = features.shape
    C = num_classes or int(labels.max()) + 1
    W = init_W.to(torch.float64).clone() if init_W is not None else torch.zeros(C, dim, dtype=torch.float64)
    b = init_b.to(torch.float64).clone() if init_b is not None else torch.zeros(C, dtype=torch.float64)
    if not torch.equal(W, W[:1].expand_as(W)) or not torch.equal(b, b[:1].expand_as(b)):
        raise ValueError("Logits layer init must be label-independent (equal rows)")
    W.requires_grad_(True)
    b.requires_grad_(True)

    loss = F.cross_entropy(features @ W.t() + b, labels)
    grad_W, grad_b = torch.autograd.grad(loss, [W, b])
    step_W, step_b = -gamma * grad_W, -gamma * grad_b

    coefficients = F.one_hot(labels, C).to(torch.float64) - 1.0 / C
    closed_W = (gamma / n) * coefficients.t() @ features
    closed_b = (gamma / n) * coefficients.sum(dim=0)

    one_hot = F.one_hot(labels, C).to(torch.float64)
    counts = one_hot.sum(dim=0)
    prototypes = (one_hot.t() @ features) / counts.clamp(min=1).unsqueeze(1)
    weighted = counts.unsqueeze(1) * prototypes
    from_prototypes = (gamma / n) * (weighted - weighted.sum(dim=0, keepdim=True) / C)

    # db is zero up to rounding for balanced labels
    floor_W = gamma * float(features.abs().max())
    floor_b = gamma
    return MamlReport(
        max_rel_err_W=relative_error(step_W, closed_W, floor_W),
        max_rel_err_b=relative_error(step_b, closed_b, floor_b),
        prototype_alignment=relative_error(step_W, from_prototypes, floor_W),
    )


EMBEDDING_META = ("step", "task", "label", "kind")


def export_embeddings(state: GeneratorState, tasks: TaskSequence, path: Path) -> int:
    """Write prototype and query embeddings under every theta_t to CSV.

    Rows for theta_t cover the frozen prototypes and query sets of tasks 0..t.

    Returns:
        Number of rows written
    """
    embed_dim = state.arch.embed_dim
    header = list(EMBEDDING_META) + [f"e{i}" for i in range(embed_dim)]
    bank = PrototypeBank(frozen=True)
    prev = zero_weights(state.arch, dtype=state.model.dtype)
    queries: List[LabeledBatch] = []
    count = 0
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle, torch.no_grad():
        writer = csv.writer(handle)
        writer.writerow(header)
        for t, episode in enumerate(tasks):
            support = episode.support
            theta = generate_weights(state, support, prev)
            bank.write_task(t, compute_prototypes(theta, support, episode.way), t)
            queries.append(episode.query)
            for tau in range(t + 1):
                for k, vector in enumerate(bank.task_prototypes(tau)):
                    writer.writerow([t, tau, k, "prototype"] + [repr(float(v)) for v in vector])
                    count += 1
                embeds = forward_embed(theta, queries[tau].images)
                for label, vector in zip(queries[tau].labels.tolist(), embeds):
                    writer.writerow([t, tau, label, "query"] + [repr(float(v)) for v in vector])
                    count += 1
            prev = theta
    logger.info(f"Wrote {count} embedding rows to {path}")
    return count


@dataclass
class EmbeddingTable:
    step: np.ndarray
    task: np.ndarray
    label: np.ndarray
    kind: np.ndarray
    values: np.ndarray  # [rows, embed_dim]


def read_embeddings(path: Path) -> EmbeddingTable:
    with Path(path).open(newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        rows = list(reader)
    value_columns = len(header) - len(EMBEDDING_META)
    return EmbeddingTable(
        step=np.array([int(row[0]) for row in rows], dtype=np.int64),
        task=np.array([int(row[1]) for row in rows], dtype=np.int64),
        label=np.array([int(row[2]) for row in rows], dtype=np.int64),
        kind=np.array([row[3] for row in rows]),
        values=np.array([[float(v) for v in row[4:]] for row in rows], dtype=np.float64).reshape(len(rows), value_columns),
    )


def write_metrics_csv(table: MetricsTable, path: Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=["mode", "t", "tau_or_range", "acc", "ci95"])
        writer.writeheader()
        for row in table.to_rows():
            writer.writerow({**row, "acc": repr(row["acc"]), "ci95": repr(row["ci95"])})
    return path


def plot_metrics_table(table: MetricsTable, path: Path, title: Optional[str] = None) -> Path:
    """Accuracy vs task (range), one series per theta_t.

    Series for theta_t with t < trained_T use bullet markers, extrapolated ones
    use diamonds and dashed lines.
    """
    path = Path(path)
    trained_T = table.trained_T if table.trained_T is not None else table.T
    fig, ax = plt.subplots(figsize=(6, 4))
    for t in range(table.T):
        xs = np.arange(t + 1)
        extrapolated = t >= trained_T
        ax.errorbar(
            xs,
            table.acc[t, :t + 1],
            yerr=table.ci95[t, :t + 1],
            marker="D" if extrapolated else "o",
            linestyle="--" if extrapolated else "-",
            capsize=2,
            label=f"θ_{t}" + (" (extrapolated)" if extrapolated else ""),
        )
    ax.set_xticks(range(table.T))
    ax.set_xticklabels([table.column_label(tau) for tau in range(table.T)])
    ax.set_xlabel("task" if table.mode is Protocol.TASK_INCREMENTAL else "task range")
    ax.set_ylabel("accuracy")
    ax.set_title(title or table.mode.value.replace("_", "-"))
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
