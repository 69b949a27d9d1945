"""Desk-scale experiments: mini-batch consistency, cross-entropy collisions, forgetting."""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from baselines import constpn_train
from checkpoints import RunStore
from continual_learner import (
    Objective,
    PrototypeBank,
    TrainConfig,
    class_incremental_logprobs,
    compute_prototypes,
    cross_entropy_scores,
    train,
)
from episodes import ClassPool, LabeledBatch, Regime, TaskSequence, resample_task_sequence, sample_task_sequence
from eval_harness import EvalConfig, Protocol, backward_transfer, evaluate_protocols, plot_metrics_table, write_metrics_csv
from target_cnn import Arch, WeightBundle, forward_embed, zero_weights
from weight_generator import GeneratorConfig, GeneratorState, generate_weights, init_generator, unroll

logger = logging.getLogger(__name__)

MINIBATCH_TASKS = 4


@dataclass
class ExperimentResult:
    name: str
    metrics: Dict[str, float] = field(default_factory=dict)
    checks: Dict[str, bool] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps({"name": self.name, "metrics": self.metrics, "checks": self.checks}, indent=2))
        return path


def concat_supports(batches: Sequence[LabeledBatch]) -> LabeledBatch:
    """Concatenate support batches that share one label space."""
    return LabeledBatch(torch.cat([b.images for b in batches]), torch.cat([b.labels for b in batches]))


def _logits_accuracy(weights: WeightBundle, query: LabeledBatch) -> float:
    return float((forward_embed(weights, query.images).argmax(dim=1) == query.labels).double().mean())


def minibatch_arms(state: GeneratorState, tasks: TaskSequence) -> Dict[str, float]:
    """Accuracies of the mini-batch arms on four same-class 1-shot batches.

    concatenated: one call on all four batches; pairs: 2+2; sequential:
    1+1+1+1; single: the first batch alone. Scored with logits on the last
    task's query set.
    """
    supports = [episode.support for episode in tasks]
    query = tasks[len(tasks) - 1].query
    zero = zero_weights(state.arch, dtype=state.model.dtype)
    with torch.no_grad():
        concatenated = generate_weights(state, concat_supports(supports), zero)
        pairs = generate_weights(
            state,
            concat_supports(supports[2:4]),
            generate_weights(state, concat_supports(supports[0:2]), zero),
        )
        sequential = zero
        for support in supports:
            sequential = generate_weights(state, support, sequential)
        single = generate_weights(state, supports[0], zero)
    return {
        "concatenated": _logits_accuracy(concatenated, query),
        "pairs": _logits_accuracy(pairs, query),
        "sequential": _logits_accuracy(sequential, query),
        "single": _logits_accuracy(single, query),
    }


def late_task_accuracy(state: GeneratorState, tasks: TaskSequence, first: int) -> Dict[str, float]:
    """Class-incremental accuracy of the last weights on the queries of tasks ``first`` onward.

    Prototypes of every task are frozen at their own step; predictions range
    over all classes of all tasks.
    """
    with torch.no_grad():
        weights = unroll(state, tasks)
        bank = PrototypeBank(frozen=True)
        for tau, episode in enumerate(tasks):
            bank.write_task(tau, compute_prototypes(weights[tau], episode.support, episode.way), tau)
        correct = total = 0
        for tau in range(first, len(tasks)):
            query = tasks[tau].query
            predictions = class_incremental_logprobs(forward_embed(weights[-1], query.images), bank).argmax(dim=1)
            correct += int((predictions == query.labels + bank.offset(tau)).sum())
            total += int(query.labels.numel())
    return {"late_tasks": correct / total}


def _mean_over_episodes(fn, pools: Sequence[ClassPool], eval_cfg: EvalConfig, T: int, regime: Regime, K: int, N: int) -> Dict[str, float]:
    totals: Dict[str, List[float]] = {}
    for index in range(eval_cfg.episodes):
        rng = np.random.default_rng([eval_cfg.seed, index])
        base = sample_task_sequence(pools, T, regime, K, N, eval_cfg.N_query, rng)
        for run in range(eval_cfg.runs_per_episode):
            tasks = base if run == 0 else resample_task_sequence(pools, base, N, eval_cfg.N_query, rng)
            for key, value in fn(tasks).items():
                totals.setdefault(key, []).append(value)
    return {key: float(np.mean(values)) for key, values in totals.items()}


def minibatch_experiment(
    train_pools: Sequence[ClassPool],
    test_pools: Sequence[ClassPool],
    arch: Arch,
    gen_cfg: GeneratorConfig,
    train_cfg: TrainConfig,
    eval_cfg: EvalConfig,
    store: Optional[RunStore] = None,
) -> ExperimentResult:
    """Sequential 1-shot batches vs one concatenated batch, cross-entropy objective."""
    arch = replace(arch, embed_dim=train_cfg.K)
    cfg = replace(train_cfg, T=MINIBATCH_TASKS, N=1, regime=Regime.SAME_CLASSES, objective=Objective.CROSS_ENTROPY)
    state = init_generator(gen_cfg, arch, cfg.seed)
    train(state, train_pools, cfg, store=store)

    metrics = _mean_over_episodes(
        lambda tasks: minibatch_arms(state, tasks),
        test_pools, eval_cfg, MINIBATCH_TASKS, Regime.SAME_CLASSES, cfg.K, 1,
    )
    result = ExperimentResult("minibatch", metrics)
    result.checks["sequential_matches_concatenated"] = abs(metrics["sequential"] - metrics["concatenated"]) <= 0.02
    result.checks["sequential_beats_single"] = metrics["sequential"] - metrics["single"] >= 0.03
    result.checks["concatenated_beats_single"] = metrics["concatenated"] - metrics["single"] >= 0.03
    logger.info(f"Mini-batch arms: {metrics}")
    return result


def collision_experiment(
    train_pools: Sequence[ClassPool],
    test_pools: Sequence[ClassPool],
    arch: Arch,
    gen_cfg: GeneratorConfig,
    train_cfg: TrainConfig,
    eval_cfg: EvalConfig,
    store: Optional[RunStore] = None,
) -> ExperimentResult:
    """Cross-entropy vs prototypical CHT at T=2 and equal budget."""
    cfg = replace(train_cfg, T=2)
    ce_arch = replace(arch, embed_dim=cfg.K)
    ce_state = init_generator(gen_cfg, ce_arch, cfg.seed)
    train(ce_state, train_pools, replace(cfg, objective=Objective.CROSS_ENTROPY))
    proto_state = init_generator(gen_cfg, arch, cfg.seed)
    train(proto_state, train_pools, replace(cfg, objective=Objective.CLASS_INCREMENTAL), store=store)

    eval_cfg = replace(eval_cfg, T_test=2, K=cfg.K, N=cfg.N)
    ce = evaluate_protocols(lambda tasks: cross_entropy_scores(ce_state, tasks), test_pools, eval_cfg, trained_T=2)
    proto = evaluate_protocols(proto_state, test_pools, eval_cfg, trained_T=2)
    metrics = {
        "cross_entropy_merged": float(ce[Protocol.CLASS_INCREMENTAL].acc[1, 1]),
        "prototypical_merged": float(proto[Protocol.CLASS_INCREMENTAL].acc[1, 1]),
        "cross_entropy_theta0": float(ce[Protocol.TASK_INCREMENTAL].acc[0, 0]),
    }
    result = ExperimentResult("collision", metrics)
    result.checks["prototypical_beats_cross_entropy"] = (
        metrics["prototypical_merged"] - metrics["cross_entropy_merged"] >= 0.10
    )
    logger.info(f"Collision experiment: {metrics}")
    return result


def forgetting_experiment(
    train_pools: Sequence[ClassPool],
    test_pools: Sequence[ClassPool],
    arch: Arch,
    gen_cfg: GeneratorConfig,
    train_cfg: TrainConfig,
    eval_cfg: EvalConfig,
    store: Optional[RunStore] = None,
) -> ExperimentResult:
    """CHT trained at T=3 vs ConstPN; evaluated to T_test=5."""
    cfg = replace(train_cfg, T=3)
    state = init_generator(gen_cfg, arch, cfg.seed)
    train(state, train_pools, cfg, store=store)
    constpn = constpn_train(train_pools, cfg, arch)

    eval_cfg = replace(eval_cfg, T_test=5, K=cfg.K, N=cfg.N)
    tables = evaluate_protocols(state, test_pools, eval_cfg, trained_T=3)
    baseline = evaluate_protocols(constpn, test_pools, eval_cfg, trained_T=3)
    if store is not None:
        for protocol, table in tables.items():
            write_metrics_csv(table, store.run_dir / f"metrics_{protocol.value}.csv")
            plot_metrics_table(table, store.run_dir / f"{protocol.value}.svg")

    deltas, mean_delta = backward_transfer(tables[Protocol.TASK_INCREMENTAL])
    trained = deltas[:3, :3]
    ci = tables[Protocol.CLASS_INCREMENTAL].acc
    chance = 1.0 / (cfg.K * 5)
    metrics = {
        "mean_backward_transfer": mean_delta,
        "min_backward_transfer": float(np.nanmin(trained)),
        "cht_ci_0_2": float(ci[2, 2]),
        "constpn_ci_0_2": float(baseline[Protocol.CLASS_INCREMENTAL].acc[2, 2]),
        "cht_ci_0_4": float(ci[4, 4]),
        "cht_ci_tasks_3_4": _mean_over_episodes(
            lambda tasks: late_task_accuracy(state, tasks, first=3),
            test_pools, eval_cfg, 5, eval_cfg.regime, cfg.K, cfg.N,
        )["late_tasks"],
        "chance_0_4": chance,
    }
    result = ExperimentResult("forgetting", metrics)
    result.checks["no_catastrophic_forgetting"] = metrics["min_backward_transfer"] >= -0.02
    result.checks["beats_constpn"] = metrics["cht_ci_0_2"] - metrics["constpn_ci_0_2"] >= 0.01
    result.checks["extrapolation_above_chance"] = metrics["cht_ci_tasks_3_4"] > chance
    logger.info(f"Forgetting experiment: {metrics}")
    return result


EXPERIMENTS = {
    "minibatch": minibatch_experiment,
    "collision": collision_experiment,
    "forgetting": forgetting_experiment,
}
