"""Comparison systems: Constant ProtoNet and Merged-HT."""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from checkpoints import RunStore, check_fingerprint, fingerprint, load_checkpoint
from continual_learner import (
    PrototypeBank,
    SequenceScores,
    TrainConfig,
    TrainResult,
    compute_prototypes,
    fill_scores,
    learning_rate_at,
    squared_distances,
    train,
)
from episodes import ClassPool, TaskSequence, merge_episodes, sample_episode
from target_cnn import Arch, WeightBundle, arch_from_dict, arch_to_dict, forward_embed, init_weights, zero_weights
from weight_generator import GeneratorState, generate_weights

logger = logging.getLogger(__name__)

CONSTPN_WAY_FACTOR = 5


@dataclass
class ConstPNState:
    """One fixed embedding CNN trained as a Prototypical Network."""

    weights: WeightBundle
    optimizer: Optional[torch.optim.Optimizer] = None
    step: int = 0

    @property
    def arch(self) -> Arch:
        return self.weights.arch

    def parameters(self) -> List[torch.Tensor]:
        return [tensor for _, tensor in self.weights]


def constpn_fingerprint(arch: Arch) -> str:
    return fingerprint({"arch": arch_to_dict(arch), "baseline": "constpn"})


def init_constpn(arch: Arch, seed: int) -> ConstPNState:
    weights = init_weights(arch, seed)
    for _, tensor in weights:
        tensor.requires_grad_(True)
    return ConstPNState(weights)


def constpn_way(pools: Sequence[ClassPool], K: int) -> int:
    """Training way: 5K, or the largest way every pool can provide."""
    wanted = CONSTPN_WAY_FACTOR * K
    available = min(pool.num_classes for pool in pools)
    if available < wanted:
        logger.warning(f"ConstPN wants {wanted}-way episodes but pools hold {available} classes; using {available}-way")
        return available
    return wanted


def prototypical_loss(weights: WeightBundle, episode) -> torch.Tensor:
    support = episode.support
    query = episode.query
    prototypes = compute_prototypes(weights, support, episode.way)
    logits = -squared_distances(forward_embed(weights, query.images), prototypes)
    return F.cross_entropy(logits, query.labels)


def constpn_train(
    pools: Sequence[ClassPool],
    cfg: TrainConfig,
    arch: Arch,
    state: Optional[ConstPNState] = None,
    store: Optional[RunStore] = None,
) -> ConstPNState:
    """Train the fixed CNN with the prototypical loss on 5K-way episodes.

    Args:
        pools: Training pools
        cfg: Training configuration (K is the evaluation way; N is kept)
        arch: Target architecture shared with the generated CNN
        state: State to resume, fresh when omitted
        store: Run store for metrics.csv and checkpoints

    Returns:
        Trained ConstPN state
    """
    cfg.validate()
    state = state or init_constpn(arch, cfg.seed)
    way = constpn_way(pools, cfg.K)
    for tensor in state.parameters():
        tensor.requires_grad_(True)
    if state.optimizer is None:
        state.optimizer = torch.optim.SGD(state.parameters(), lr=cfg.learning_rate)
    if store is not None:
        store.open_metrics(["step", "lr", "loss"])

    logger.info(f"Training ConstPN on {way}-way {cfg.N}-shot episodes for {cfg.total_steps} steps")
    while state.step < cfg.total_steps:
        rng = np.random.default_rng([cfg.seed, state.step])
        lr = learning_rate_at(cfg, state.step)
        for group in state.optimizer.param_groups:
            group["lr"] = lr
        state.optimizer.zero_grad(set_to_none=True)
        total = 0.0
        for _ in range(cfg.episodes_per_step):
            pool = pools[int(rng.integers(len(pools)))]
            episode = sample_episode(pool, way, cfg.N, cfg.N_query, rng)
            loss = prototypical_loss(state.weights, episode) / cfg.episodes_per_step
            loss.backward()
            total += float(loss)
        state.optimizer.step()
        state.step += 1
        if store is not None:
            store.append_metrics({"step": state.step, "lr": lr, "loss": total})
        if cfg.log_every and state.step % cfg.log_every == 0:
            logger.info(f"ConstPN step {state.step}: loss={total:.4f}")
        if store is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_constpn(store, state)

    if store is not None:
        save_constpn(store, state)
    return state


def save_constpn(store: RunStore, state: ConstPNState) -> Path:
    return store.save_checkpoint(
        state.step,
        list(state.weights),
        constpn_fingerprint(state.arch),
        {"kind": "constpn", "arch": arch_to_dict(state.arch)},
    )


def load_constpn(path: Path, arch: Optional[Arch] = None) -> ConstPNState:
    tensors, manifest = load_checkpoint(Path(path))
    if manifest.get("kind") != "constpn":
        raise ValueError(f"{path} is not a ConstPN checkpoint (kind={manifest.get('kind')})")
    arch = arch or arch_from_dict(manifest["arch"])
    check_fingerprint(path, manifest, constpn_fingerprint(arch))
    weights = WeightBundle(arch, tensors)
    weights.validate()
    return ConstPNState(weights, step=int(manifest["step"]))


def constpn_scores(state: ConstPNState, tasks: TaskSequence) -> SequenceScores:
    """Score a sequence with the fixed CNN; every row uses the same weights."""
    scores = SequenceScores.empty(len(tasks))
    bank = PrototypeBank(frozen=True)
    embeds, labels = [], []
    with torch.no_grad():
        for t, episode in enumerate(tasks):
            bank.write_task(t, compute_prototypes(state.weights, episode.support, episode.way), t)
            query = episode.query
            embeds.append(forward_embed(state.weights, query.images))
            labels.append(query.labels)
            fill_scores(scores, t, bank, embeds, labels)
    return scores


def constpn_eval(state: ConstPNState, tasks: TaskSequence, protocol: str) -> np.ndarray:
    """Per-task accuracies.

    ``task_incremental``: accuracy on each task on its own.
    ``class_incremental``: accuracy on merged tasks 0..r for every r.
    """
    scores = constpn_scores(state, tasks)
    last = len(tasks) - 1
    if protocol == "task_incremental":
        return scores.ti[last].copy()
    if protocol == "class_incremental":
        return scores.ci[last].copy()
    raise ValueError(f"Unknown protocol: {protocol}")


def merged_ht_train(
    state: GeneratorState,
    pools: Sequence[ClassPool],
    cfg: TrainConfig,
    store: Optional[RunStore] = None,
) -> TrainResult:
    """Train a single-task HT on merged (T*K)-way episodes."""
    merged_cfg = replace(cfg, T=1, K=cfg.T * cfg.K)
    logger.info(f"Training Merged-HT on {merged_cfg.K}-way episodes")
    return train(state, pools, merged_cfg, store=store, manifest={"baseline": "merged_ht", "merged_T": cfg.T})


def merged_ht_eval(state: GeneratorState, tasks: TaskSequence) -> SequenceScores:
    """Score a sequence with one generator call per prefix of merged tasks.

    Row t uses weights generated from tasks 0..t concatenated into a single
    support set.
    """
    merged_way = sum(episode.way for episode in tasks)
    if merged_way > state.cfg.max_way:
        raise ValueError(f"Merged way {merged_way} exceeds generator max_way {state.cfg.max_way}")
    scores = SequenceScores.empty(len(tasks))
    zero = zero_weights(state.arch, dtype=state.model.dtype)
    with torch.no_grad():
        for t in range(len(tasks)):
            merged = merge_episodes(tasks.tasks[:t + 1])
            support = merged.support
            theta = generate_weights(state, support, zero)
            prototypes = compute_prototypes(theta, support, merged.way)
            bank = PrototypeBank(frozen=True)
            offset = 0
            for tau in range(t + 1):
                way = tasks[tau].way
                bank.write_task(tau, prototypes[offset:offset + way], t)
                offset += way
            queries = [tasks[tau].query for tau in range(t + 1)]
            embeds = [forward_embed(theta, query.images) for query in queries]
            fill_scores(scores, t, bank, embeds, [query.labels for query in queries])
    return scores
