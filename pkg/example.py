#!/usr/bin/env python3
"""Example script demonstrating continual few-shot learning."""

import logging

import numpy as np
import torch
from dotenv import load_dotenv

from config import build_pools, load_run_config
from continual_learner import PrototypeBank, class_incremental_logprobs, compute_prototypes, score_sequence, train
from episodes import resample_task_sequence, sample_task_sequence
from target_cnn import forward_embed, zero_weights
from weight_generator import generate_weights, init_generator

# Setup logging
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)

logger = logging.getLogger(__name__)


def example_continual_learning(steps: int = 200):
    """Example: Train briefly on synthetic pools and score one task sequence."""
    load_dotenv()

    config = load_run_config("desk_synthetic", [f"train.total_steps={steps}", "train.checkpoint_every=0"])
    train_pools, test_pools = build_pools(config.data)
    state = init_generator(config.to_generator(), config.to_arch(), config.generator.seed)
    train(state, train_pools, config.to_train())

    cfg = config.to_train()
    tasks = sample_task_sequence(test_pools, cfg.T + 1, cfg.regime, cfg.K, cfg.N, cfg.N_query, np.random.default_rng(7))
    scores = score_sequence(state, tasks)
    for t in range(len(tasks)):
        logger.info(f"theta_{t}: task-incremental {np.round(scores.ti[t, :t + 1], 3).tolist()}")
        logger.info(f"theta_{t}: class-incremental {np.round(scores.ci[t, :t + 1], 3).tolist()}")
    return state, test_pools


def example_private_prototypes(state, pools):
    """Example: A data holder classifies with prototypes the generator never saw.

    The generator only receives each task's shared support set. The resulting
    weights are shipped to the data holder, who embeds its own samples of the
    same classes into prototypes and classifies its queries locally.
    """
    cfg = load_run_config("desk_synthetic").to_train()
    rng = np.random.default_rng(11)
    public = sample_task_sequence(pools, cfg.T, cfg.regime, cfg.K, cfg.N, cfg.N_query, rng)
    private = resample_task_sequence(pools, public, cfg.N + 2, cfg.N_query, rng)

    bank = PrototypeBank(frozen=True)
    weights = zero_weights(state.arch)
    with torch.no_grad():
        for t, (shared, own) in enumerate(zip(public, private)):
            # server side: support only
            weights = generate_weights(state, shared.support, weights)
            # data holder side: private prototypes under the received weights
            bank.write_task(t, compute_prototypes(weights, own.support, own.way), t)

        correct = total = 0
        for tau, own in enumerate(private):
            query = own.query
            predictions = class_incremental_logprobs(forward_embed(weights, query.images), bank).argmax(dim=1)
            correct += int((predictions == query.labels + bank.offset(tau)).sum())
            total += query.labels.numel()
    logger.info(f"Private class-incremental accuracy over {len(private)} tasks: {correct / total:.3f}")


if __name__ == "__main__":
    # Uncomment the example you want to run:

    # Example 1: Train briefly and score a sequence one task longer than training
    state, test_pools = example_continual_learning()

    # Example 2: Classify with privately held prototypes
    # example_private_prototypes(state, test_pools)
