"""Tests of the desk-scale experiments.

The tiny-budget runs check that every arm is computed and reported; the
desk-scale runs check the thresholds themselves and take up to an hour.
"""

import json
from dataclasses import replace

import numpy as np
import pytest

from checkpoints import RunStore
from config import build_pools, load_run_config
from continual_learner import TrainConfig, score_sequence
from episodes import Regime, make_synthetic_pool, sample_task_sequence
from eval_harness import EvalConfig
from experiments import (
    EXPERIMENTS,
    ExperimentResult,
    collision_experiment,
    concat_supports,
    forgetting_experiment,
    late_task_accuracy,
    minibatch_arms,
    minibatch_experiment,
)
from weight_generator import init_generator


@pytest.fixture
def pools(tiny_arch):
    pool = make_synthetic_pool(20, 12, tiny_arch.input_shape, seed=0)
    return [pool], [make_synthetic_pool(10, 12, tiny_arch.input_shape, seed=1)]


@pytest.fixture
def budget():
    train_cfg = TrainConfig(T=2, K=3, N=1, N_query=2, learning_rate=1e-3, total_steps=2, log_every=0)
    eval_cfg = EvalConfig(K=3, N=1, N_query=2, episodes=2, runs_per_episode=1, workers=1)
    return train_cfg, eval_cfg


class TestMinibatch:

    def test_concat_supports(self, pools):
        tasks = sample_task_sequence(pools[0], 2, Regime.SAME_CLASSES, 3, 1, 2, np.random.default_rng(0))
        merged = concat_supports([task.support for task in tasks])
        assert merged.labels.tolist() == tasks[0].support_labels.tolist() + tasks[1].support_labels.tolist()

    def test_arms(self, tiny_gen_cfg, tiny_arch, pools):
        state = init_generator(tiny_gen_cfg, replace(tiny_arch, embed_dim=3), seed=0)
        tasks = sample_task_sequence(pools[1], 4, Regime.SAME_CLASSES, 3, 1, 2, np.random.default_rng(0))
        arms = minibatch_arms(state, tasks)
        assert set(arms) == {"concatenated", "pairs", "sequential", "single"}
        assert all(0.0 <= value <= 1.0 for value in arms.values())

    @pytest.mark.slow
    def test_experiment_reports_every_check(self, tiny_gen_cfg, tiny_arch, pools, budget):
        result = minibatch_experiment(*pools, tiny_arch, tiny_gen_cfg, *budget)
        assert set(result.checks) == {
            "sequential_matches_concatenated", "sequential_beats_single", "concatenated_beats_single",
        }


class TestLateTaskAccuracy:

    def test_from_first_task_is_full_class_incremental(self, tiny_state, make_tasks):
        tasks = make_tasks(T=3)
        expected = score_sequence(tiny_state, tasks).ci[2, 2]
        assert late_task_accuracy(tiny_state, tasks, first=0)["late_tasks"] == pytest.approx(expected)

    def test_counts_only_later_queries(self, tiny_state, make_tasks):
        tasks = make_tasks(T=3, K=3, N_query=3)
        value = late_task_accuracy(tiny_state, tasks, first=2)["late_tasks"]
        # 9 queries of the last task
        assert value * 9 == pytest.approx(round(value * 9))
        assert 0.0 <= value <= 1.0


class TestCollision:

    @pytest.mark.slow
    def test_experiment_reports_both_arms(self, tiny_gen_cfg, tiny_arch, pools, budget):
        result = collision_experiment(*pools, tiny_arch, tiny_gen_cfg, *budget)
        assert {"cross_entropy_merged", "prototypical_merged"} <= set(result.metrics)
        assert list(result.checks) == ["prototypical_beats_cross_entropy"]


class TestForgetting:

    @pytest.mark.slow
    def test_experiment_writes_tables(self, tiny_gen_cfg, tiny_arch, pools, budget, tmp_path):
        store = RunStore(tmp_path)
        result = forgetting_experiment(*pools, tiny_arch, tiny_gen_cfg, *budget, store=store)
        assert result.metrics["chance_0_4"] == pytest.approx(1 / 15)
        assert 0.0 <= result.metrics["cht_ci_tasks_3_4"] <= 1.0
        assert (tmp_path / "metrics_task_incremental.csv").exists()
        assert (tmp_path / "class_incremental.svg").exists()
        saved = json.loads(result.save(tmp_path / "forgetting.json").read_text())
        assert saved["name"] == "forgetting"
        assert set(saved["checks"]) == set(result.checks)


@pytest.mark.slow
class TestDeskScale:

    @pytest.mark.parametrize("name,steps", [
        ("minibatch", 20_000),
        ("collision", 2000),
        ("forgetting", 2000),
    ])
    def test_checks_hold(self, name, steps):
        config = load_run_config("desk_synthetic", [f"train.total_steps={steps}"])
        train_pools, test_pools = build_pools(config.data)
        result = EXPERIMENTS[name](
            train_pools,
            test_pools,
            config.to_arch(),
            config.to_generator(),
            config.to_train(),
            config.to_eval(),
        )
        assert result.passed, (result.checks, result.metrics)


def test_registry():
    assert sorted(EXPERIMENTS) == ["collision", "forgetting", "minibatch"]
    assert ExperimentResult("x", checks={"a": True, "b": False}).passed is False
