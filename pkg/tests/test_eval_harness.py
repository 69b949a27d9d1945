"""Tests for the evaluation protocols, transfer metrics and exports."""

import math

import numpy as np
import pytest
import torch

from continual_learner import SequenceScores
from episodes import ClassPool, ClassRecord, LabeledBatch
from eval_harness import (
    EMBEDDING_META,
    EvalConfig,
    MetricsTable,
    Protocol,
    _reduce,
    backward_transfer,
    evaluate,
    evaluate_protocols,
    export_embeddings,
    forgetting,
    maml_one_step_check,
    plot_metrics_table,
    read_embeddings,
    relative_error,
    write_metrics_csv,
)
from target_cnn import forward_embed, init_weights
from weight_generator import unroll


def _oracle(tasks):
    T = len(tasks)
    ones = np.tril(np.ones((T, T)))
    ones[np.triu_indices(T, k=1)] = np.nan
    return SequenceScores(ones.copy(), ones.copy())


def _first_label(tasks):
    """Always predicts label 0 of task 0."""
    T = len(tasks)
    scores = SequenceScores.empty(T)
    for t in range(T):
        for tau in range(t + 1):
            scores.ti[t, tau] = float((tasks[tau].query_labels == 0).mean())
            hits = (tasks[0].query_labels == 0).sum()
            total = sum(tasks[r].query_labels.size for r in range(tau + 1))
            scores.ci[t, tau] = hits / total
    return scores


def _table(acc, mode=Protocol.TASK_INCREMENTAL):
    acc = np.array(acc, dtype=float)
    return MetricsTable(mode, acc, np.zeros_like(acc), episodes=1, runs_per_episode=1)


@pytest.fixture
def eval_cfg():
    return EvalConfig(T_test=3, K=3, N=1, N_query=2, episodes=4, runs_per_episode=2, workers=2, seed=5)


class TestEvaluate:

    def test_defaults(self):
        cfg = EvalConfig()
        assert (cfg.episodes, cfg.runs_per_episode) == (1024, 16)

    def test_oracle_scores_one(self, pool, eval_cfg):
        tables = evaluate_protocols(_oracle, [pool], eval_cfg)
        for table in tables.values():
            lower = np.tril_indices(3)
            np.testing.assert_array_equal(table.acc[lower], 1.0)
            np.testing.assert_array_equal(table.ci95[lower], 0.0)
            assert np.isnan(table.acc[0, 1])

    def test_fixed_guess_is_chance(self, pool, eval_cfg):
        tables = evaluate_protocols(_first_label, [pool], eval_cfg)
        K = eval_cfg.K
        for t in range(3):
            assert tables[Protocol.TASK_INCREMENTAL].acc[t, 0] == pytest.approx(1 / K)
            for r in range(t + 1):
                assert tables[Protocol.CLASS_INCREMENTAL].acc[t, r] == pytest.approx(1 / (K * (r + 1)))

    def test_generator_tables(self, tiny_state, pool, eval_cfg):
        tables = evaluate_protocols(tiny_state, [pool], eval_cfg, trained_T=2)
        for table in tables.values():
            assert table.T == 3
            assert table.trained_T == 2
            lower = table.acc[np.tril_indices(3)]
            assert np.all((lower >= 0) & (lower <= 1))

    def test_deterministic_across_workers(self, tiny_state, pool, eval_cfg):
        first = evaluate_protocols(tiny_state, [pool], eval_cfg)
        eval_cfg.workers = 1
        second = evaluate_protocols(tiny_state, [pool], eval_cfg)
        for protocol in Protocol:
            np.testing.assert_array_equal(first[protocol].acc, second[protocol].acc)
            np.testing.assert_array_equal(first[protocol].ci95, second[protocol].ci95)

    def test_single_protocol(self, pool, eval_cfg):
        table = evaluate(_oracle, [pool], eval_cfg, "class_incremental")
        assert table.mode is Protocol.CLASS_INCREMENTAL

    def test_untrained_generator_on_noise_is_chance(self, tiny_state):
        rng = np.random.default_rng(3)
        noise = ClassPool(
            tuple(ClassRecord(f"n{i}", rng.random((8, 8, 8, 1)).astype(np.float32)) for i in range(12)),
            "noise",
        )
        cfg = EvalConfig(T_test=2, K=3, N=1, N_query=2, episodes=96, runs_per_episode=2, workers=2, seed=0)
        tables = evaluate_protocols(tiny_state, [noise], cfg)
        for protocol, chance in ((Protocol.CLASS_INCREMENTAL, 1 / 6), (Protocol.TASK_INCREMENTAL, 1 / 3)):
            table = tables[protocol]
            standard_error = table.ci95[1, 1] / 1.96
            assert abs(table.acc[1, 1] - chance) <= 3 * standard_error + 1e-9, protocol

    def test_rejects_empty_horizon(self, pool, eval_cfg):
        eval_cfg.T_test = 0
        with pytest.raises(ValueError):
            evaluate_protocols(_oracle, [pool], eval_cfg)

    def test_confidence_interval(self):
        matrices = np.array([[[0.0]], [[1.0]]])
        acc, ci95 = _reduce(matrices)
        assert acc[0, 0] == pytest.approx(0.5)
        assert ci95[0, 0] == pytest.approx(1.96 * math.sqrt(0.5) / math.sqrt(2))

    def test_column_labels(self):
        assert _table([[1.0]]).column_label(0) == "0"
        assert _table([[1.0]], Protocol.CLASS_INCREMENTAL).column_label(2) == "0-2"


class TestTransferMetrics:

    def test_constant_accuracy(self):
        deltas, mean = backward_transfer(_table([[0.7, np.nan], [0.7, 0.7]]))
        assert deltas[0, 1] == 0.0 and mean == 0.0

    def test_example_delta(self):
        deltas, mean = backward_transfer(_table([[0.75, np.nan], [0.8, 0.9]]))
        assert deltas[0, 1] == pytest.approx(0.05)
        assert mean == pytest.approx(0.05)
        assert np.isnan(deltas[1, 0])

    def test_single_task(self):
        assert backward_transfer(_table([[0.5]]))[1] == 0.0

    def test_rejects_class_incremental(self):
        with pytest.raises(ValueError):
            backward_transfer(_table([[0.5]], Protocol.CLASS_INCREMENTAL))

    def test_forgetting(self):
        table = _table([[0.8, np.nan, np.nan], [0.9, 0.7, np.nan], [0.85, 0.6, 0.5]])
        assert forgetting(table) == pytest.approx((0.05 + 0.1) / 2)


class TestMamlCheck:

    def _support(self, n, dim, classes, seed=0):
        rng = np.random.default_rng(seed)
        labels = torch.arange(classes).repeat_interleave(n // classes)
        return LabeledBatch(torch.from_numpy(rng.normal(size=(n, dim))), labels)

    def test_zero_step(self):
        report = maml_one_step_check(lambda x: x, self._support(6, 4, 3), gamma=0.0)
        assert report.max_rel_err_W == 0.0 and report.max_rel_err_b == 0.0
        assert report.passed()

    def test_single_sample_bias_step(self):
        support = LabeledBatch(torch.tensor([[0.3, -1.2]], dtype=torch.float64), torch.tensor([0]))
        gamma = 0.4
        W = torch.zeros(2, 2, dtype=torch.float64, requires_grad=True)
        b = torch.zeros(2, dtype=torch.float64, requires_grad=True)
        loss = torch.nn.functional.cross_entropy(support.images @ W.t() + b, support.labels)
        grad_b = torch.autograd.grad(loss, [b])[0]
        assert (-gamma * grad_b).tolist() == pytest.approx([gamma / 2, -gamma / 2])
        assert maml_one_step_check(lambda x: x, support, gamma, num_classes=2).passed()

    def test_random_configuration(self):
        report = maml_one_step_check(lambda x: x, self._support(6, 4, 3, seed=2), gamma=0.3)
        assert report.passed(1e-5)

    def test_through_target_cnn(self, tiny_arch):
        weights = init_weights(tiny_arch, 0, dtype=torch.float64)
        images = torch.rand(6, 8, 8, 1, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        support = LabeledBatch(images, torch.arange(3).repeat_interleave(2))
        assert maml_one_step_check(lambda x: forward_embed(weights, x), support, 0.5).passed()

    def test_balanced_labels_bias_step_within_rounding(self):
        # closed-form db is exactly zero, autograd leaves rounding noise
        noise, zero = torch.tensor([1e-17, -2e-17], dtype=torch.float64), torch.zeros(2, dtype=torch.float64)
        assert relative_error(noise, zero) == pytest.approx(1.0)
        assert relative_error(noise, zero, floor=0.3) < 1e-15

    def test_unbalanced_labels(self, tiny_arch):
        weights = init_weights(tiny_arch, 1, dtype=torch.float64)
        images = torch.rand(7, 8, 8, 1, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        support = LabeledBatch(images, torch.tensor([0, 0, 0, 0, 1, 2, 2]))
        report = maml_one_step_check(lambda x: forward_embed(weights, x), support, 0.25)
        assert report.passed()

    def test_equal_row_init_accepted(self):
        support = self._support(4, 3, 2)
        report = maml_one_step_check(lambda x: x, support, 0.1, init_W=torch.ones(2, 3), init_b=torch.full((2,), 0.5))
        assert report.passed()

    def test_label_dependent_init_rejected(self):
        with pytest.raises(ValueError):
            maml_one_step_check(lambda x: x, self._support(4, 3, 2), 0.1, init_W=torch.eye(2, 3))


class TestExports:

    def test_embedding_rows(self, tiny_state, make_tasks, tmp_path):
        tasks = make_tasks(T=2, K=3, N=2, N_query=3)
        count = export_embeddings(tiny_state, tasks, tmp_path / "embeddings.csv")
        # per theta_t: K prototypes and K * N_query queries for each of tasks 0..t
        assert count == (3 + 9) + 2 * (3 + 9)
        table = read_embeddings(tmp_path / "embeddings.csv")
        assert table.values.shape == (count, tiny_state.arch.embed_dim)
        header = (tmp_path / "embeddings.csv").read_text().splitlines()[0].split(",")
        assert header[:4] == list(EMBEDDING_META)
        assert len(header) == 4 + tiny_state.arch.embed_dim

    def test_embeddings_round_trip(self, tiny_state, make_tasks, tmp_path):
        tasks = make_tasks(T=2)
        export_embeddings(tiny_state, tasks, tmp_path / "embeddings.csv")
        table = read_embeddings(tmp_path / "embeddings.csv")
        with torch.no_grad():
            theta1 = unroll(tiny_state, tasks)[1]
            expected = forward_embed(theta1, tasks[0].query.images).double().numpy()
        rows = (table.step == 1) & (table.task == 0) & (table.kind == "query")
        np.testing.assert_array_equal(table.values[rows], expected)
        np.testing.assert_array_equal(table.label[rows], tasks[0].query_labels)

    def test_metrics_csv(self, tmp_path):
        table = _table([[0.5, np.nan], [0.4, 0.6]], Protocol.CLASS_INCREMENTAL)
        lines = write_metrics_csv(table, tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == "mode,t,tau_or_range,acc,ci95"
        assert lines[1:] == [
            "class_incremental,0,0-0,0.5,0.0",
            "class_incremental,1,0-0,0.4,0.0",
            "class_incremental,1,0-1,0.6,0.0",
        ]

    def test_plot_is_svg(self, tmp_path):
        table = _table([[0.5, np.nan], [0.4, 0.6]])
        table.trained_T = 1
        path = plot_metrics_table(table, tmp_path / "ti.svg")
        assert "<svg" in path.read_text(encoding="utf-8")
