"""Tests for the Constant ProtoNet and Merged-HT baselines."""

import json
import logging
from dataclasses import replace

import numpy as np
import pytest
import torch

from baselines import (
    constpn_eval,
    constpn_scores,
    constpn_train,
    constpn_way,
    init_constpn,
    load_constpn,
    merged_ht_eval,
    merged_ht_train,
    save_constpn,
)
from checkpoints import RunStore
from continual_learner import compute_prototypes, score_sequence, squared_distances
from episodes import make_synthetic_pool
from target_cnn import forward_embed
from weight_generator import save_generator


class TestConstPNWay:

    def test_five_times_k(self):
        pool = make_synthetic_pool(25, 2, (8, 8, 1), seed=0)
        assert constpn_way([pool], 4) == 20

    def test_falls_back_to_pool_size(self, pool, caplog):
        with caplog.at_level(logging.WARNING):
            assert constpn_way([pool], 5) == 10
        assert "using 10-way" in caplog.text


class TestConstPNTrain:

    def test_trains_and_checkpoints(self, pool, tiny_arch, tiny_train_cfg, tmp_path):
        store = RunStore(tmp_path)
        cfg = replace(tiny_train_cfg, K=2, N=1, N_query=2, total_steps=2)
        state = constpn_train([pool], cfg, tiny_arch, store=store)
        assert state.step == 2
        rows = store.metrics.read()
        assert [row["step"] for row in rows] == ["1", "2"]
        assert all(np.isfinite(float(row["loss"])) for row in rows)
        loaded = load_constpn(store.latest_checkpoint(), tiny_arch)
        torch.testing.assert_close(loaded.weights.flatten(), state.weights.flatten().detach())

    def test_rejects_generator_checkpoint(self, tiny_state, tmp_path):
        path = save_generator(RunStore(tmp_path), tiny_state)
        with pytest.raises(ValueError):
            load_constpn(path)


class TestConstPNEval:

    def test_single_task_is_plain_protonet(self, tiny_arch, make_tasks):
        state = init_constpn(tiny_arch, seed=1)
        tasks = make_tasks(T=1)
        episode = tasks[0]
        with torch.no_grad():
            prototypes = compute_prototypes(state.weights, episode.support, episode.way)
            query = episode.query
            predictions = (-squared_distances(forward_embed(state.weights, query.images), prototypes)).argmax(dim=1)
        expected = float((predictions == query.labels).double().mean())
        assert constpn_eval(state, tasks, "task_incremental")[0] == pytest.approx(expected)
        assert constpn_eval(state, tasks, "class_incremental")[0] == pytest.approx(expected)

    def test_stateless(self, tiny_arch, make_tasks):
        state = init_constpn(tiny_arch, seed=1)
        tasks = make_tasks(T=3)
        first = constpn_eval(state, tasks, "class_incremental")
        second = constpn_eval(state, tasks, "class_incremental")
        np.testing.assert_array_equal(first, second)

    def test_rows_do_not_depend_on_step(self, tiny_arch, make_tasks):
        scores = constpn_scores(init_constpn(tiny_arch, seed=1), make_tasks(T=3))
        for t in range(1, 3):
            np.testing.assert_array_equal(scores.ti[t, :t], scores.ti[t - 1, :t])
            np.testing.assert_array_equal(scores.ci[t, :t], scores.ci[t - 1, :t])

    def test_unknown_protocol(self, tiny_arch, make_tasks):
        with pytest.raises(ValueError):
            constpn_eval(init_constpn(tiny_arch, seed=1), make_tasks(T=1), "merged")

    def test_save_records_kind(self, tiny_arch, tmp_path):
        path = save_constpn(RunStore(tmp_path), init_constpn(tiny_arch, seed=0))
        assert json.loads((path / "manifest.json").read_text())["kind"] == "constpn"


class TestMergedHT:

    def test_first_row_matches_single_task_pipeline(self, tiny_state, make_tasks):
        tasks = make_tasks(T=2)
        merged = merged_ht_eval(tiny_state, tasks)
        single = score_sequence(tiny_state, tasks)
        assert merged.ti[0, 0] == single.ti[0, 0]
        assert merged.ci[0, 0] == single.ci[0, 0]

    def test_scores_cover_lower_triangle(self, tiny_state, make_tasks):
        scores = merged_ht_eval(tiny_state, make_tasks(T=2))
        assert not np.isnan(scores.ci[np.tril_indices(2)]).any()
        assert np.isnan(scores.ci[0, 1])

    def test_merged_way_beyond_max_way(self, tiny_state, make_tasks):
        with pytest.raises(ValueError):
            merged_ht_eval(tiny_state, make_tasks(T=3, K=3))

    def test_trains_on_merged_episodes(self, tiny_state, pool, tiny_train_cfg, tmp_path):
        store = RunStore(tmp_path)
        result = merged_ht_train(tiny_state, [pool], replace(tiny_train_cfg, total_steps=1), store=store)
        assert [key for key in result.history[0] if key.startswith("J_cell")] == ["J_cell_0_0"]
        manifest = json.loads((result.checkpoint / "manifest.json").read_text())
        assert manifest["baseline"] == "merged_ht" and manifest["merged_T"] == 2
