"""Shared fixtures: a tiny target architecture, a tiny generator and synthetic pools."""

import numpy as np
import pytest
import torch
import yaml

from continual_learner import TrainConfig
from episodes import Regime, make_synthetic_pool, sample_task_sequence
from verifiers import TINY_ARCH, TINY_GENERATOR
from weight_generator import init_generator


@pytest.fixture
def tiny_arch():
    return TINY_ARCH


@pytest.fixture
def tiny_gen_cfg():
    return TINY_GENERATOR


@pytest.fixture
def tiny_state():
    return init_generator(TINY_GENERATOR, TINY_ARCH, seed=0)


@pytest.fixture
def tiny_state64():
    state = init_generator(TINY_GENERATOR, TINY_ARCH, seed=0)
    state.model.double()
    return state


@pytest.fixture
def pool():
    return make_synthetic_pool(10, 12, TINY_ARCH.input_shape, seed=0)


@pytest.fixture
def make_tasks(pool):
    def factory(T=2, K=3, N=2, N_query=3, seed=0, regime=Regime.SINGLE_DOMAIN):
        return sample_task_sequence([pool], T, regime, K, N, N_query, np.random.default_rng(seed))
    return factory


@pytest.fixture
def tiny_train_cfg():
    return TrainConfig(T=2, K=3, N=2, N_query=3, learning_rate=1e-3, total_steps=3, log_every=0)


@pytest.fixture
def tiny_config_file(tmp_path):
    """A run document small enough for end-to-end CLI runs."""
    document = {
        "data": {"source": "synthetic", "image_size": [8, 8, 1], "num_classes": 20, "samples_per_class": 12},
        "arch": {"num_blocks": 2, "channels": 2, "embed_dim": 4},
        "generator": {
            "feat_channels": 4, "act_channels": 4, "num_layers": 1, "num_heads": 2,
            "model_dim": 16, "ff_dim": 32, "label_embed_dim": 4, "max_way": 8,
        },
        "train": {"T": 2, "K": 3, "N": 1, "N_query": 2, "learning_rate": 1e-3, "total_steps": 3,
                  "log_every": 0, "checkpoint_every": 2},
        "eval": {"episodes": 2, "runs_per_episode": 1, "workers": 1},
        "baselines": {"constpn_steps": 2},
        "run": {"name": "tiny"},
    }
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(document))
    return path


@pytest.fixture
def run_root(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("CHT_RUN_DIR", str(root))
    return root


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
