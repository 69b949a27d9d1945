"""Numerical verifiers: one-step update closed form, finite differences, loss oracle."""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence

import numpy as np
import torch

from continual_learner import Objective, PrototypeMode, TrainConfig, episode_objective
from episodes import LabeledBatch, Regime, TaskSequence, make_synthetic_pool, sample_task_sequence
from eval_harness import maml_one_step_check
from target_cnn import Arch, WeightBundle, forward_embed, init_weights, zero_weights
from weight_generator import GeneratorConfig, GeneratorState, generate_weights, init_generator, unroll

logger = logging.getLogger(__name__)

MAML_TOLERANCE = 1e-5
GRADIENT_TOLERANCE = 1e-3
ORACLE_TOLERANCE = 1e-5

TINY_ARCH = Arch(input_shape=(8, 8, 1), num_blocks=2, channels=2, embed_dim=4)
TINY_GENERATOR = GeneratorConfig(
    feat_channels=4,
    act_channels=4,
    num_layers=1,
    num_heads=2,
    model_dim=16,
    ff_dim=32,
    label_embed_dim=4,
    max_way=8,
)


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value)) and self.value <= self.threshold


@dataclass
class SuiteResult:
    name: str
    checks: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def add(self, name: str, value: float, threshold: float) -> CheckResult:
        check = CheckResult(name, float(value), threshold)
        self.checks.append(check)
        level = logging.INFO if check.passed else logging.ERROR
        logger.log(level, f"[{self.name}] {name}: {value:.3e} (threshold {threshold:g}) {'ok' if check.passed else 'FAIL'}")
        return check


def tiny_generator(seed: int = 0) -> GeneratorState:
    """Tiny float64 generator used by the gradient and oracle suites."""
    state = init_generator(TINY_GENERATOR, TINY_ARCH, seed)
    state.model.double()
    return state


def tiny_sequence(T: int, seed: int = 0, K: int = 3, N: int = 2, N_query: int = 3) -> TaskSequence:
    pool = make_synthetic_pool(8, 12, TINY_ARCH.input_shape, seed=seed)
    return sample_task_sequence([pool], T, Regime.SINGLE_DOMAIN, K, N, N_query, np.random.default_rng(seed))


def finite_difference_report(
    loss_fn: Callable[[], torch.Tensor],
    tensors: Dict[str, torch.Tensor],
    eps: float = 1e-6,
    samples: int = 6,
    seed: int = 0,
    floor: float = 1e-6,
) -> Dict[str, float]:
    """Central differences against autograd on sampled coordinates.

    Args:
        loss_fn: Scalar loss depending on ``tensors``
        tensors: Leaf tensors requiring grad, perturbed in place
        eps: Perturbation
        samples: Coordinates checked per tensor
        seed: Coordinate sampling seed
        floor: Denominator floor of the relative error

    Returns:
        Max relative error per tensor name
    """
    rng = np.random.default_rng(seed)
    names = list(tensors)
    grads = torch.autograd.grad(loss_fn(), [tensors[name] for name in names], allow_unused=True)
    report = {}
    for name, grad in zip(names, grads):
        tensor = tensors[name]
        grad = torch.zeros_like(tensor) if grad is None else grad
        flat_grad = grad.reshape(-1)
        worst = 0.0
        for index in rng.choice(tensor.numel(), size=min(samples, tensor.numel()), replace=False):
            # multi-index writes work on non-contiguous tensors (conv kernels, transposed dense)
            position = tuple(int(i) for i in np.unravel_index(int(index), tuple(tensor.shape)))
            original = float(tensor.data[position])
            with torch.no_grad():
                tensor.data[position] = original + eps
                plus = float(loss_fn())
                tensor.data[position] = original - eps
                minus = float(loss_fn())
                tensor.data[position] = original
            numeric = (plus - minus) / (2 * eps)
            analytic = float(flat_grad[index])
            worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic), floor))
        report[name] = worst
    return report


def objective_oracle(
    state: GeneratorState,
    tasks: TaskSequence,
    objective: Objective = Objective.CLASS_INCREMENTAL,
    prototype_mode: PrototypeMode = PrototypeMode.FROZEN,
) -> np.ndarray:
    """Loss matrix of the continual objective by explicit nested loops.

    Returns:
        [T, T] matrix of mean query NLL per (t, tau), NaN above the diagonal
    """
    T = len(tasks)
    weights = unroll(state, tasks)
    matrix = np.full((T, T), np.nan)

    def prototypes_of(theta: WeightBundle, tau: int) -> List[torch.Tensor]:
        support = tasks[tau].support
        embeds = forward_embed(theta, support.images)
        result = []
        for k in range(tasks[tau].way):
            rows = [embeds[i] for i in range(embeds.shape[0]) if int(support.labels[i]) == k]
            result.append(sum(rows) / len(rows))
        return result

    for t in range(T):
        theta = weights[t]
        bank = {}
        for tau in range(t + 1):
            source = theta if prototype_mode is PrototypeMode.RECOMPUTED else weights[tau]
            bank[tau] = prototypes_of(source, tau)
        for tau in range(t + 1):
            query = tasks[tau].query
            embeds = forward_embed(theta, query.images)
            total = 0.0
            for i in range(embeds.shape[0]):
                label = int(query.labels[i])
                if objective is Objective.TASK_INCREMENTAL:
                    candidates = [(tau, k) for k in range(len(bank[tau]))]
                else:
                    candidates = [(other, k) for other in range(t + 1) for k in range(len(bank[other]))]
                scores = torch.stack([-((embeds[i] - bank[o][k]) ** 2).sum() for o, k in candidates])
                target = candidates.index((tau, label))
                total += float(torch.logsumexp(scores, dim=0) - scores[target])
            matrix[t, tau] = total / embeds.shape[0]
    return matrix


def _relative(actual: np.ndarray, expected: np.ndarray) -> float:
    mask = ~np.isnan(expected)
    return float(np.max(np.abs(actual[mask] - expected[mask]) / np.maximum(np.abs(expected[mask]), 1e-12)))


def run_oracle_suite(seed: int = 0, lengths: Sequence[int] = (1, 2, 3)) -> SuiteResult:
    """Compare ``episode_objective`` with the nested-loop oracle."""
    suite = SuiteResult("oracles")
    state = tiny_generator(seed)
    for T in lengths:
        tasks = tiny_sequence(T, seed + T)
        for objective in (Objective.CLASS_INCREMENTAL, Objective.TASK_INCREMENTAL):
            for mode in (PrototypeMode.FROZEN, PrototypeMode.RECOMPUTED):
                cfg = TrainConfig(T=T, K=3, N=2, N_query=3, objective=objective, prototype_mode=mode)
                with torch.no_grad():
                    actual = episode_objective(state, tasks, cfg).loss_matrix()
                    expected = objective_oracle(state, tasks, objective, mode)
                suite.add(f"T={T} {objective.value} {mode.value}", _relative(actual, expected), ORACLE_TOLERANCE)
    return suite


def run_gradient_suite(seed: int = 0) -> SuiteResult:
    """Finite differences on the target CNN and the unrolled T=2 pipeline."""
    suite = SuiteResult("gradients")

    bundle = init_weights(TINY_ARCH, seed, dtype=torch.float64)
    for _, tensor in bundle:
        tensor.requires_grad_(True)
    images = torch.from_numpy(tiny_sequence(1, seed)[0].support_images)
    projection = torch.randn(TINY_ARCH.embed_dim, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    report = finite_difference_report(lambda: (forward_embed(bundle, images) @ projection).pow(2).mean(), bundle.tensors, seed=seed)
    for name, error in report.items():
        suite.add(f"target_cnn.{name}", error, GRADIENT_TOLERANCE)

    state = tiny_generator(seed)
    tasks = tiny_sequence(2, seed)
    cfg = TrainConfig(T=2, K=3, N=2, N_query=3)
    parameters = dict(state.model.named_parameters())
    report = finite_difference_report(lambda: episode_objective(state, tasks, cfg).loss, parameters, seed=seed)
    groups: Dict[str, float] = {}
    for name, error in report.items():
        group = name.split(".")[0]
        groups[group] = max(groups.get(group, 0.0), error)
    for group, error in sorted(groups.items()):
        suite.add(f"unrolled_T2.{group}", error, GRADIENT_TOLERANCE)

    # recursion path alone: theta_1 from theta_0 with the support tokens dropped
    first = generate_weights(state, tasks[0].support, zero_weights(TINY_ARCH, dtype=torch.float64))
    second = generate_weights(state, tasks[1].support, first, include_support=False)
    grads = torch.autograd.grad(second.flatten().pow(2).sum(), list(first.tensors.values()), allow_unused=True)
    flow = sum(float(g.abs().sum()) for g in grads if g is not None)
    suite.add("recursion_path_blocked", 0.0 if flow > 0 else 1.0, 0.0)
    return suite


def run_maml_suite(seed: int = 0, configs: int = 20) -> SuiteResult:
    """One-step logits-layer update vs its closed form over random configurations."""
    suite = SuiteResult("maml")
    rng = np.random.default_rng(seed)
    for index in range(configs):
        K = int(rng.integers(2, 7))
        N = int(rng.integers(1, 5))
        embed_dim = int(rng.integers(2, 9))
        gamma = float(rng.uniform(0.01, 1.0))
        arch = Arch(input_shape=(8, 8, 1), num_blocks=2, channels=4, embed_dim=embed_dim)
        weights = init_weights(arch, seed + index, dtype=torch.float64)
        labels = torch.arange(K).repeat_interleave(N)
        if index % 2:
            # unbalanced: extra samples of class 0
            labels = torch.cat([labels, torch.zeros(int(rng.integers(1, 4)), dtype=labels.dtype)])
        images = torch.from_numpy(rng.random((labels.numel(), 8, 8, 1)))
        report = maml_one_step_check(lambda x: forward_embed(weights, x), LabeledBatch(images, labels), gamma)
        name = f"K={K} N={N} n={labels.numel()} D={embed_dim} gamma={gamma:.3f}"
        suite.add(f"{name} dW", report.max_rel_err_W, MAML_TOLERANCE)
        suite.add(f"{name} db", report.max_rel_err_b, MAML_TOLERANCE)
        suite.add(f"{name} prototypes", report.prototype_alignment, MAML_TOLERANCE)
    return suite


SUITES: Dict[str, Callable[..., SuiteResult]] = {
    "maml": run_maml_suite,
    "gradients": run_gradient_suite,
    "oracles": run_oracle_suite,
}


def run_suite(which: str, seed: int = 0) -> SuiteResult:
    if which not in SUITES:
        raise ValueError(f"Unknown check {which!r}, expected one of {sorted(SUITES)}")
    return SUITES[which](seed=seed)
