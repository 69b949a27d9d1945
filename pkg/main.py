"""Main entry point for the continual few-shot lab."""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv

from baselines import constpn_train, merged_ht_eval, merged_ht_train
from checkpoints import CheckpointError, RunStore
from config import ConfigError, RunConfig, RunSettings, build_pools, load_run_config
from continual_learner import ObjectiveError, TrainingError, train
from episodes import EpisodeError, sample_task_sequence
from eval_harness import (
    MetricsTable,
    Protocol,
    backward_transfer,
    evaluate_protocols,
    export_embeddings,
    plot_metrics_table,
    write_metrics_csv,
)
from experiments import EXPERIMENTS
from target_cnn import ShapeError, save_weight_bundle
from verifiers import SUITES, run_suite
from weight_generator import GenerationError, GeneratorState, init_generator, load_generator, unroll

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_CHECK_FAILED = 3

logger = logging.getLogger(__name__)
_run_handlers: List[logging.Handler] = []


def setup_logging(level: str = "INFO") -> None:
    """Setup logging configuration.

    Args:
        level: Logging level (DEBUG, INFO, WARNING, ERROR)
    """
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format=LOG_FORMAT,
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True,
    )


def attach_run_log(run_dir: Path) -> logging.Handler:
    """Mirror the log into ``<run_dir>/cht.log``."""
    handler = logging.FileHandler(Path(run_dir) / "cht.log")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)
    _run_handlers.append(handler)
    return handler


def detach_run_logs() -> None:
    root = logging.getLogger()
    while _run_handlers:
        handler = _run_handlers.pop()
        root.removeHandler(handler)
        handler.close()


def _prepare_run(config: RunConfig, settings: RunSettings, fresh: bool) -> RunStore:
    run_dir = settings.run_dir(config)
    if fresh and run_dir.exists() and any(run_dir.iterdir()):
        raise ConfigError(f"run.dir: {run_dir} is not empty; pass --resume or choose another run.name")
    store = RunStore(run_dir)
    attach_run_log(store.run_dir)
    store.write_config(config.document())
    return store


def _write_tables(tables: Dict[Protocol, MetricsTable], out_dir: Path, prefix: str = "") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for protocol, table in tables.items():
        write_metrics_csv(table, out_dir / f"{prefix}metrics_{protocol.value}.csv")
        plot_metrics_table(table, out_dir / f"{prefix}{protocol.value}.svg")
        logger.info(f"{prefix}{protocol.value} final row: {np.round(table.acc[-1], 4).tolist()}")
    if Protocol.TASK_INCREMENTAL in tables:
        _, mean_delta = backward_transfer(tables[Protocol.TASK_INCREMENTAL])
        logger.info(f"{prefix}mean backward transfer: {mean_delta:+.4f}")


def _config_for_checkpoint(args: argparse.Namespace) -> RunConfig:
    if args.config:
        return load_run_config(args.config, args.set)
    snapshot = Path(args.checkpoint).parent / "config.yaml"
    if not snapshot.is_file():
        raise ConfigError(f"--config is required: no config.yaml next to {args.checkpoint}")
    return load_run_config(str(snapshot), args.set)


def _load_state(args: argparse.Namespace, config: RunConfig) -> GeneratorState:
    return load_generator(Path(args.checkpoint), config.to_generator(), config.to_arch())


def cmd_train(args: argparse.Namespace, settings: RunSettings) -> int:
    config = load_run_config(args.config, args.set)
    store = _prepare_run(config, settings, fresh=not args.resume)
    train_pools, test_pools = build_pools(config.data)
    train_cfg = config.to_train()

    latest = store.latest_checkpoint() if args.resume else None
    if latest is not None:
        state = load_generator(latest, config.to_generator(), config.to_arch())
    else:
        state = init_generator(config.to_generator(), config.to_arch(), config.generator.seed)

    hook_cfg = config.to_eval()
    hook_cfg.episodes = config.eval.hook_episodes
    hook_cfg.runs_per_episode = 1

    def on_eval(current: GeneratorState) -> Dict[str, float]:
        tables = evaluate_protocols(current, test_pools, hook_cfg, trained_T=train_cfg.T)
        last = hook_cfg.T_test - 1
        return {
            "eval_acc_ti": float(np.nanmean(tables[Protocol.TASK_INCREMENTAL].acc[last])),
            "eval_acc_ci": float(tables[Protocol.CLASS_INCREMENTAL].acc[last, last]),
        }

    result = train(
        state,
        train_pools,
        train_cfg,
        store=store,
        on_eval=on_eval,
        eval_columns=("eval_acc_ti", "eval_acc_ci"),
        manifest={"run": config.run.name},
    )
    logger.info(f"Training finished at step {result.state.step}; checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, settings: RunSettings) -> int:
    config = _config_for_checkpoint(args)
    state = _load_state(args, config)
    _, test_pools = build_pools(config.data)
    eval_cfg = config.to_eval(T_test=args.T_test, seed=args.seed)
    tables = evaluate_protocols(state, test_pools, eval_cfg, trained_T=config.train.T)
    if args.protocol != "both":
        tables = {Protocol(args.protocol): tables[Protocol(args.protocol)]}
    _write_tables(tables, Path(args.out) if args.out else Path(args.checkpoint).parent)
    return EXIT_OK


def cmd_baseline_constpn(args: argparse.Namespace, settings: RunSettings) -> int:
    config = load_run_config(args.config, args.set)
    config.run.name = f"{config.run.name}_constpn"
    store = _prepare_run(config, settings, fresh=True)
    train_pools, test_pools = build_pools(config.data)
    train_cfg = config.to_train()
    if config.baselines.constpn_steps:
        train_cfg.total_steps = config.baselines.constpn_steps
    state = constpn_train(train_pools, train_cfg, config.to_arch(), store=store)
    tables = evaluate_protocols(state, test_pools, config.to_eval(seed=args.seed), trained_T=config.train.T)
    _write_tables(tables, store.run_dir)
    return EXIT_OK


def cmd_baseline_merged(args: argparse.Namespace, settings: RunSettings) -> int:
    config = load_run_config(args.config, args.set)
    config.run.name = f"{config.run.name}_merged"
    store = _prepare_run(config, settings, fresh=True)
    train_pools, test_pools = build_pools(config.data)
    state = init_generator(config.to_generator(), config.to_arch(), config.generator.seed)
    merged_ht_train(state, train_pools, config.to_train(), store=store)
    tables = evaluate_protocols(
        lambda tasks: merged_ht_eval(state, tasks),
        test_pools,
        config.to_eval(seed=args.seed),
        trained_T=config.train.T,
    )
    _write_tables(tables, store.run_dir)
    return EXIT_OK


def cmd_check(args: argparse.Namespace, settings: RunSettings) -> int:
    suite = run_suite(args.which, seed=args.seed)
    failed = [check for check in suite.checks if not check.passed]
    for check in suite.checks:
        print(f"{'PASS' if check.passed else 'FAIL'}  {check.name}: {check.value:.3e} (<= {check.threshold:g})")
    logger.info(f"check {args.which}: {len(suite.checks) - len(failed)}/{len(suite.checks)} passed")
    return EXIT_OK if not failed else EXIT_CHECK_FAILED


def _sample_test_sequence(args: argparse.Namespace, config: RunConfig):
    _, test_pools = build_pools(config.data)
    eval_cfg = config.to_eval(T_test=args.T_test, seed=args.seed)
    rng = np.random.default_rng(eval_cfg.seed)
    return sample_task_sequence(
        test_pools, eval_cfg.T_test, eval_cfg.regime, eval_cfg.K, eval_cfg.N, eval_cfg.N_query, rng
    )


def cmd_export_embeddings(args: argparse.Namespace, settings: RunSettings) -> int:
    config = _config_for_checkpoint(args)
    state = _load_state(args, config)
    tasks = _sample_test_sequence(args, config)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "embeddings.csv"
    export_embeddings(state, tasks, out)
    return EXIT_OK


def cmd_export_weights(args: argparse.Namespace, settings: RunSettings) -> int:
    config = _config_for_checkpoint(args)
    state = _load_state(args, config)
    tasks = _sample_test_sequence(args, config)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "weights"
    for t, theta in enumerate(unroll(state, tasks)):
        save_weight_bundle(theta.detach(), out / f"theta_{t}")
    logger.info(f"Wrote {len(tasks)} weight bundles to {out}")
    return EXIT_OK


def cmd_experiment(args: argparse.Namespace, settings: RunSettings) -> int:
    config = load_run_config(args.config, args.set)
    config.run.name = f"{config.run.name}_{args.name}"
    store = _prepare_run(config, settings, fresh=True)
    train_pools, test_pools = build_pools(config.data)
    result = EXPERIMENTS[args.name](
        train_pools,
        test_pools,
        config.to_arch(),
        config.to_generator(),
        config.to_train(),
        config.to_eval(),
        store=store,
    )
    result.save(store.run_dir / f"experiment_{args.name}.json")
    for name, ok in result.checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return EXIT_OK if result.passed else EXIT_CHECK_FAILED


def _add_config_args(parser: argparse.ArgumentParser, required: bool = True) -> None:
    parser.add_argument("--config", required=required, help="YAML config path or preset name")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="Override a config key")


def _add_checkpoint_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--checkpoint", required=True, help="ckpt_<step> directory")
    _add_config_args(parser, required=False)
    parser.add_argument("--T-test", dest="T_test", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="Output directory, defaults to the checkpoint's run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cht", description="Continual few-shot learning with generated CNN weights")
    commands = parser.add_subparsers(dest="command", required=True)

    train_parser = commands.add_parser("train", help="Train the weight generator")
    _add_config_args(train_parser)
    train_parser.add_argument("--resume", action="store_true", help="Continue from the latest checkpoint")
    train_parser.set_defaults(handler=cmd_train)

    eval_parser = commands.add_parser(
        "eval",
        help="Evaluate a generator checkpoint",
        description=(
            "Evaluate a generator checkpoint. Writes metrics_<protocol>.csv "
            "(mode, t, tau_or_range, acc, ci95) and <protocol>.svg per protocol; "
            "metrics.csv in the run directory stays the training log."
        ),
    )
    _add_checkpoint_args(eval_parser)
    eval_parser.add_argument("--protocol", choices=[p.value for p in Protocol] + ["both"], default="both")
    eval_parser.set_defaults(handler=cmd_eval)

    for name, handler, help_text in (
        ("baseline-constpn", cmd_baseline_constpn, "Train and evaluate Constant ProtoNet"),
        ("baseline-merged", cmd_baseline_merged, "Train and evaluate Merged-HT"),
    ):
        baseline_parser = commands.add_parser(name, help=help_text)
        _add_config_args(baseline_parser)
        baseline_parser.add_argument("--seed", type=int, default=None)
        baseline_parser.set_defaults(handler=handler)

    check_parser = commands.add_parser("check", help="Run a numerical verifier suite")
    check_parser.add_argument("which", choices=sorted(SUITES))
    check_parser.add_argument("--seed", type=int, default=0)
    check_parser.set_defaults(handler=cmd_check)

    embeddings_parser = commands.add_parser("export-embeddings", help="Export prototype and query embeddings")
    _add_checkpoint_args(embeddings_parser)
    embeddings_parser.set_defaults(handler=cmd_export_embeddings)

    weights_parser = commands.add_parser("export-weights", help="Export generated weight bundles")
    _add_checkpoint_args(weights_parser)
    weights_parser.set_defaults(handler=cmd_export_weights)

    experiment_parser = commands.add_parser("experiment", help="Run a desk-scale experiment")
    experiment_parser.add_argument("name", choices=sorted(EXPERIMENTS))
    _add_config_args(experiment_parser)
    experiment_parser.set_defaults(handler=cmd_experiment)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments and dispatch.

    Returns:
        Exit code
    """
    args = build_parser().parse_args(argv)
    settings = RunSettings.from_env()
    try:
        return args.handler(args, settings)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except (CheckpointError, TrainingError, ObjectiveError, GenerationError, EpisodeError, ShapeError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return EXIT_RUNTIME
    finally:
        detach_run_logs()


def main(argv: Optional[List[str]] = None) -> None:
    """Main entry point."""
    env_path = Path(".env")
    if env_path.exists():
        load_dotenv(env_path)

    settings = RunSettings.from_env()
    setup_logging(settings.log_level)
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
