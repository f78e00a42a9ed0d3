#!/usr/bin/env python3
"""
HES Tuner command line
Problem generation, dataset sampling and balancing, surrogate training,
tuning, one-shot solving, benchmarks and SuiteSparse downloads.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

import numpy as np

from amg_solver import SolverConfig, load_solver_config, save_solver_config, solve
from bench_experiments import REGISTRY, BenchContext
from fitness_evaluator import (DatasetStage, FitnessMode, balance, calibrate_budget, dataset_stats,
                               evaluate_config, load_dataset, parse_mode, sample_dataset,
                               save_dataset, split, unbalance)
from hes_optimizer import EsConfig, run, write_trace
from param_space import cardinality, fingerprint, load_space
from sparse_core import Problem, load_problem, parse_problem_spec, write_matrix_market, write_vector
from ssmc_client import SsmcClient
from surrogate_net import TrainConfig, holdout_report, load_model, save_model, train
from tuner_config import TOOL_VERSION, TunerSettings, load_settings, normalize_mode
from tuner_errors import (ConfigError, DatasetError, DimensionMismatchError, FingerprintMismatchError,
                          HesTunerError, InfeasibleError, MatrixFormatError, ModelError, SearchSpaceError,
                          SizingError, SsmcDownloadError)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4
EXIT_DATA = 5

_EXIT_CODES = [
    ((ConfigError, SearchSpaceError, SizingError), EXIT_CONFIG),
    ((InfeasibleError,), EXIT_INFEASIBLE),
    ((SsmcDownloadError, MatrixFormatError, OSError), EXIT_IO),
    ((DatasetError, FingerprintMismatchError, ModelError, DimensionMismatchError), EXIT_DATA),
]


def exit_code_for(error: BaseException) -> int:
    for classes, code in _EXIT_CODES:
        if isinstance(error, classes):
            return code
    return EXIT_UNEXPECTED


def _failure(action: str, error: BaseException) -> Dict[str, Any]:
    return {
        'success': False,
        'error': str(error),
        'message': f"Failed to {action}: {error}",
        'exit_code': exit_code_for(error),
    }


# HELPERS

def _sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(artifact: str, command: str, args: argparse.Namespace, inputs: Optional[Dict[str, str]] = None,
                   space_fingerprint: Optional[str] = None, started: Optional[datetime] = None) -> str:
    """Write <artifact>.manifest.json describing how the artifact was produced."""
    arguments = {key: value for key, value in vars(args).items() if key != 'handler'}
    manifest = {
        'command': command,
        'arguments': arguments,
        'seeds': {'seed': getattr(args, 'seed', None)},
        'inputs': {path: _sha256_file(path) for path in (inputs or {}).values() if path and os.path.isfile(path)},
        'space_fingerprint': space_fingerprint,
        'tool_version': TOOL_VERSION,
        'started_utc': (started or datetime.now(timezone.utc)).isoformat(),
        'finished_utc': datetime.now(timezone.utc).isoformat(),
    }
    path = f"{artifact}.manifest.json"
    with open(path, 'w') as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)
    return path


def _ensure_parent(path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)


def _mode(args: argparse.Namespace, settings: TunerSettings) -> FitnessMode:
    return parse_mode(args.mode or settings.mode)


def _load_problem(text: str, settings: TunerSettings, seed: int) -> Problem:
    client = SsmcClient.from_settings(settings)
    problem = load_problem(parse_problem_spec(text), seed=seed, ssmc_resolver=client.fetch_matrix)
    logger.info(f"Loaded {problem.name}: {problem.n} rows, {problem.matrix.nnz} nonzeros")
    return problem


def _file_label(text: str) -> str:
    return text.replace(':', '_').replace('/', '_').replace('@', '_').replace('.mtx', '')


# COMMANDS

def cmd_gen_problem(args: argparse.Namespace, settings: TunerSettings) -> Dict[str, Any]:
    """Write a generated problem as <out>/<label>.mtx plus its right-hand side."""
    started = datetime.now(timezone.utc)
    try:
        problem = _load_problem(args.spec, settings, args.seed)
        os.makedirs(args.out, exist_ok=True)
        label = _file_label(problem.name)
        matrix_path = os.path.join(args.out, f"{label}.mtx")
        rhs_path = os.path.join(args.out, f"{label}.rhs.mtx")
        write_matrix_market(problem.matrix, matrix_path, comment=f"generated from {problem.name}")
        write_vector(problem.rhs, rhs_path)
        write_manifest(matrix_path, 'gen-problem', args, started=started)
        return {
            'success': True,
            'message': f"Wrote {matrix_path} ({problem.n} rows, {problem.matrix.nnz} nonzeros) and {rhs_path}",
            'matrix': matrix_path,
            'rhs': rhs_path,
            'rows': problem.n,
        }
    except (HesTunerError, OSError) as e:
        return _failure("generate problem", e)


def cmd_sample(args: argparse.Namespace, settings: TunerSettings) -> Dict[str, Any]:
    """Evaluate random configurations into a raw dataset; resumable through <out>.part."""
    started = datetime.now(timezone.utc)
    try:
        problem = _load_problem(args.problem, settings, args.seed)
        space = load_space(args.space)
        mode = _mode(args, settings)
        budget = calibrate_budget(problem, mode, timeout_factor=args.timeout_factor)
        checkpoint = f"{args.out}.part"
        _ensure_parent(args.out)
        dataset = sample_dataset(problem, space, args.count, np.random.default_rng(args.seed), budget,
                                 checkpoint_path=checkpoint, jobs=args.jobs or settings.jobs)
        save_dataset(dataset, args.out)
        if os.path.exists(checkpoint):
            os.remove(checkpoint)
        write_manifest(args.out, 'sample', args, inputs={'space': args.space}, space_fingerprint=dataset.fingerprint,
                       started=started)
        stats = dataset_stats(dataset)
        return {
            'success': True,
            'message': f"Sampled {args.count} configurations into {args.out} "
                       f"({stats['non_converged_percent']:.1f}% non-converged)",
            'stats': stats,
        }
    except (HesTunerError, OSError) as e:
        return _failure("sample dataset", e)


def cmd_stats(args: argparse.Namespace, settings: TunerSettings) -> Dict[str, Any]:
    try:
        stats = dataset_stats(load_dataset(args.dataset))
        lines = [f"Samples:        {stats['samples']}",
                 f"Stage:          {stats['stage']}",
                 f"Mode:           {stats['mode']}",
                 f"Non-converged:  {stats['non_converged_percent']:.1f}%"]
        for label, key in (('Q3', 'q3'), ('Min', 'min'), ('Median', 'median'), ('Max', 'max')):
            value = stats[key]
            lines.append(f"{label + ':':<16}{'n/a' if value is None else format(value, '.6g')}")
        return {'success': True, 'message': "\n".join(lines), 'stats': stats}
    except (HesTunerError, OSError) as e:
        return _failure("read dataset statistics", e)


def cmd_balance(args: argparse.Namespace, settings: TunerSettings) -> Dict[str, Any]:
    started = datetime.now(timezone.utc)
    try:
        dataset = load_dataset(args.dataset)
        prepared = unbalance(dataset) if args.stage == DatasetStage.UNBALANCED.value else balance(dataset)
        _ensure_parent(args.out)
        save_dataset(prepared, args.out)
        write_manifest(args.out, 'balance', args, inputs={'dataset': args.dataset},
                       space_fingerprint=prepared.fingerprint, started=started)
        return {
            'success': True,
            'message': f"Wrote {prepared.stage.value} dataset {args.out} (Q3 = {prepared.q3:.6g})",
            'q3': prepared.q3,
        }
    except (HesTunerError, OSError) as e:
        return _failure("balance dataset", e)


def cmd_train(args: argparse.Namespace, settings: TunerSettings) -> Dict[str, Any]:
    """Train a surrogate on a balanced dataset and report hold-out R2, F_alpha and the chosen alpha."""
    started = datetime.now(timezone.utc)
    try:
        space = load_space(args.space)
        dataset = load_dataset(args.dataset, space)
        train_set, valid_set = split(dataset, args.validation_fraction, np.random.default_rng(args.seed))
        model = train(train_set, space, TrainConfig(seed=args.seed, epochs=args.epochs))
        report = holdout_report(model, space, valid_set, lambda_r=args.lambda_r)
        _ensure_parent(args.out)
        save_model(model, args.out)
        write_manifest(args.out, 'train', args, inputs={'dataset': args.dataset, 'space': args.space},
                       space_fingerprint=model.fingerprint, started=started)
        report_line = json.dumps({'model': args.out, 'train_mse': model.info['train_mse'], **report}, sort_keys=True)
        return {
            'success': True,
            'message': f"Trained {args.out}: R2 = {report['r_squared']:.4f}, "
                       f"alpha = {report['optimal_alpha']}\n{report_line}",
            'report': report,
        }
    except (HesTunerError, OSError) as e:
        return _failure("train surrogate", e)


def _resolve_alpha(text: str, model) -> float:
    if text != 'auto':
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"--alpha must be a number or 'auto', got '{text}'")
    if model is None:
        raise ConfigError("--alpha auto needs --model")
    holdout = model.info.get('holdout')
    if not holdout or 'optimal_alpha' not in holdout:
        raise ModelError("model file has no hold-out report to pick alpha from")
    return float(holdout['optimal_alpha'])


def cmd_tune(args: argparse.Namespace, settings: TunerSettings) -> Dict[str, Any]:
    """Run the evolution strategy; writes best.cfg, trace.csv and summary.txt into --out."""
    started = datetime.now(timezone.utc)
    try:
        problem = _load_problem(args.problem, settings, args.seed)
        space = load_space(args.space)
        mode = _mode(args, settings)
        default_cfg = load_solver_config(args.default_config) if args.default_config else SolverConfig()

        model = load_model(args.model, space) if args.model else None
        if model is not None and model.info.get('mode') not in (None, mode.value):
            logger.warning(f"⚠️ Model was trained on {model.info['mode']} fitness, tuning with {mode.value}; "
                           f"assuming the ranking transfers")
        alpha = _resolve_alpha(args.alpha, model)
        es_cfg = EsConfig(lambda_s=args.lambda_s, lambda_r=args.lambda_r, alpha=alpha, trial_pool=args.trial_pool,
                          use_nn_filter=model is not None, model=model, seed=args.seed,
                          max_generations=args.max_generations)

        budget = calibrate_budget(problem, mode, default_cfg=default_cfg, timeout_factor=args.timeout_factor)
        logger.info(f"🚀 Tuning {problem.name} over {cardinality(space)} combinations with {es_cfg.label()}"
                    f"{' + surrogate filter' if model else ''}")
        best_cfg, trace = run(problem, space, es_cfg, budget, jobs=args.jobs or settings.jobs,
                              default_cfg=default_cfg)

        default_fitness = evaluate_config(problem, default_cfg, budget)
        best_fitness = trace.best[1].value
        speedup = default_fitness.value / best_fitness if default_fitness.converged and best_fitness > 0 else None

        os.makedirs(args.out, exist_ok=True)
        cfg_path = os.path.join(args.out, "best.cfg")
        trace_path = os.path.join(args.out, "trace.csv")
        summary_path = os.path.join(args.out, "summary.txt")
        save_solver_config(best_cfg, cfg_path, header=f"tuned for {problem.name} ({mode.value})")
        write_trace(trace, trace_path)
        summary = [
            f"Problem:            {problem.name} ({problem.n} rows)",
            f"Strategy:           {es_cfg.label()}, alpha = {alpha}, filter = {'on' if model else 'off'}",
            f"Fitness mode:       {mode.value}",
            f"Generations:        {len(trace.generations)} (stop: {trace.stop_reason.value})",
            f"Evaluations:        {trace.total_evaluations}",
            f"Default fitness:    {default_fitness.value:.6g}",
            f"Best fitness:       {best_fitness:.6g}",
            f"Speedup vs default: {'n/a' if speedup is None else format(speedup, '.3f')}",
        ]
        with open(summary_path, 'w') as f:
            f.write("\n".join(summary) + "\n")
        inputs = {'space': args.space, 'model': args.model, 'default_config': args.default_config}
        for artifact in (cfg_path, trace_path, summary_path):
            write_manifest(artifact, 'tune', args, inputs=inputs, space_fingerprint=fingerprint(space),
                           started=started)
        return {
            'success': True,
            'message': "\n".join(summary),
            'best_config': cfg_path,
            'speedup': speedup,
        }
    except InfeasibleError as e:
        if e.trace is not None and args.out:
            os.makedirs(args.out, exist_ok=True)
            write_trace(e.trace, os.path.join(args.out, "trace.csv"))
        return _failure("tune solver", e)
    except (HesTunerError, OSError) as e:
        return _failure("tune solver", e)


def cmd_solve(args: argparse.Namespace, settings: TunerSettings) -> Dict[str, Any]:
    try:
        problem = _load_problem(args.problem, settings, args.seed)
        cfg = load_solver_config(args.config) if args.config else SolverConfig()
        outcome = solve(problem.matrix, problem.rhs, cfg)
        result = {
            'success': True,
            'message': (f"{'✅ Converged' if outcome.converged else '❌ Not converged'} ({outcome.reason}): "
                        f"{outcome.iterations} iterations, relative residual {outcome.final_relative_residual:.3e}, "
                        f"{outcome.work_units:.0f} work units, solve {outcome.wall_time:.4f}s, "
                        f"setup {outcome.setup_time:.4f}s"),
            'outcome': outcome.to_dict(),
        }
        if args.out:
            _ensure_parent(args.out)
            with open(args.out, 'w') as f:
                json.dump(result['outcome'], f, indent=2, default=str)
            write_manifest(args.out, 'solve', args, inputs={'config': args.config})
        return result
    except (HesTunerError, OSError) as e:
        return _failure("solve", e)


def cmd_bench(args: argparse.Namespace, settings: TunerSettings) -> Dict[str, Any]:
    started = datetime.now(timezone.utc)
    try:
        ctx = BenchContext(out_dir=args.out, problem_spec=args.problem, space_path=args.space,
                           mode=_mode(args, settings), seed=args.seed, jobs=args.jobs or settings.jobs,
                           trials=args.trials, samples=args.samples, epochs=args.epochs, trial_pool=args.trial_pool,
                           dataset_path=args.dataset,
                           ssmc_resolver=SsmcClient.from_settings(settings).fetch_matrix)
        report = REGISTRY.run(args.experiment, ctx)
        csv_path, txt_path = report.write(args.out)
        write_manifest(csv_path, 'bench', args, inputs={'space': args.space, 'dataset': args.dataset},
                       started=started)
        return {'success': True, 'message': report.as_text() + f"Wrote {csv_path} and {txt_path}",
                'csv': csv_path}
    except (HesTunerError, OSError) as e:
        return _failure(f"run experiment {args.experiment}", e)


def cmd_fetch(args: argparse.Namespace, settings: TunerSettings) -> Dict[str, Any]:
    try:
        client = SsmcClient.from_settings(settings)
        if args.check:
            result = client.test_connection()
            if not result['success']:
                result['exit_code'] = EXIT_IO
            return result
        if args.matrix.count('/') != 1:
            raise ConfigError(f"expected Group/Name, got '{args.matrix}'")
        group, name = args.matrix.split('/')
        path = client.fetch_matrix(group, name)
        return {'success': True, 'message': f"Matrix available at {path}", 'path': path}
    except (HesTunerError, OSError) as e:
        return _failure(f"fetch {args.matrix}", e)


# PARSER

def _common(parser: argparse.ArgumentParser, out_required: bool = True, out_help: str = "Output path"):
    parser.add_argument('--seed', type=int, default=None, help="Random seed (default from HES_TUNER_SEED or 0)")
    parser.add_argument('--mode', choices=['wall-time', 'work-units'], default=None,
                        help="Fitness measure (default from HES_TUNER_MODE)")
    parser.add_argument('--out', required=out_required, default=None, help=out_help)
    parser.add_argument('--jobs', type=int, default=None, help="Worker processes for work-units evaluations")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hes-tuner", description="Neural-filtered evolution strategy tuner "
                                                                    "for BiCGStab + AMG solver parameters")
    parser.add_argument('--log-level', default=None, help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument('--env-file', default=None, help="Path to a .env file")
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-problem', help="Write a generated problem as Matrix Market files")
    p.add_argument('spec', help="cube:N, jumps:N, mm:path or ssmc:Group/Name, optional @ones|@random|@file")
    _common(p, out_help="Output directory")
    p.set_defaults(handler=cmd_gen_problem)

    p = sub.add_parser('sample', help="Evaluate random configurations into a raw dataset")
    p.add_argument('--problem', required=True)
    p.add_argument('--space', required=True)
    p.add_argument('--count', type=int, required=True)
    p.add_argument('--timeout-factor', type=float, default=20.0)
    _common(p, out_help="Dataset file")
    p.set_defaults(handler=cmd_sample)

    p = sub.add_parser('stats', help="Print dataset statistics")
    p.add_argument('dataset')
    _common(p, out_required=False)
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser('balance', help="Replace values above Q3 and non-converged values by Q3")
    p.add_argument('dataset')
    p.add_argument('--stage', choices=['balanced', 'unbalanced'], default='balanced')
    _common(p, out_help="Output dataset file")
    p.set_defaults(handler=cmd_balance)

    p = sub.add_parser('train', help="Train the surrogate network")
    p.add_argument('dataset')
    p.add_argument('--space', required=True)
    p.add_argument('--validation-fraction', type=float, default=0.1)
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--lambda-r', type=int, default=5, help="Random mutations used to pick alpha")
    _common(p, out_help="Model file")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('tune', help="Tune solver parameters with the evolution strategy")
    p.add_argument('--problem', required=True)
    p.add_argument('--space', required=True)
    p.add_argument('--model', default=None, help="Surrogate model; omit for the plain evolution strategy")
    p.add_argument('--alpha', default='0.002', help="Least-values fraction, or 'auto' to use the model's pick")
    p.add_argument('--lambda-s', type=int, default=5)
    p.add_argument('--lambda-r', type=int, default=5)
    p.add_argument('--trial-pool', type=int, default=5000)
    p.add_argument('--max-generations', type=int, default=50)
    p.add_argument('--default-config', default=None)
    p.add_argument('--timeout-factor', type=float, default=20.0)
    _common(p, out_help="Output directory")
    p.set_defaults(handler=cmd_tune)

    p = sub.add_parser('solve', help="Solve one system with a configuration")
    p.add_argument('--problem', required=True)
    p.add_argument('--config', default=None)
    _common(p, out_required=False, out_help="Optional JSON file for the outcome")
    p.set_defaults(handler=cmd_solve)

    p = sub.add_parser('bench', help="Run a benchmark experiment")
    p.add_argument('experiment', choices=REGISTRY.names())
    p.add_argument('--problem', default='cube:16')
    p.add_argument('--space', default=os.path.join('configs', 'space7.space'))
    p.add_argument('--trials', type=int, default=20)
    p.add_argument('--samples', type=int, default=1500)
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--trial-pool', type=int, default=5000)
    p.add_argument('--dataset', default=None, help="Use an existing raw dataset instead of sampling")
    _common(p, out_help="Report directory")
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser('fetch', help="Download a SuiteSparse collection matrix")
    p.add_argument('matrix', nargs='?', default='', help="Group/Name")
    p.add_argument('--check', action='store_true', help="Only test the connection")
    _common(p, out_required=False)
    p.set_defaults(handler=cmd_fetch)
    return parser


def configure_logging(settings: TunerSettings):
    logging.basicConfig(level=getattr(logging, settings.log_level, logging.INFO), format=settings.log_format)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        settings = load_settings(env_file=args.env_file)
        if args.log_level:
            settings.log_level = args.log_level.upper()
        if args.mode:
            settings.mode = normalize_mode(args.mode)
    except ConfigError as e:
        print(f"❌ Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    configure_logging(settings)
    if args.seed is None:
        args.seed = settings.seed

    try:
        result = args.handler(args, settings)
    except Exception as e:
        logger.exception(f"❌ Unexpected failure in {args.command}")
        result = _failure(args.command, e)
        result['exit_code'] = EXIT_UNEXPECTED

    if result.get('success'):
        print(result['message'])
        return EXIT_OK
    logger.error(f"❌ {result['message']}")
    print(f"❌ {result['message']}", file=sys.stderr)
    return result.get('exit_code', EXIT_UNEXPECTED)


if __name__ == "__main__":
    sys.exit(main())
