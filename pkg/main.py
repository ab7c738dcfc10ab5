import argparse
import json
import os
import sys
from typing import List, Optional

from colorama import Fore, Style, init

from config.loader import DEFAULT_SETTINGS_PATH, load_experiment_config, parse_overrides
from core.exceptions import ConfigError, LoraConstructionError, NonSingularityViolation
from core.interfaces import MODEL_KIND_FNN, MODEL_KIND_LINEAR
from core.orchestrator import ExperimentOrchestrator
from synthesis import fnn_synthesis, linear_synthesis, tfn_synthesis
from synthesis.linear_synthesis import RankBudget
from utils.analyze_results import summarize
from utils.log_main import logger, setup_logging
from utils.model_io import load_model, save_model
from utils.utils import copy_for_reproducibility, create_results_directory

init(autoreset=True)

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_ASSUMPTION_VIOLATION = 3
EXIT_CELL_FAILURES = 4


# --- Argument Parsing ---
def define_arguments(argv: Optional[List[str]] = None):
    parser = argparse.ArgumentParser(description="Closed-form and gradient LoRA adapters for synthetic models")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", allow_abbrev=False,
                         help="Run an experiment sweep. Any further --key value pair overrides a config field.")
    run.add_argument("--preset", default=None, help="Name of an experiment configuration in settings.yaml")
    run.add_argument("--config", default=None, help="JSON (or YAML) file with experiment fields")
    run.add_argument("--settings_path", default=DEFAULT_SETTINGS_PATH, help="Path to the settings YAML file")
    run.add_argument("--seed-base", dest="seed_base", type=int, default=None, help="First seed of the sweep")
    run.add_argument("--out-dir", dest="out_dir", default=None, help="Parent directory for run results")
    run.add_argument("--jitter", type=float, default=None, help="Retry singular constructions once with this perturbation")
    run.add_argument("--resume", default=None, help="Existing run directory to continue")

    synth = sub.add_parser("synthesize", help="Build closed-form adapters between two model files")
    synth.add_argument("--frozen", required=True, help="Frozen model JSON file")
    synth.add_argument("--target", required=True, help="Target model JSON file")
    synth.add_argument("--rank", type=int, default=None, help="Uniform LoRA rank")
    synth.add_argument("--ranks", type=int, nargs="+", default=None, help="Per-layer ranks (linear and FNN)")
    synth.add_argument("--rho", type=float, default=None, help="FNN input radius (default 6*sqrt(D))")
    synth.add_argument("--jitter", type=float, default=None)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True, help="Where to write the adapted model JSON")

    summ = sub.add_parser("summarize", help="Median-across-seeds table of a results CSV")
    summ.add_argument("rows_csv")
    summ.add_argument("--output", default=None)

    return parser.parse_known_args(argv)


def _run(args, extra: List[str]) -> int:
    overrides = parse_overrides(extra)
    for key in ("seed_base", "out_dir", "jitter"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    config = load_experiment_config(args.settings_path, args.preset, args.config, overrides)

    results_dir = args.resume or create_results_directory(config.run_name or config.experiment, config.out_dir)
    setup_logging(log_directory=results_dir)
    logger.info(f"Results directory: {results_dir}", extra={"msg_type": "system"})

    # Save copies for reproducibility
    copy_for_reproducibility(args.settings_path, results_dir, "settings.yaml")
    if args.config:
        copy_for_reproducibility(args.config, results_dir)
    with open(os.path.join(results_dir, "resolved_config.json"), "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2)

    orchestrator = ExperimentOrchestrator(config, results_dir)
    _, manifest = orchestrator.run()
    return EXIT_CELL_FAILURES if manifest.failures else EXIT_OK


def _budget(args) -> RankBudget:
    if args.ranks is not None:
        return RankBudget.layers(args.ranks)
    if args.rank is None:
        raise ConfigError("Give --rank or --ranks")
    return RankBudget.of(args.rank)


def _synthesize(args) -> int:
    setup_logging(log_directory=os.path.dirname(os.path.abspath(args.out)))
    frozen, target = load_model(args.frozen), load_model(args.target)
    if frozen.kind != target.kind:
        raise ConfigError(f"Model kinds differ: {frozen.kind} vs {target.kind}")

    if frozen.kind == MODEL_KIND_LINEAR:
        target_matrix = target.product()
        if target_matrix.shape[0] < frozen.dim:
            target_matrix = linear_synthesis.embed_wider_target(target_matrix, frozen)
        plan = linear_synthesis.synthesize(frozen, target_matrix, _budget(args),
                                           jitter=args.jitter, seed=args.seed)
        adapted = plan.adapted_chain()
        print(f"Spectral error {plan.achieved_spectral_error:.6e} "
              f"(optimum {plan.predicted_spectral_error:.6e}, effective rank {plan.effective_rank_used})")
    elif frozen.kind == MODEL_KIND_FNN:
        partition = fnn_synthesis.uniform_partition(frozen.depth, target.depth)
        budget = _budget(args)
        plan = fnn_synthesis.synthesize(frozen, target, partition, budget, rho=args.rho,
                                        jitter=args.jitter, seed=args.seed)
        adapted = plan.adapted_model()
        report = fnn_synthesis.error_bound(frozen, target, partition, budget)
        print(f"Partition {partition.one_based()}, input radius {plan.input_radius:.3f}")
        print(f"Per-block spectral error {[f'{e:.3e}' for e in plan.per_block_predicted_error]}, "
              f"error bound {report.bound:.4e}")
    else:
        if args.rank is None:
            raise ConfigError("Transformers take a uniform --rank")
        gaps = tfn_synthesis.compute_gaps(frozen, target)
        plan = tfn_synthesis.synthesize(frozen, target, args.rank, jitter=args.jitter, seed=args.seed)
        adapted = plan.adapted_model()
        status = "exact" if args.rank >= gaps.required_rank else "below the exactness threshold"
        print(f"Gaps {list(gaps.gaps)}, required rank {gaps.required_rank}: rank {args.rank} is {status}")

    if plan.jittered:
        print(f"{Fore.YELLOW}! Built on jittered frozen weights (jitter {args.jitter}); "
              f"the written model includes them{Style.RESET_ALL}")
    save_model(adapted, args.out)
    print(f"{Fore.GREEN}✓ Adapted model written to {args.out}{Style.RESET_ALL}")
    return EXIT_OK


def _summarize(args) -> int:
    table = summarize(args.rows_csv, args.output)
    print(table.to_string(index=False))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args, extra = define_arguments(argv)
    if extra and args.command != "run":
        print(f"{Fore.RED}Unrecognized arguments: {' '.join(extra)}")
        return EXIT_CONFIG_ERROR
    try:
        if args.command == "run":
            return _run(args, extra)
        if args.command == "synthesize":
            return _synthesize(args)
        return _summarize(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}", extra={"msg_type": "system"})
        print(f"{Fore.RED}✗ Configuration error: {e}")
        return EXIT_CONFIG_ERROR
    except (FileNotFoundError, ValueError) as e:
        print(f"{Fore.RED}✗ {e}")
        return EXIT_CONFIG_ERROR
    except NonSingularityViolation as e:
        logger.error(f"Assumption violated: {e}", extra={"msg_type": "system", "condition": e.condition,
                                                         "block": e.block, "layer": e.layer})
        print(f"{Fore.RED}✗ Assumption violated: {e}")
        return EXIT_ASSUMPTION_VIOLATION
    except LoraConstructionError as e:
        print(f"{Fore.RED}✗ {e}")
        return EXIT_CELL_FAILURES
    except KeyboardInterrupt:
        print("\n🛑 Interrupted.")
        return EXIT_CELL_FAILURES


if __name__ == "__main__":
    sys.exit(main())
