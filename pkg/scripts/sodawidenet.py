#!/usr/bin/env python3
"""
SODAWideNet command line.

Usage:
    python scripts/sodawidenet.py synth --count 8 --resolution 96 --out data/synth
    python scripts/sodawidenet.py train --manifest data/synth/manifest.json --preset toy --out runs/toy
    python scripts/sodawidenet.py infer --checkpoint runs/toy/epoch_000.swck --manifest data/synth/manifest.json --out preds
    python scripts/sodawidenet.py eval --pred-dir preds --manifest data/synth/manifest.json --out reports
    python scripts/sodawidenet.py gradcheck --scope primitives --scope losses
    python scripts/sodawidenet.py inspect --variant small --resolution 384

Exit codes:
    0 success, 1 usage/config error, 2 data error, 3 numerical failure

Environment Variables:
- SODA_LOG_DIR: directory for <command>.log files (default: logs)
- SODA_DETERMINISTIC: "1" behaves like --deterministic
- SODA_DTYPE: default compute precision (float32 | float64)
"""

import os
import sys

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")

# thread pools must be pinned before numpy loads its BLAS
_NUMPY_PRELOADED = "numpy" in sys.modules
_INHERITED_PIN = all(os.environ.get(_var) == "1" for _var in THREAD_VARS)
if "--deterministic" in sys.argv or os.environ.get("SODA_DETERMINISTIC") == "1":
    for _var in THREAD_VARS:
        os.environ[_var] = "1"
# True when numpy's BLAS started with every thread pool pinned to one thread
THREADS_PINNED = _INHERITED_PIN if _NUMPY_PRELOADED else all(os.environ.get(_var) == "1" for _var in THREAD_VARS)

import argparse
import json
import logging
import pathlib
import time
from typing import Any, Dict, List, Optional

import network_blocks as nb
from data_pipeline import (
    DataError,
    expand_with_flips,
    load_all,
    load_sample,
    read_manifest,
    synth_dataset,
    write_manifest,
    write_saliency,
)
from gradient_audit import SCOPES, run_audit, summarize
from network_blocks import ConfigError
from run_config import DETERMINISTIC_DEFAULT, RunConfig, load_config_file, resolve_config
from saliency_metrics import E_MODES, evaluate_dataset
from tensor_engine import Tensor
from tensor_io import FormatError
from training import NumericalError, train

LOG_DIR = pathlib.Path(os.environ.get("SODA_LOG_DIR", "logs"))

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

logger = logging.getLogger("sodawidenet")


class UsageError(Exception):
    """Bad command-line usage."""


class GradcheckFailure(Exception):
    """At least one audited gradient exceeded its threshold."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def setup_logging(command: str, log_path: Optional[str] = None) -> logging.Logger:
    """Console at INFO, file at DEBUG (logs/<command>.log unless --log is given)."""
    path = pathlib.Path(log_path) if log_path else LOG_DIR / f"{command}.log"
    path.parent.mkdir(parents=True, exist_ok=True)

    formatter = logging.Formatter(
        fmt='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )
    root = logging.getLogger()
    root.setLevel(logging.DEBUG)
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(logging.INFO)
    console_handler.setFormatter(formatter)

    file_handler = logging.FileHandler(path, mode='a', encoding='utf-8')
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(formatter)

    root.addHandler(console_handler)
    root.addHandler(file_handler)
    return logger


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _odd(value: str) -> int:
    number = int(value)
    if number < 1 or number % 2 == 0:
        raise argparse.ArgumentTypeError(f"must be an odd positive integer, got {value}")
    return number


def _network_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", choices=["full", "small", "toy", "no_contours", "no_msa",
                                             "no_mrffam", "no_decoder_mrffam", "no_lpm"])
    parser.add_argument("--variant", choices=["full", "small"])
    parser.add_argument("--resolution", type=int)
    parser.add_argument("--no-msa", action="store_true")
    parser.add_argument("--no-mrffam", action="store_true")
    parser.add_argument("--no-decoder-mrffam", action="store_true")
    parser.add_argument("--no-lpm", action="store_true")
    parser.add_argument("--no-contours", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--deterministic", action="store_true")
    common.add_argument("--out", help="output directory")
    common.add_argument("--log", help="log file path")

    parser = _Parser(prog="sodawidenet", description="Wide and shallow salient object detection")
    commands = parser.add_subparsers(dest="command", parser_class=_Parser)
    commands.required = True

    train_cmd = commands.add_parser("train", parents=[common], help="train on a manifest")
    train_cmd.add_argument("--manifest", help="training manifest (JSON)")
    train_cmd.add_argument("--lr", type=float)
    train_cmd.add_argument("--epochs", type=int)
    train_cmd.add_argument("--lr-drop-epoch", type=int)
    train_cmd.add_argument("--lr-drop-factor", type=float)
    train_cmd.add_argument("--batch", type=int)
    train_cmd.add_argument("--steps-per-epoch", type=int)
    train_cmd.add_argument("--alpha-window", type=_odd)
    _network_flags(train_cmd)

    infer_cmd = commands.add_parser("infer", parents=[common], help="write saliency maps")
    infer_cmd.add_argument("--checkpoint", required=True)
    infer_cmd.add_argument("--manifest", required=True)
    infer_cmd.add_argument("--resolution", type=int, help="inference resolution (e.g. 416)")
    infer_cmd.add_argument("--swt", action="store_true", help="also write SWT1 probability tensors")

    eval_cmd = commands.add_parser("eval", parents=[common], help="score saliency maps")
    eval_cmd.add_argument("--pred-dir", required=True)
    eval_cmd.add_argument("--manifest", required=True)
    eval_cmd.add_argument("--beta-squared", type=float)
    eval_cmd.add_argument("--e-measure", choices=E_MODES)
    eval_cmd.add_argument("--per-image-f", action="store_true")
    eval_cmd.add_argument("--label", help="dataset label, e.g. DUTS-TE")

    grad_cmd = commands.add_parser("gradcheck", parents=[common], help="finite-difference audit")
    grad_cmd.add_argument("--scope", action="append", choices=list(SCOPES) + ["all"])

    inspect_cmd = commands.add_parser("inspect", parents=[common], help="architecture report")
    inspect_cmd.add_argument("--json", action="store_true", help="also write inspect.json")
    _network_flags(inspect_cmd)

    synth_cmd = commands.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    synth_cmd.add_argument("--count", type=int, default=8)
    synth_cmd.add_argument("--resolution", type=int, default=96)
    synth_cmd.add_argument("--flips", action="store_true", help="also materialise h/v flips")
    return parser


def _set(tree: Dict[str, Any], section: Optional[str], key: str, value: Any) -> None:
    if value is None:
        return
    if section is None:
        tree[key] = value
    else:
        tree.setdefault(section, {})[key] = value


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """Nested override dict holding only the flags that were actually given."""
    tree: Dict[str, Any] = {}
    get = lambda name: getattr(args, name, None)
    if get("seed") is not None:
        _set(tree, None, "seed", args.seed)
        _set(tree, "data", "seed", args.seed)
    if get("deterministic"):
        _set(tree, None, "deterministic", True)
    _set(tree, "io", "out_dir", get("out"))
    _set(tree, "io", "log_path", get("log"))

    _set(tree, "network", "preset", get("preset"))
    if get("variant"):
        _set(tree, "network", "variant", args.variant)
        _set(tree, "network", "width_multiplier", 0.5 if args.variant == "small" else 1.0)
    _set(tree, "network", "input_resolution", get("resolution"))
    for flag, field_name in (
        ("no_msa", "enable_msa"),
        ("no_mrffam", "enable_mrffam"),
        ("no_decoder_mrffam", "enable_mrffam_decoder"),
        ("no_lpm", "enable_lpm"),
        ("no_contours", "enable_contour_head"),
    ):
        if get(flag):
            _set(tree, "network", field_name, False)

    _set(tree, "optimizer", "lr", get("lr"))
    _set(tree, "schedule", "epochs", get("epochs"))
    _set(tree, "schedule", "lr_drop_epoch", get("lr_drop_epoch"))
    _set(tree, "schedule", "lr_drop_factor", get("lr_drop_factor"))
    if get("command") == "train":
        _set(tree, "data", "train_manifest", get("manifest"))
    _set(tree, "data", "batch_size", get("batch"))
    _set(tree, "data", "steps_per_epoch", get("steps_per_epoch"))
    _set(tree, "loss", "alpha_window", get("alpha_window"))

    _set(tree, "eval", "beta_squared", get("beta_squared"))
    _set(tree, "eval", "e_measure", get("e_measure"))
    if get("per_image_f"):
        _set(tree, "eval", "per_image_f", True)
    _set(tree, "eval", "label", get("label"))
    return tree


def load_run_config(args: argparse.Namespace) -> RunConfig:
    config = resolve_config(args.config, overrides_from_args(args))
    logger.info(f"Resolved configuration: {config.to_json()}")
    return config


def deterministic_requested(args: argparse.Namespace) -> bool:
    """--deterministic, else ``deterministic`` from the --config file, else SODA_DETERMINISTIC."""
    if args.deterministic:
        return True
    value = load_config_file(args.config).get("deterministic", DETERMINISTIC_DEFAULT)
    if not isinstance(value, bool):
        raise ConfigError(f"deterministic must be true or false, got {value!r}")
    return value


def apply_determinism(deterministic: bool) -> None:
    """
    Pin the BLAS/OpenMP thread pools to one thread for a deterministic run.

    Raises:
        ConfigError: when numpy's BLAS already started with unpinned pools
    """
    if not deterministic:
        return
    for var in THREAD_VARS:
        os.environ[var] = "1"
    if not THREADS_PINNED:
        raise ConfigError(
            "deterministic mode was requested after numpy's BLAS started with unpinned thread pools; "
            "pass --deterministic on the command line or set SODA_DETERMINISTIC=1 before starting"
        )
    logger.info("Deterministic mode: BLAS/OpenMP thread pools pinned to one thread")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    if not config.data.train_manifest:
        raise ConfigError("data.train_manifest is required for training (use --manifest)")
    manifest = read_manifest(config.data.train_manifest, resolution=config.network.input_resolution)
    samples = load_all(manifest)
    out_dir = pathlib.Path(config.io.out_dir)
    result = train(config, samples, out_dir)
    final = result.records[-1]
    print(f"Trained {len(result.records)} steps over {config.schedule.epochs} epoch(s)")
    print(f"Final loss {final.total:.5f} (saliency {final.saliency_total:.5f})")
    print(f"Checkpoints in {out_dir}; best: {result.best_checkpoint.name if result.best_checkpoint else '-'}")
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    override = {"input_resolution": args.resolution} if args.resolution else None
    state = nb.load_state(args.checkpoint, config_override=override)
    resolution = state.config.input_resolution
    logger.info(f"Loaded {args.checkpoint} ({nb.count_parameters(state).total:,} parameters) at {resolution}x{resolution}")
    manifest = read_manifest(args.manifest, resolution=resolution, split="infer")
    out_dir = pathlib.Path(args.out or "predictions")
    out_dir.mkdir(parents=True, exist_ok=True)

    for entry in manifest:
        sample = load_sample(entry, resolution)
        started = time.perf_counter()
        batch = Tensor(sample.image.data[None])
        saliency, _ = nb.forward(state, batch, training=False)
        elapsed = (time.perf_counter() - started) * 1000.0
        swt_path = out_dir / f"{entry.name}.swt" if args.swt else None
        write_saliency(saliency, out_dir / f"{entry.name}.pgm", logits=True, swt_path=swt_path)
        print(f"{entry.name}: {elapsed:.1f} ms")
    logger.info(f"Wrote {len(manifest)} saliency maps to {out_dir}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    manifest = read_manifest(args.manifest, split="eval")
    out_dir = pathlib.Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    report = evaluate_dataset(
        args.pred_dir,
        manifest,
        beta_squared=config.eval.beta_squared,
        e_mode=config.eval.e_measure,
        per_image_f=config.eval.per_image_f,
        label=config.eval.label,
        csv_path=out_dir / "metrics.csv",
        json_path=out_dir / "metrics.json",
    )
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    scopes: List[str] = args.scope or ["all"]
    if "all" in scopes:
        scopes = list(SCOPES)
    seed = args.seed if args.seed is not None else 0
    items = run_audit(scopes, seed)

    print(f"{'scope':<12} {'item':<34} {'max rel err':>12}  status")
    for item in items:
        status = "ok" if item.passed else "FAIL"
        print(f"{item.scope:<12} {item.name:<34} {item.report.max_relative_error:>12.3e}  {status}")
    summary = summarize(items)
    print(f"{summary['checked']} checked, {summary['failed']} failed")
    if summary["failed"]:
        raise GradcheckFailure(f"{summary['failed']} gradient check(s) failed")
    return EXIT_OK


def inspect_report(config: nb.NetworkConfig) -> Dict[str, Any]:
    """Shape trace, dilation schedule and parameter accounting for ``config``."""
    started = time.perf_counter()
    trace = nb.trace_shapes(config)
    counts = nb.count_parameters(nb.assemble_network(config))
    references = {}
    for name in ("full", "small"):
        reference_total = nb.count_parameters(nb.assemble_network(nb.preset(name))).total
        published = nb.PUBLISHED_PARAMETER_TOTALS[name]
        references[name] = {"total": reference_total, "published": published, "delta": reference_total - published}
    return {
        "config": config.to_dict(),
        "blocks": [
            {"block": e.block, "input": list(e.input_shape), "rates": list(e.rates), "output": list(e.output_shape),
             "row": list(e.table_row())}
            for e in trace
        ],
        "modules": counts.per_module,
        "total": counts.total,
        "references": references,
        "small_to_full_ratio": references["small"]["total"] / references["full"]["total"],
        "elapsed_s": time.perf_counter() - started,
    }


def cmd_inspect(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    report = inspect_report(config.network)
    network = config.network
    print(f"SODAWideNet ({network.variant}, base width {network.channels}, {network.input_resolution}x{network.input_resolution})")
    print("\nLayer graph:")
    for module, total in report["modules"].items():
        print(f"  {module:<16} {total:>12,}")
    print("\nDilation schedule and block shapes (H x W x C):")
    print(f"  {'input':<16} {'block':<6} {'rates':<22} {'output':<16}")
    for block in report["blocks"]:
        inp, name, rates, out = block["row"]
        print(f"  {inp:<16} {name:<6} {rates:<22} {out:<16}")
    print(f"\nParameters: {report['total']:,}")
    for name, ref in report["references"].items():
        print(f"  {name:<6} reference {ref['total']:>12,}  published {ref['published']:>12,.0f}  delta {ref['delta']:+,.0f}")
    print(f"  small/full ratio {report['small_to_full_ratio']:.3f}")
    if args.json:
        out_dir = pathlib.Path(args.out or ".")
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "inspect.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else 0
    out_dir = pathlib.Path(args.out or "synth")
    manifest = synth_dataset(seed, args.count, args.resolution, out_dir)
    print(f"Wrote {len(manifest)} samples and {out_dir / 'manifest.json'}")
    if args.flips:
        expanded = expand_with_flips(manifest, out_dir / "flipped")
        path = write_manifest(expanded, out_dir / "manifest_flips.json")
        print(f"Wrote {len(expanded)} entries with flips to {path}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "inspect": cmd_inspect,
    "synth": cmd_synth,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    setup_logging(args.command, args.log)
    logger.debug(f"Command line: {argv if argv is not None else sys.argv[1:]}")
    try:
        apply_determinism(deterministic_requested(args))
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_USAGE
    except (DataError, FormatError, FileNotFoundError) as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except NumericalError as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except GradcheckFailure as e:
        logger.error(str(e))
        return EXIT_NUMERICAL
    except ValueError as e:
        logger.error(f"Invalid argument: {e}")
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
