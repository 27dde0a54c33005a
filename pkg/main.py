"""
MARS detailization toolkit: command-line entry point.

Subcommands:
  gen-data      Build a procedural dataset of coarse/detailed shape pairs
  train-vqvae   Train the multi-LOD tokenizer
  train-ar      Train the next-LOD transformer on a frozen tokenizer
  detailize     Turn a coarse mesh into a detailed one
  eval          Compare an output mesh against its coarse input
  reconstruct   Mesh one LOD of a shape's tokenization
  tokenize      Write a shape's token maps as JSON
  ablate        Run a desk-scale tokenizer ablation
  config        Print the merged configuration

Usage:
    python main.py gen-data --out data --shapes 8 --seed 1
    python main.py train-vqvae --data data --out vqvae.ckpt
    python main.py train-ar --data data --vqvae vqvae.ckpt --out ar.ckpt
    python main.py detailize --input coarse.obj --vqvae vqvae.ckpt --ar ar.ckpt --output fine.obj

Machine-readable results go to standard output as one JSON line; logs,
progress bars and tables go to standard error. Exit status is 0 on
success, 1 on a runtime error and 2 on a usage or configuration error.
"""

import os
from collections.abc import MutableMapping

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def apply_thread_caps(environ: MutableMapping[str, str]) -> None:
    """Cap the BLAS/OpenMP pools.

    An explicit ``MARS_THREADS`` overrides whatever the pool variables say;
    without it each pool defaults to one thread unless already set.
    """
    threads = environ.get("MARS_THREADS")
    for var in THREAD_VARS:
        if threads is not None:
            environ[var] = threads
        else:
            environ.setdefault(var, "1")


# Must run before numpy is imported.
apply_thread_caps(os.environ)

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable

# Ensure the project root is in the Python path for imports
PROJECT_ROOT = Path(__file__).resolve().parent
sys.path.insert(0, str(PROJECT_ROOT))

from src.ar import SamplerConfig
from src.checkpoint import load_checkpoint, restore_ar, restore_vqvae
from src.dataset import build_dataset, load_manifest
from src.errors import ConfigError, MarsError
from src.experiments import STUDIES, run_ablation
from src.mesh import load_obj, save_obj
from src.occupancy import save_voxels
from src.pipeline import detailize, detailize_samples, evaluate, evaluation_grids, reconstruct
from src.reporting import (
    print_ablation_table,
    print_dataset_summary,
    print_eval_report,
    print_training_summary,
    write_json_report,
    write_loss_csv,
    write_table_csv,
)
from src.training import train_ar, train_vqvae
from src.utils import dump_config, load_config, merge_config, setup_logging
from src.vqvae import LodSchedule, save_token_maps, tokenize_shape

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

logger = logging.getLogger("mars")


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def _emit(payload: dict[str, Any]) -> None:
    """Print one JSON line on standard output."""
    print(json.dumps(payload, sort_keys=True), flush=True)


def _sibling(path: Path, suffix: str) -> Path:
    """``fine.obj`` + ``lod2`` → ``fine.lod2.obj``."""
    return path.with_name(f"{path.stem}.{suffix}{path.suffix}")


# ── subcommands ────────────────────────────────────────────────────────
def cmd_gen_data(args: argparse.Namespace, config: dict[str, Any]) -> int:
    n_shapes = args.shapes if args.shapes is not None else config["data"]["shapes"]
    seed = args.seed if args.seed is not None else config["data"]["seed"]
    manifest = build_dataset(
        n_shapes,
        seed,
        args.out,
        schedule=LodSchedule.from_config(config).to_dict(),
        subdivisions=config["data"]["subdivisions"],
    )
    if not args.quiet:
        print_dataset_summary(manifest.to_frame(), manifest.root)
    _emit({"manifest": str(manifest.root / "manifest.json"), "shapes": len(manifest), "families": manifest.family_counts()})
    return EXIT_OK


def _training_overrides(args: argparse.Namespace, section: str) -> dict[str, Any]:
    values = {}
    if args.steps is not None:
        values["steps"] = args.steps
    if args.seed is not None:
        values["seed"] = args.seed
    return {section: values} if values else {}


def cmd_train_vqvae(args: argparse.Namespace, config: dict[str, Any]) -> int:
    merge_config(config, _training_overrides(args, "train_vqvae"))
    manifest = load_manifest(args.data)
    out = Path(args.out)
    result = train_vqvae(manifest, config, out, quiet=args.quiet)
    csv_path = write_loss_csv(result.history, _sibling(out, "loss").with_suffix(".csv"))
    if not args.quiet:
        print_training_summary("VQVAE training", result.history, result.elapsed, out)
    _emit({"checkpoint": str(out), "loss_csv": str(csv_path), "digest": result.checkpoint.digest()})
    return EXIT_OK


def cmd_train_ar(args: argparse.Namespace, config: dict[str, Any]) -> int:
    merge_config(config, _training_overrides(args, "train_ar"))
    manifest = load_manifest(args.data)
    vqvae_ckpt = load_checkpoint(args.vqvae, "vqvae", LodSchedule.from_config(config))
    out = Path(args.out)
    result = train_ar(manifest, vqvae_ckpt, config, out, quiet=args.quiet)
    csv_path = write_table_csv(result.history, _sibling(out, "loss").with_suffix(".csv"))
    if not args.quiet:
        print_training_summary("AR training", result.history, result.elapsed, out)
    _emit({"checkpoint": str(out), "loss_csv": str(csv_path), "digest": result.checkpoint.digest()})
    return EXIT_OK


def _sampler(args: argparse.Namespace, config: dict[str, Any]) -> SamplerConfig:
    sampler = SamplerConfig.from_config(config)
    overrides = {
        "temperature": args.temperature,
        "top_k": args.top_k,
        "seed": args.seed,
        "condition_lods": args.condition_lods,
    }
    sampler = replace(sampler, **{k: v for k, v in overrides.items() if v is not None})
    return replace(sampler, greedy=True) if args.greedy else sampler


def cmd_detailize(args: argparse.Namespace, config: dict[str, Any]) -> int:
    schedule = LodSchedule.from_config(config)
    vqvae_ckpt = load_checkpoint(args.vqvae, "vqvae", schedule)
    ar_ckpt = load_checkpoint(args.ar, "ar", schedule)
    vqvae = restore_vqvae(vqvae_ckpt)
    ar = restore_ar(ar_ckpt, vqvae_ckpt)
    sampler = _sampler(args, config)
    coarse = load_obj(args.input)
    options = {
        "emit_lods": args.emit_lods,
        "tokenize_seed": config["train_ar"]["tokenize_seed"],
        "lattice": config["eval"]["lattice"],
    }
    out = Path(args.output)

    if args.samples == 1:
        outputs = [(out, detailize(coarse, vqvae, ar, sampler, **options))]
    else:
        results = detailize_samples(coarse, vqvae, ar, sampler, args.samples, **options)
        outputs = [(_sibling(out, f"sample{k}"), r) for k, r in enumerate(results, start=1)]

    written = []
    for path, result in outputs:
        written.append(str(save_obj(result.mesh, path)))
        for lod, mesh in sorted(result.lod_meshes.items()):
            written.append(str(save_obj(mesh, _sibling(path, f"lod{lod}"))))
    empty = [str(path) for path, result in outputs if result.mesh.is_empty]
    _emit({"outputs": written, "condition_lods": outputs[0][1].prefix_length, "empty": empty})
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, config: dict[str, Any]) -> int:
    eval_config = config["eval"]
    resolution = args.resolution or eval_config["resolution"]
    tau = args.tau or eval_config["tau"]
    coarse = load_obj(args.input)
    output = load_obj(args.output)
    grids = evaluation_grids(coarse, output, resolution)
    report = evaluate(coarse, output, resolution, tau, eval_config["samples"], eval_config["seed"], grids=grids)
    write_json_report(report.to_dict(), args.report)
    if args.voxels:
        voxel_dir = Path(args.voxels)
        voxel_dir.mkdir(parents=True, exist_ok=True)
        save_voxels(grids.input_grid, voxel_dir / "input.vox")
        save_voxels(grids.output_fine, voxel_dir / "output_fine.vox")
        save_voxels(grids.output_grid, voxel_dir / "output.vox")
    if not args.quiet:
        print_eval_report(report.to_dict())
    _emit(report.to_dict())
    return EXIT_OK


def cmd_reconstruct(args: argparse.Namespace, config: dict[str, Any]) -> int:
    vqvae = restore_vqvae(load_checkpoint(args.vqvae, "vqvae", LodSchedule.from_config(config)))
    seed = args.seed if args.seed is not None else config["train_ar"]["tokenize_seed"]
    mesh = reconstruct(load_obj(args.input), vqvae, args.lod, seed, config["eval"]["lattice"])
    save_obj(mesh, args.output)
    _emit({"output": str(args.output), "lod": args.lod, "triangles": mesh.n_triangles})
    return EXIT_OK


def cmd_tokenize(args: argparse.Namespace, config: dict[str, Any]) -> int:
    vqvae = restore_vqvae(load_checkpoint(args.vqvae, "vqvae", LodSchedule.from_config(config)))
    seed = args.seed if args.seed is not None else config["train_ar"]["tokenize_seed"]
    maps = tokenize_shape(load_obj(args.input), vqvae, seed)
    save_token_maps(maps, vqvae.schedule, args.output)
    _emit({"output": str(args.output), "tokens": [len(m) for m in maps]})
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, config: dict[str, Any]) -> int:
    if args.steps is not None:
        merge_config(config, {"train_vqvae": {"steps": args.steps}})
    manifest = load_manifest(args.data)
    frame = run_ablation(
        args.study, manifest, config, args.seeds, args.sizes, train_seeds=args.train_seeds, quiet=args.quiet
    )
    write_table_csv(frame, args.out)
    if not args.quiet:
        print_ablation_table(args.study, frame)
    _emit({"study": args.study, "table": str(args.out), "rows": len(frame)})
    return EXIT_OK


def cmd_config(args: argparse.Namespace, config: dict[str, Any]) -> int:
    if not args.dump:
        logger.error("config: nothing to do (use --dump)")
        return EXIT_USAGE
    sys.stdout.write(dump_config(config))
    return EXIT_OK


# ── argument parsing ───────────────────────────────────────────────────
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="YAML configuration file (defaults built in)")
    common.add_argument("--quiet", action="store_true", help="Only machine-readable output on stdout")

    parser = argparse.ArgumentParser(
        description="MARS: mesh detailization by next-LOD token prediction",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, handler: Callable[[argparse.Namespace, dict[str, Any]], int], help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(handler=handler)
        return p

    p = add("gen-data", cmd_gen_data, "Build a procedural dataset")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--shapes", type=positive_int, default=None, help="Number of shape pairs")
    p.add_argument("--seed", type=int, default=None)

    for name, handler in (("train-vqvae", cmd_train_vqvae), ("train-ar", cmd_train_ar)):
        p = add(name, handler, f"Run {name.replace('train-', '')} training")
        p.add_argument("--data", required=True, help="Dataset directory or manifest.json")
        p.add_argument("--out", required=True, help="Checkpoint path")
        p.add_argument("--steps", type=positive_int, default=None)
        p.add_argument("--seed", type=int, default=None)
        if name == "train-ar":
            p.add_argument("--vqvae", required=True, help="Frozen VQVAE checkpoint")

    p = add("detailize", cmd_detailize, "Detailize a coarse mesh")
    p.add_argument("--input", required=True)
    p.add_argument("--vqvae", required=True)
    p.add_argument("--ar", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--condition-lods", dest="condition_lods", type=int, default=None)
    p.add_argument("--temperature", type=positive_float, default=None)
    p.add_argument("--top-k", dest="top_k", type=positive_int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--emit-lods", dest="emit_lods", action="store_true", help="Also write <output>.lod<i>.obj")
    p.add_argument("--samples", type=positive_int, default=1, help="Write <output>.sample<k>.obj for k = 1..n")

    p = add("eval", cmd_eval, "Evaluate an output mesh against its coarse input")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--resolution", type=positive_int, default=None)
    p.add_argument("--tau", type=positive_float, default=None)
    p.add_argument("--voxels", default=None, help="Directory for the voxel grids used by the IOUs")

    p = add("reconstruct", cmd_reconstruct, "Reconstruct a mesh through one LOD")
    p.add_argument("--input", required=True)
    p.add_argument("--vqvae", required=True)
    p.add_argument("--lod", type=positive_int, required=True, help="1-based LOD")
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=None)

    p = add("tokenize", cmd_tokenize, "Write the token maps of a mesh")
    p.add_argument("--input", required=True)
    p.add_argument("--vqvae", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=None)

    p = add("ablate", cmd_ablate, "Run a tokenizer ablation")
    p.add_argument("--study", choices=STUDIES, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV table path")
    p.add_argument("--steps", type=positive_int, default=None)
    p.add_argument("--seeds", type=positive_int, default=5, help="Evaluation seeds per shape")
    p.add_argument("--sizes", type=positive_int, nargs="+", default=[64, 256], help="Codebook sizes")
    p.add_argument("--train-seeds", type=positive_int, default=3, help="Training runs per variant")

    p = add("config", cmd_config, "Print the merged configuration")
    p.add_argument("--dump", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    """Run one subcommand and return its exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    # ── Step 1: Load configuration ──────────────────────────────────────
    try:
        config = load_config(args.config)
    except (FileNotFoundError, ConfigError) as exc:
        print(f"Configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    # ── Step 2: Setup structured logging ────────────────────────────────
    setup_logging(config, quiet=args.quiet)
    start_time = time.time()
    logger.info("mars %s: starting", args.command)

    # ── Step 3: Run the subcommand ──────────────────────────────────────
    try:
        status = args.handler(args, config)
    except ConfigError as exc:
        logger.error("Configuration error: %s", exc)
        return EXIT_USAGE
    except (MarsError, OSError, ValueError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return EXIT_RUNTIME

    logger.info("mars %s: finished in %.2f seconds", args.command, time.time() - start_time)
    return status


if __name__ == "__main__":
    sys.exit(main())
