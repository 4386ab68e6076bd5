from __future__ import annotations

import argparse
import sys
from collections.abc import Callable, Sequence
from dataclasses import replace
from pathlib import Path
from typing import Any

from app import runs
from app.config import RunConfig, load_run_config
from app.errors import OptiwingError, exit_code_for
from cli.ui import print_banner, print_error, print_info, print_json, print_result


def _floats(text: str) -> list[float]:
    return [float(item) for item in text.split(",") if item.strip()]


def _ints(text: str) -> list[int]:
    return [int(item) for item in text.split(",") if item.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="optiwing", description="OptiWing3D dataset and generation toolkit.")
    parser.add_argument("--config", type=Path, help="JSON run config (schema_version 1)")
    parser.add_argument("--preset", default="desk", choices=("full", "desk", "tiny"))
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--data-root", help="3D dataset root; falls back to OPTIWING_DATA_ROOT")
    parser.add_argument("--out", type=Path, help="output directory; defaults to <output_dir>/<command>")
    parser.add_argument("--json", action="store_true", help="print the raw result envelope")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("ingest", help="validate a dataset and write its report")
    commands.add_parser("split", help="seeded train/val/test assignment")

    fit = commands.add_parser("fit-bezier", help="encode every section as a rational Bezier latent")
    fit.add_argument("--cases", type=lambda text: text.split(","), help="comma-separated case ids")

    train = commands.add_parser("train", help="fit the conditional denoiser")
    train.add_argument("--split", type=Path, dest="split_path")
    train.add_argument("--latents", type=Path)
    train.add_argument("--resume", type=Path)

    generate = commands.add_parser("generate", help="sample wings for a conditions table")
    generate.add_argument("--checkpoint", type=Path, required=True)
    generate.add_argument("--conditions", type=Path, required=True)
    generate.add_argument("--grid-mach", type=_floats)
    generate.add_argument("--grid-cl", type=_floats)

    evaluate = commands.add_parser("evaluate", help="metrics of a checkpoint on one split")
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument("--split", default="test", choices=("train", "val", "test"))
    evaluate.add_argument("--split-file", type=Path)
    evaluate.add_argument("--latents", type=Path)
    evaluate.add_argument("--passes", type=int)

    analyze = commands.add_parser("analyze", help="dataset analyses")
    analyze.add_argument("kind", choices=("pca", "diff", "ld"))
    analyze.add_argument("--data-root-2d")

    ablate = commands.add_parser("ablate", help="metrics against training-set size")
    ablate.add_argument("--sizes", type=_ints, required=True)
    ablate.add_argument("--repeats", type=int, default=2)
    ablate.add_argument("--passes", type=int)
    ablate.add_argument("--split-file", type=Path)

    ywall = commands.add_parser("ywall", help="first-cell wall spacing for a target y+")
    ywall.add_argument("--mach", type=float, required=True)
    ywall.add_argument("--reynolds", type=float, required=True)
    ywall.add_argument("--t-inf", type=float, default=300.0)
    ywall.add_argument("--l-ref", type=float, default=1.0)
    ywall.add_argument("--y-plus", type=float, default=1.0)

    lhs = commands.add_parser("lhs", help="Latin hypercube over the flow conditions")
    lhs.add_argument("--n", type=int, required=True)
    lhs.add_argument("--log-reynolds", action="store_true")

    synth = commands.add_parser("synth", help="write a small synthetic 2D/3D dataset pair")
    synth.add_argument("--n-cases", type=int, default=32)
    synth.add_argument("--no-2d", action="store_true")
    return parser


def _out(args: argparse.Namespace, config: RunConfig) -> Path:
    return args.out or Path(config.output_dir) / args.command


def _grid(args: argparse.Namespace) -> tuple[list[float], list[float]] | None:
    if args.grid_mach is None and args.grid_cl is None:
        return None
    if not args.grid_mach or not args.grid_cl:
        raise OptiwingError("invalid_grid", "--grid-mach and --grid-cl must be given together.")
    return args.grid_mach, args.grid_cl


def run_command(args: argparse.Namespace) -> dict[str, Any]:
    config = load_run_config(args.config, preset=args.preset)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    root = args.data_root
    handlers: dict[str, Callable[[], dict[str, Any]]] = {
        "ingest": lambda: runs.ingest(config, _out(args, config), root=root),
        "split": lambda: runs.split(config, _out(args, config), root=root),
        "fit-bezier": lambda: runs.fit_bezier(config, _out(args, config), root=root, case_ids=args.cases),
        "train": lambda: runs.train(
            config,
            _out(args, config),
            root=root,
            split_path=args.split_path,
            latents_path=args.latents,
            resume=args.resume,
        ),
        "generate": lambda: runs.generate(
            config,
            args.checkpoint,
            args.conditions,
            _out(args, config),
            seed=args.seed,
            grid=_grid(args),
            root=root,
        ),
        "evaluate": lambda: runs.evaluate(
            config,
            args.checkpoint,
            args.split,
            _out(args, config),
            passes=args.passes,
            root=root,
            split_path=args.split_file,
            latents_path=args.latents,
        ),
        "analyze": lambda: runs.analyze(
            config,
            args.kind,
            args.out or Path(config.output_dir) / f"analyze_{args.kind}",
            root=root,
            root_2d=args.data_root_2d,
        ),
        "ablate": lambda: runs.ablate(
            config,
            _out(args, config),
            args.sizes,
            repeats=args.repeats,
            passes=args.passes,
            root=root,
            split_path=args.split_file,
        ),
        "ywall": lambda: runs.ywall(args.mach, args.reynolds, args.t_inf, args.l_ref, args.y_plus),
        "lhs": lambda: runs.lhs(args.n, config.seed, log_reynolds=args.log_reynolds),
        "synth": lambda: runs.synth(config, _out(args, config), args.n_cases, with_2d=not args.no_2d),
    }
    return handlers[args.command]()


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if not args.json:
        print_banner(args.command)
    try:
        envelope = run_command(args)
    except OptiwingError as exc:
        print_error(exc.code, exc.message)
        return exit_code_for(exc)
    except Exception as exc:  # noqa: BLE001
        print_error("internal_error", f"{type(exc).__name__}: {exc}")
        return 1
    if args.json:
        print_json(envelope)
    else:
        print_result(args.command, envelope["data"])
        if args.out is None and args.command not in ("ywall", "lhs"):
            print_info("Outputs written under the configured output_dir.")
    return 0


if __name__ == "__main__":
    sys.exit(main())
