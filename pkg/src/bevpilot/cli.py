"""Experiment runner.

Subcommands: generate / train / ablate / explain / counterfactual. Every run
writes a manifest (full config, package version, seed) before any artifact,
and same-seed reruns produce bit-identical outputs. Exit codes: 0 success,
2 invalid argument, 3 file problem, 4 training divergence, 5 unsupported
variant.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import restore_model
from .counterfactual import counterfactual, parse_mutation
from .dataset import example_from_spec, read_dataset, write_dataset
from .errors import (DatasetError, DivergenceError, InvalidArgumentError,
                     ScenarioError, UnsupportedVariantError)
from .metrics import evaluate_model, upsample_pyramid
from .model import DrivingModel, parse_variant
from .raster import GridConfig
from .report import (ablation_figure, attention_overlay, counterfactual_figure,
                     loss_curve_figure, write_attention_histogram_csv,
                     write_metrics_csv, write_pgm, write_ppm, write_signed_pgm)
from .scenes import SCENARIO_KINDS, generate_scenario
from .training import TrainConfig, train

EXIT_OK = 0
EXIT_INVALID_ARGUMENT = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4
EXIT_UNSUPPORTED_VARIANT = 5

OUT_ENV_VAR = "BEVPILOT_OUT"

DEFAULT_ABLATION_GRID = ("A", "B", "bottleneck-noatrous", "bottleneck-nope",
                         "bottleneck", "bottleneck-object")


def _default_out() -> str:
    return os.environ.get(OUT_ENV_VAR, ".")


def _out_dir(args) -> Path:
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(path: Path, command: str, config: dict):
    """Config snapshot sufficient to reproduce the run; written first."""
    manifest = {"command": command, "version": __version__, "config": config}
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def parse_kind_mix(text: str) -> dict:
    """'kind=weight,...' with nonnegative weights, at least one positive."""
    mix = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        name, sep, value = part.partition("=")
        if not sep:
            raise InvalidArgumentError(f"kind mix entry {part!r} needs kind=weight")
        if name not in SCENARIO_KINDS:
            raise InvalidArgumentError(
                f"unknown scenario kind {name!r}; expected one of {SCENARIO_KINDS}")
        try:
            weight = float(value)
        except ValueError as exc:
            raise InvalidArgumentError(f"bad weight in {part!r}") from exc
        if weight < 0 or not np.isfinite(weight):
            raise InvalidArgumentError(f"weight must be finite and >= 0 in {part!r}")
        mix[name] = mix.get(name, 0.0) + weight
    if not mix or sum(mix.values()) == 0:
        raise InvalidArgumentError("kind mix needs at least one positive weight")
    return mix


def apportion_counts(count: int, mix: dict) -> dict:
    """Largest-remainder split of ``count`` examples across kinds."""
    total = sum(mix.values())
    kinds = [k for k in SCENARIO_KINDS if k in mix]
    shares = {k: count * mix[k] / total for k in kinds}
    counts = {k: int(shares[k]) for k in kinds}
    leftover = count - sum(counts.values())
    by_remainder = sorted(kinds, key=lambda k: (-(shares[k] - counts[k]),
                                                SCENARIO_KINDS.index(k)))
    for k in by_remainder[:leftover]:
        counts[k] += 1
    return counts


def _variant_flags(args) -> dict:
    return {"variant": args.variant, "steps": args.steps,
            "batch_size": args.batch_size, "lr": args.lr,
            "lr_decay": args.lr_decay, "seed": args.seed,
            "checkpoint_every": args.checkpoint_every}


def cmd_generate(args) -> int:
    mix = parse_kind_mix(args.kind_mix)
    if args.count < 0:
        raise InvalidArgumentError("--count must be >= 0")
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(Path(str(out_path) + ".manifest.json"), "generate",
                   {"kind_mix": args.kind_mix, "count": args.count,
                    "seed": args.seed, "out": str(out_path)})
    counts = apportion_counts(args.count, mix)
    grid = GridConfig()
    examples = []
    index = 0
    for kind in SCENARIO_KINDS:
        for _ in range(counts.get(kind, 0)):
            examples.append(example_from_spec(kind, args.seed + index, grid))
            index += 1
    write_dataset(examples, out_path, grid)
    for kind in SCENARIO_KINDS:
        if kind in counts:
            print(f"{kind}: {counts[kind]}")
    print(f"wrote {len(examples)} examples to {out_path}")
    return EXIT_OK


def _load_examples(path) -> list:
    return read_dataset(path).examples


def cmd_train(args) -> int:
    variant = parse_variant(args.variant)
    out = _out_dir(args)
    write_manifest(out / "manifest.json", "train",
                   {**_variant_flags(args), "data": str(args.data)})
    examples = _load_examples(args.data)
    model = DrivingModel(variant, seed=args.seed)
    config = TrainConfig(steps=args.steps, batch_size=args.batch_size,
                         lr=args.lr, lr_decay=args.lr_decay, seed=args.seed,
                         checkpoint_every=args.checkpoint_every)
    log_path = out / "loss_log.csv"
    ckpt_path = out / "model.bpck"
    result = train(model, examples, config, log_path=log_path,
                   checkpoint_path=ckpt_path)
    if result.final is not None:
        print(f"step {result.steps}: total {result.final.total:.4f} "
              f"(position {result.final.position:.4f} m^2)")
        loss_curve_figure(log_path, out / "loss_curve.png")
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    grid_names = [g.strip() for g in args.grid.split(",") if g.strip()]
    if not grid_names:
        raise InvalidArgumentError("--grid needs at least one variant")
    variants = [(name, parse_variant(name)) for name in grid_names]
    out = _out_dir(args)
    write_manifest(out / "manifest.json", "ablate",
                   {**_variant_flags(args), "data": str(args.data),
                    "holdout": str(args.holdout) if args.holdout else None,
                    "grid": args.grid})
    train_examples = _load_examples(args.data)
    eval_examples = (_load_examples(args.holdout) if args.holdout
                     else train_examples)
    config = TrainConfig(steps=args.steps, batch_size=args.batch_size,
                         lr=args.lr, lr_decay=args.lr_decay, seed=args.seed,
                         checkpoint_every=args.checkpoint_every)
    rows = []
    for name, variant in variants:
        model = DrivingModel(variant, seed=args.seed)
        label = variant.label()
        train(model, train_examples, config,
              log_path=out / f"train_{label}.csv",
              checkpoint_path=out / f"{label}.bpck")
        result = evaluate_model(model, eval_examples)
        rows.append(result.row)
        if result.alphas is not None:
            write_attention_histogram_csv(out / f"attention_hist_{label}.csv",
                                          result.alphas)
        ent = "" if result.row.entropy is None else f" entropy {result.row.entropy:.3f}"
        print(f"{label}: ade {result.row.ade:.3f} fde {result.row.fde:.3f}"
              f" collision {result.row.collision:.4f}{ent}")
    write_metrics_csv(out / "ablation.csv", rows)
    ablation_figure(rows, out / "ablation.png")
    print(f"table: {out / 'ablation.csv'}")
    return EXIT_OK


def cmd_explain(args) -> int:
    model = restore_model(args.checkpoint)
    if not model.variant.has_attention:
        raise UnsupportedVariantError(
            "this checkpoint's variant produces no attention maps")
    out = _out_dir(args)
    write_manifest(out / "manifest.json", "explain",
                   {"checkpoint": str(args.checkpoint), "data": str(args.data),
                    "limit": args.limit})
    examples = _load_examples(args.data)
    if args.limit is not None:
        examples = examples[:args.limit]
    if not examples:
        raise InvalidArgumentError("no examples to explain")
    res = model.grid.resolution
    for i, ex in enumerate(examples):
        alpha = model.rollout(ex.channels).alpha.numpy()[0]
        up = upsample_pyramid(alpha, res)
        write_pgm(out / f"alpha_{i:04d}.pgm", up)
        write_ppm(out / f"overlay_{i:04d}.ppm",
                  attention_overlay(ex.channels, up))
    print(f"wrote {len(examples)} heatmap/overlay pairs to {out}")
    return EXIT_OK


def cmd_counterfactual(args) -> int:
    model = restore_model(args.checkpoint)
    mutation = parse_mutation(args.mutation)
    out = _out_dir(args)
    write_manifest(out / "manifest.json", "counterfactual",
                   {"checkpoint": str(args.checkpoint), "kind": args.kind,
                    "scene_seed": args.scene_seed, "mutation": args.mutation})
    scene = generate_scenario(args.kind, args.scene_seed)
    report = counterfactual(model, scene, mutation, model.grid)
    write_ppm(out / "overlay_before.ppm",
              attention_overlay(report.base_channels, report.alpha_before))
    write_ppm(out / "overlay_after.ppm",
              attention_overlay(report.mutated_channels, report.alpha_after))
    write_signed_pgm(out / "delta_alpha.pgm", report.delta_alpha)
    counterfactual_figure(report, out / "counterfactual.png")
    line = report.summary_line()
    (out / "report.txt").write_text(line + "\n")
    print(line)
    return EXIT_OK


def _add_train_flags(p):
    p.add_argument("--variant", default="bottleneck",
                   help="preset name or attention=MODE[,atrous=0|1][,pe=0|1][,object=0|1]")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-decay", type=float, default=0.9999)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bevpilot",
        description="Train and probe interpretable trajectory models on "
                    "synthetic top-down driving scenes.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a deterministic scenario dataset")
    g.add_argument("--kind-mix", default=",".join(f"{k}=1" for k in SCENARIO_KINDS))
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=os.path.join(_default_out(), "dataset.bpds"))
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="imitation-train one variant")
    t.add_argument("--data", required=True)
    t.add_argument("--out", default=_default_out())
    _add_train_flags(t)
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("ablate", help="train a variant grid and tabulate metrics")
    a.add_argument("--data", required=True)
    a.add_argument("--holdout", default=None)
    a.add_argument("--out", default=_default_out())
    a.add_argument("--grid", default=",".join(DEFAULT_ABLATION_GRID))
    _add_train_flags(a)
    a.set_defaults(fn=cmd_ablate)

    e = sub.add_parser("explain", help="export attention heatmaps and overlays")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default=_default_out())
    e.add_argument("--limit", type=int, default=None)
    e.set_defaults(fn=cmd_explain)

    c = sub.add_parser("counterfactual",
                       help="compare rollouts on a scene and its mutated twin")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--kind", required=True, choices=SCENARIO_KINDS)
    c.add_argument("--scene-seed", type=int, default=0)
    c.add_argument("--mutation", required=True)
    c.add_argument("--out", default=_default_out())
    c.set_defaults(fn=cmd_counterfactual)
    return parser


def entrypoint(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (InvalidArgumentError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID_ARGUMENT
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except UnsupportedVariantError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNSUPPORTED_VARIANT
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def main():
    raise SystemExit(entrypoint())


if __name__ == "__main__":
    main()
