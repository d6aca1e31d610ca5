"""Command line entry point: ``chandnas {search,sweep,report,cost}``.

Outputs go to ``--out`` or, when omitted, to ``$CHANDNAS_OUT`` (default
``./chandnas_out``).  The exit status is 0 only when every requested run
completed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from .cost import exact_counts
from .data import DatasetError, load_dataset
from .pareto import (
    ParetoPoint,
    SweepPlan,
    export_architecture,
    flag_dominated,
    load_points,
    model_with_channels,
    point_from_result,
    report,
    run_sweep,
    sort_fronts,
)
from .search import ConfigError, SearchConfig, run_search
from .spec import SpecError, load_network_spec

OUT_ENV = "CHANDNAS_OUT"


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, "chandnas_out"))


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--spec", default="zoo:toy6", help="network YAML file or zoo:<name> (default zoo:toy6)")
    p.add_argument("--data", default="toy_images", help="toy_images, csv_images or kws_mfcc")
    p.add_argument("--data-path", default=None, help="directory for csv_images / kws_mfcc")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None, help=f"output directory (default ${OUT_ENV})")
    p.add_argument("--epochs-warmup", type=int)
    p.add_argument("--epochs-finetune", type=int)
    p.add_argument("--max-search-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr-w", type=float)
    p.add_argument("--lr-theta", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lambda-scale", type=float, help="multiply the closed-form lambda (sensitivity runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chandnas", description="Channel-count search under size and OPs costs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="one warmup/search/fine-tune run")
    _add_common(p)
    p.add_argument("--target-frac", type=float, default=0.5, help="size target as a fraction of the seed")
    p.add_argument("--mu", type=float, default=0.0, help="OPs regularization strength")
    p.add_argument("--warmup-ckpt", type=Path, default=None)
    p.add_argument("--export", type=Path, default=None, help="write the shrunk architecture YAML here")

    p = sub.add_parser("sweep", help="mu sweep for each size target")
    _add_common(p)
    p.add_argument("--plan", type=Path, default=None, help="YAML/JSON sweep plan (SweepPlan fields)")
    p.add_argument("--warmup-ckpt", type=Path, default=None)

    p = sub.add_parser("report", help="rebuild pareto.csv/json from a runs directory")
    p.add_argument("--runs-dir", type=Path, required=True, help="directory holding pareto.json")
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("cost", help="exact size and OPs of a network")
    p.add_argument("--spec", default="zoo:toy6")
    p.add_argument("--channels", type=Path, default=None, help="JSON/YAML map of layer id to live channels")
    p.add_argument("--per-layer", action="store_true")
    return parser


def _config(args, spec) -> SearchConfig:
    return SearchConfig.from_spec(
        spec,
        rng_seed=args.seed,
        epochs_warmup=args.epochs_warmup,
        epochs_finetune=args.epochs_finetune,
        max_search_epochs=args.max_search_epochs,
        patience=args.patience,
        lr_w=args.lr_w,
        lr_theta=args.lr_theta,
        batch_size=args.batch_size,
        lambda_scale=args.lambda_scale,
    )


def _load_map(path: Path) -> dict:
    data = yaml.safe_load(path.read_text())
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return data


def cmd_search(args) -> int:
    spec = load_network_spec(args.spec)
    train, test = load_dataset(args.data, args.data_path, args.seed)
    cfg = _config(args, spec).replace(s_star_fraction=args.target_frac, mu=args.mu)
    out = args.out or default_out()
    run_id = f"seed{cfg.rng_seed}_s{round(cfg.s_star_fraction * 100):03d}_single"
    res = run_search(spec, train, test, cfg, warmup_ckpt=args.warmup_ckpt,
                     log_path=out / "runs" / f"{run_id}.jsonl")
    pt = point_from_result(run_id, cfg.s_star_fraction, res, spec)
    report([pt], out)
    if args.export:
        export_architecture(pt, args.export)
    print(f"size {pt.size_params} (target {pt.s_star:.0f}), ops {pt.ops}, "
          f"val acc {pt.val_accuracy:.4f}, test acc {pt.test_accuracy:.4f}")
    print(f"channels {pt.channel_config}")
    return 0


def cmd_sweep(args) -> int:
    spec = load_network_spec(args.spec)
    train, test = load_dataset(args.data, args.data_path, args.seed)
    plan = SweepPlan.from_dict(_load_map(args.plan)) if args.plan else SweepPlan()
    out = args.out or default_out()
    points = run_sweep(spec, train, test, plan, _config(args, spec), out_dir=out, warmup_ckpt=args.warmup_ckpt)
    report(points, out)
    for p in points:
        if p.completed:
            print(f"{p.run_id}: mu={p.mu:.3g} size={p.size_params} ops={p.ops} val_acc={p.val_accuracy:.4f}"
                  f"{' dominated' if p.dominated else ''}")
        else:
            print(f"{p.run_id}: FAILED {p.error}")
    return 0 if all(p.completed for p in points) else 1


def cmd_report(args) -> int:
    src = args.runs_dir / "pareto.json"
    if not src.is_file():
        raise ConfigError(f"{src} not found")
    points: list[ParetoPoint] = load_points(src)
    flag_dominated(points)
    points = sort_fronts(points)
    csv_path, _ = report(points, args.out or args.runs_dir)
    print(f"wrote {csv_path} ({len(points)} points)")
    return 0 if all(p.completed for p in points) else 1


def cmd_cost(args) -> int:
    spec = load_network_spec(args.spec)
    channels = _load_map(args.channels) if args.channels else {}
    model = model_with_channels(spec, {k: int(v) for k, v in channels.items()})
    rep = exact_counts(model)
    if args.per_layer:
        for lc in rep.per_layer:
            print(f"{lc.layer_id:>8} {lc.kind:>10} in={lc.c_in:<5} out={lc.c_out:<5} params={lc.params:<9} ops={lc.ops}")
    print(json.dumps({"size_params": rep.total_params, "ops": rep.total_ops,
                      "dense_params": rep.dense_params, "bias_params": rep.bias_params,
                      "bn_params": rep.bn_params}))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = {"search": cmd_search, "sweep": cmd_sweep, "report": cmd_report, "cost": cmd_cost}[args.command]
    try:
        return handler(args)
    except (SpecError, ConfigError, DatasetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
