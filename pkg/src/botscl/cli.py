"""Command-line entry point: ``botscl <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 data validation error, 4 numeric
failure.  Errors are reported on one stderr line as ``error: <kind>: <msg>``.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path


from . import pipeline as pl
from .graph import DatasetError, NoLabeledEdgesError, format_stats, graph_stats, save_dataset
from .model import GraphView, load_checkpoint
from .numcore import NonFiniteError
from .synth import generate, load_profile

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


def _default_seed() -> int:
    raw = os.environ.get("BOTSCL_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"BOTSCL_SEED must be an integer, got {raw!r}") from None


def _fresh_dir(path: str) -> Path:
    out = Path(path)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise UsageError(f"output directory {out} already exists and is not empty; use a fresh one")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seeds(text: str) -> list[int]:
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(s) for s in text.split(",") if s]
    except ValueError:
        raise UsageError(f"bad seed list {text!r}; use 0,1,2 or 0..4") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s]
    except ValueError:
        raise UsageError(f"bad number list {text!r}") from None


def _config(args) -> pl.TrainConfig:
    """Preset defaults, then the dataset reference, then ``--set`` overrides."""
    name = args.preset
    if name is None:
        name = args.dataset if args.dataset in pl.PRESETS else "twibot20-like"
    cfg = pl.preset(name, seed=args.seed)
    cfg = pl.apply_overrides(cfg, [f"source={json.dumps(args.dataset)}"] + list(args.set or []))
    return cfg


def _data(cfg: pl.TrainConfig, seed: int | None = None):
    return pl.resolve_data(cfg, seed)


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    profile = load_profile(args.profile)
    if args.n is not None:
        profile = profile.with_n(args.n)
    g, s = generate(profile, args.seed)
    out = _fresh_dir(args.out)
    save_dataset(g, s, out)
    (out / "profile.json").write_text(profile.to_json() + "\n", encoding="utf-8")
    print(json.dumps({"out": str(out), "n": g.n, "edges": g.num_edges(), "seed": args.seed}))
    return 0


def cmd_measure(args) -> int:
    cfg = pl.TrainConfig(source=args.dataset, n=args.n)
    g, s = _data(cfg, args.seed)
    report = graph_stats(g, s)
    print(json.dumps(report, indent=2, sort_keys=True) if args.json else format_stats(report))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _fresh_dir(args.out)
    pl.write_json(out / "config.json", cfg.to_dict())
    g, s = _data(cfg)
    result = pl.run(cfg, g, s)
    pl.write_run(out, result, g, s)
    print(json.dumps(result.metrics.to_dict(), sort_keys=True))
    return 0


def _run_config(run: Path) -> pl.TrainConfig:
    path = run / "config.json"
    if not path.is_file():
        raise DatasetError(f"missing file {path}")
    return pl.TrainConfig.from_dict(json.loads(path.read_text(encoding="utf-8")))


def cmd_eval(args) -> int:
    run = Path(args.run)
    cfg = _run_config(run)
    if args.dataset:
        cfg = pl.apply_overrides(cfg, [f"source={json.dumps(args.dataset)}"])
    _, s = _data(cfg)
    metrics = pl.recompute_metrics(run, s)
    print(json.dumps(metrics.to_dict(), sort_keys=True))
    return 0


def cmd_export(args) -> int:
    run = Path(args.run)
    cfg = _run_config(run)
    g, s = _data(cfg)
    if (run / "classifier.json").is_file():
        params, meta = load_checkpoint(run / "checkpoint")
        enc = pl.encoder_config(cfg, g)
        H = pl.representations(GraphView.of(g), params, enc)
        pl.export_embeddings(H, s, args.out, g.node_ids)
    else:
        shutil.copyfile(run / "embeddings.csv", args.out)
    print(json.dumps({"out": args.out}))
    return 0


def _write_rows(out: Path, name: str, rows: list[dict]) -> None:
    (out / f"{name}.csv").write_text(pl.rows_to_csv(rows), encoding="utf-8")


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.kind == "mask":
        cfg = pl.apply_overrides(cfg, [f"model={args.model}"])
    out = _fresh_dir(args.out)
    pl.write_json(out / "config.json", {**cfg.to_dict(), "sweep": args.kind})
    seeds = _seeds(args.seeds)
    if args.kind == "mask":
        rows = pl.experiment_mask_sweep(cfg, seeds, jobs=args.jobs)
        summary = pl.mean_by(rows, "fraction")
    else:
        grid = _floats(args.grid) if args.grid else pl.LAMBDA_GRID
        rows = pl.experiment_lambda_sweep(cfg, seeds, grid, jobs=args.jobs)
        summary = {f"{a},{b}": v for (a, b), v in pl.mean_by(rows, ("lambda1", "lambda2")).items()}
    _write_rows(out, f"{args.kind}_sweep", rows)
    pl.write_json(out / "summary.json", {"mean_accuracy": {str(k): v for k, v in summary.items()}})
    print(json.dumps({"out": str(out), "rows": len(rows)}))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _fresh_dir(args.out)
    pl.write_json(out / "config.json", cfg.to_dict())
    variants = [v for v in args.variants.split(",") if v]
    augmentors = [a for a in args.augmentors.split(",") if a]
    rows = pl.experiment_ablation(cfg, _seeds(args.seeds), variants, augmentors, jobs=args.jobs)
    _write_rows(out, "ablation", rows)
    table = pl.ablation_table(rows)
    (out / "table.csv").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


# ---------------------------------------------------------------- parser


def _add_train_flags(p: argparse.ArgumentParser, seed: int) -> None:
    p.add_argument("--dataset", required=True, help="dataset directory, builtin profile name, or profile JSON")
    p.add_argument("--preset", choices=sorted(pl.PRESETS), help="hyperparameter preset (default: inferred)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    p.add_argument("--seed", type=int, default=seed, help="run seed (default: $BOTSCL_SEED or 0)")


def build_parser(seed: int) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="botscl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset directory")
    p.add_argument("--profile", required=True, help="builtin profile name or profile JSON path")
    p.add_argument("--n", type=int, help="override node count")
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("measure", help="print per-relation, per-class homophily")
    p.add_argument("--dataset", required=True, help="dataset directory or profile")
    p.add_argument("--n", type=int, help="node count when --dataset is a profile")
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--json", action="store_true", help="emit JSON instead of a table")
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("train", help="stage 1 + stage 2 training; writes a run directory")
    _add_train_flags(p, seed)
    p.add_argument("--out", required=True, help="fresh run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="recompute metrics from a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--dataset", help="dataset to evaluate on (default: the run's own source)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="heterophilic-edge masking or lambda sweep")
    _add_train_flags(p, seed)
    p.add_argument("--kind", choices=["mask", "lambda"], required=True)
    p.add_argument("--model", choices=["baseline", "botscl"], default="baseline", help="model for the mask sweep")
    p.add_argument("--grid", help="comma list of lambda values (default 0.1..1.0)")
    p.add_argument("--seeds", default="0..4", help="seed list, e.g. 0,1,2 or 0..4")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="module and augmentation ablation grid")
    _add_train_flags(p, seed)
    p.add_argument("--variants", default=",".join(pl.VARIANTS))
    p.add_argument("--augmentors", default="cnd,ea,er,fm")
    p.add_argument("--seeds", default="0..4")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export", help="write node embeddings of a run as CSV")
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_export)
    return parser


def _fail(code: int, kind: str, exc: BaseException) -> int:
    msg = " ".join(str(exc).split())
    print(f"error: {kind}: {msg}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        seed = _default_seed()
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    parser = build_parser(seed)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except pl.UnknownKeyError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except (DatasetError, NoLabeledEdgesError) as exc:
        return _fail(EXIT_DATA, type(exc).__name__, exc)
    except (pl.DivergenceError, NonFiniteError) as exc:
        return _fail(EXIT_NUMERIC, type(exc).__name__, exc)
    except (ValueError, KeyError) as exc:
        return _fail(EXIT_USAGE, type(exc).__name__, exc)


if __name__ == "__main__":
    sys.exit(main())
