"""Command-line entry point: ``manifold-ssl <subcommand>``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import KEYS, RunConfig
from .data import GENERATORS, SplitSpec, load_csv, save_csv, split_labeled
from .errors import ConfigError, NonFiniteError, ParseError
from .evaluation import (ablation_csv, evaluate, export_adjacency, export_embeddings,
                         export_prototypes, run_ablation, run_experiment)
from .model import Model
from .trainer import load_checkpoint, save_checkpoint

log = logging.getLogger("manifold_ssl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_overrides(extra: list[str]) -> dict[str, str]:
    out = {}
    for item in extra:
        if not item.startswith("--") or "=" not in item:
            raise UsageError(f"unrecognised argument {item!r} (overrides are --key=value)")
        key, value = item[2:].split("=", 1)
        if key not in KEYS:
            raise UsageError(f"unknown config key {key!r}")
        out[key] = value
    return out


def _load_config(args, extra) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg.update(_parse_overrides(extra))
    if getattr(args, "seed", None) is not None:
        cfg.update({"train.seed": args.seed})
    return cfg


def _model_from_checkpoint(path) -> tuple[Model, RunConfig, dict]:
    params, _, proto_inputs, meta = load_checkpoint(path)
    cfg = RunConfig.parse(meta["config"])
    n_classes = params["cls.w"].shape[1]
    input_dim = params["enc.w0"].shape[0]
    model = Model(cfg.model_config(input_dim, n_classes), params, proto_inputs)
    return model, cfg, meta


def cmd_gen_data(args, extra):
    if extra:
        raise UsageError(f"unrecognised arguments: {' '.join(extra)}")
    gen = GENERATORS[args.generator]
    if args.generator == "two_moons":
        ds = gen(args.n, args.noise, args.seed)
    elif args.generator == "blobs":
        ds = gen(args.n, args.classes, args.spread, args.noise, args.seed)
    else:
        ds = gen(args.n, args.classes, None, args.noise, args.seed)
    if args.n_labeled is not None:
        ds = split_labeled(ds, SplitSpec(args.n_labeled, seed=args.seed))
    save_csv(ds, args.out)
    return 0


def cmd_train(args, extra):
    cfg = _load_config(args, extra)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = run_experiment(cfg)
    save_checkpoint(out / "checkpoint.npz", res.model, res.state, cfg.to_text(), cfg.hash)
    (out / "report.csv").write_text(res.report.to_csv(), encoding="utf-8")
    metrics = {**res.metrics.to_dict(), "seed": cfg["train.seed"], "config_hash": cfg.hash,
               "iters": len(res.report), "wall_clock_s": res.report.wall_clock_s}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "summary.json").write_text(json.dumps(res.report.summary(), indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    print(f"test error {res.metrics.error_rate:.4f} -> {out}")
    return 0


def cmd_eval(args, extra):
    if extra:
        raise UsageError(f"unrecognised arguments: {' '.join(extra)}")
    model, _, _ = _model_from_checkpoint(args.checkpoint)
    ds = load_csv(args.data)
    metrics = evaluate(model, ds, use_graph=False if args.no_graph else None)
    print(json.dumps(metrics.to_dict(), sort_keys=True))
    return 0


def cmd_export(args, extra):
    if extra:
        raise UsageError(f"unrecognised arguments: {' '.join(extra)}")
    model, _, _ = _model_from_checkpoint(args.checkpoint)
    if args.kind == "prototypes":
        text = export_prototypes(model)
    else:
        if not args.data:
            raise UsageError(f"--kind {args.kind} needs --data")
        ds = load_csv(args.data)
        if args.kind == "adjacency":
            if not 0 <= args.instance < len(ds):
                raise UsageError(f"--instance must lie in [0, {len(ds)})")
            text = export_adjacency(model, ds.X[args.instance])
        else:
            text = export_embeddings(model, ds)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_ablate(args, extra):
    cfg = _load_config(args, extra)
    if args.seeds < 2:
        raise UsageError("--seeds must be >= 2")
    rows = run_ablation(cfg, seeds=range(args.seeds))
    text = ablation_csv(rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="manifold-ssl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    g.add_argument("--generator", choices=sorted(GENERATORS), default="two_moons")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--spread", type=float, default=3.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-labeled", type=int, default=None, help="hide all but this many labels")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model; extra --key=value pairs override the config")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a labeled CSV")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--no-graph", action="store_true", help="classify raw encoder features")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="export adjacency, embeddings or prototypes as CSV")
    x.add_argument("--kind", choices=["adjacency", "embeddings", "prototypes"], required=True)
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data")
    x.add_argument("--instance", type=int, default=0)
    x.add_argument("--out")
    x.set_defaults(func=cmd_export)

    a = sub.add_parser("ablate", help="ablation table over seeds")
    a.add_argument("--config")
    a.add_argument("--seeds", type=int, default=2)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        return args.func(args, extra)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ParseError, NonFiniteError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
