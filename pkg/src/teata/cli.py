"""Command-line entry point.

Subcommands: gen-data, train, eval, report, export-embeddings. Every command
takes a TOML config; dotted keys can be overridden with repeated
``--set section.key=value`` flags. TEATA_RUN_DIR sets the default output
root. Exit codes: 0 success, 2 config error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import config as config_mod
from .checkpoint import load_checkpoint
from .config import RunConfig, config_hash, load_config
from .data import generate_synthetic_domain, load_domain
from .errors import (
    ConfigError,
    DataLeakError,
    InvalidArgument,
    MissingFile,
    MissingReports,
    ProtocolError,
    SchemaError,
    TeataError,
)
from .evaluation import export_embeddings, forgetting_matrix
from .lifelong import build_state, evaluate_step, load_state_tensors, run_plan

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib


def _default_run_root() -> Path:
    return Path(os.environ.get("TEATA_RUN_DIR", "runs"))


def _load_config(args) -> RunConfig:
    path = Path(args.config)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    data = tomllib.loads(path.read_text())
    if getattr(args, "set", None):
        config_mod.apply_overrides(data, args.set)
    return config_mod.from_dict(data)


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    if not config.data.generators:
        raise ConfigError("data.generators is empty; nothing to generate")
    root = Path(config.data.root)
    for spec in config.data.generators:
        try:
            dataset = generate_synthetic_domain(
                root / spec.name,
                name=spec.name,
                seed=spec.seed,
                num_identities=spec.num_identities,
                images_per_identity=spec.images_per_identity,
                clothing_state=spec.clothing_state,
                num_cameras=spec.num_cameras,
                noise_std=spec.noise_std,
                image_height=config.model.image_height,
                image_width=config.model.image_width,
            )
        except TeataError as exc:
            raise type(exc)(f"domain {spec.name!r}: {exc}") from exc
        print(f"{dataset.name}: {dataset.clothing_state}, "
              f"{dataset.num_identities} identities, {len(dataset.records)} images "
              f"-> {root / spec.name}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    run_dir = Path(args.run_dir) if args.run_dir else _default_run_root() / "run"
    results = run_plan(config, run_dir, resume=args.resume)
    for result in results:
        line = f"step {result.step} [{result.domain}]"
        if result.aggregates:
            groups = ", ".join(
                f"{key} mAP {value['mAP']:.3f}"
                for key, value in sorted(result.aggregates.items())
                if isinstance(value, dict) and "mAP" in value
            )
            line += f": {groups}"
        print(line)
    print(f"run directory: {run_dir}")
    return 0


def _state_from_checkpoint(checkpoint_dir: Path, config_path: Path | None):
    if config_path is None:
        candidate = checkpoint_dir.parent.parent / "config.toml"
        if not candidate.is_file():
            raise ConfigError(
                "no --config given and no config.toml found in the run directory"
            )
        config_path = candidate
    config = load_config(config_path)
    meta, tensors = load_checkpoint(checkpoint_dir)
    if meta.get("config_hash") != config_hash(config):
        raise ConfigError(
            f"checkpoint {checkpoint_dir} was produced by a different configuration "
            f"than {config_path}"
        )
    state = build_state(config)
    load_state_tensors(state, tensors)
    return state, config


def cmd_eval(args) -> int:
    state, config = _state_from_checkpoint(
        Path(args.checkpoint), Path(args.config) if args.config else None
    )
    if args.protocol != "auto":
        config.eval.protocol_override = args.protocol
    root = Path(config.data.root)
    seen_names = args.domains.split(",") if args.domains else config.data.domains
    unseen_names = args.unseen.split(",") if args.unseen else config.data.unseen
    seen = [load_domain(root / name) for name in seen_names]
    unseen = [load_domain(root / name) for name in unseen_names]
    reports, aggregates = evaluate_step(state, seen, unseen)

    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent / "reports"
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, report in reports.items():
        (out_dir / f"{name}.json").write_text(json.dumps(report, indent=2) + "\n")
    (out_dir / "aggregate.json").write_text(json.dumps(aggregates, indent=2) + "\n")
    for name, report in reports.items():
        print(f"{name}: protocol {report['protocol']}, mAP {report['mAP']:.4f}, "
              f"R-1 {report['rank1']:.4f}")
    print(f"reports written to {out_dir}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    config_path = run_dir / "config.toml"
    if not config_path.is_file():
        raise MissingReports(f"{run_dir} has no config.toml")
    config = load_config(config_path)
    domains = (
        list(config.data.domains) if config.train.method != "JOINT" else ["joint"]
    )

    step_reports: list[dict[str, dict]] = []
    final_aggregate: dict = {}
    step = 0
    while True:
        step += 1
        reports_dir = run_dir / f"step{step}" / "reports"
        if not reports_dir.is_dir():
            break
        reports = {}
        for path in sorted(reports_dir.glob("*.json")):
            payload = json.loads(path.read_text())
            if path.stem == "aggregate":
                final_aggregate = payload
            else:
                reports[payload["domain"]] = payload
        step_reports.append(reports)
    if not step_reports:
        raise MissingReports(f"no per-step reports under {run_dir}")

    seen_names = [name for name in domains if any(name in r for r in step_reports)]
    matrix = forgetting_matrix(step_reports, seen_names)

    print(f"final step summary (step {len(step_reports)})")
    print(f"{'domain':<16} {'protocol':<9} {'mAP':>7} {'R-1':>7}")
    for name, report in sorted(step_reports[-1].items()):
        print(f"{name:<16} {report['protocol']:<9} {report['mAP']:>7.4f} "
              f"{report['rank1']:>7.4f}")
    for key, value in sorted(final_aggregate.items()):
        if isinstance(value, dict) and "mAP" in value:
            print(f"{key}: mAP {value['mAP']:.4f}, R-1 {value['rank1']:.4f}")
    print("forgetting (mAP): " + ", ".join(
        f"{name}={value:.4f}" if value is not None else f"{name}=n/a"
        for name, value in zip(matrix["domains"], matrix["mAP"]["forgetting"])
    ))

    payload = {"summary": step_reports[-1], "aggregates": final_aggregate,
               "forgetting": matrix}
    out_path = Path(args.out) if args.out else run_dir / "report.json"
    out_path.write_text(json.dumps(payload, indent=2) + "\n")
    print(f"report written to {out_path}")
    return 0


def cmd_export_embeddings(args) -> int:
    state, config = _state_from_checkpoint(
        Path(args.checkpoint), Path(args.config) if args.config else None
    )
    root = Path(config.data.root)
    names = args.domains.split(",") if args.domains else config.data.domains
    datasets = [load_domain(root / name) for name in names]
    out = export_embeddings(state.image_encoder, datasets, Path(args.out))
    print(f"embeddings written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="teata",
        description="Lifelong person re-identification across hybrid clothing states",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate the configured synthetic domains")
    gen.add_argument("--config", required=True)
    gen.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    gen.set_defaults(func=cmd_gen_data)

    train = sub.add_parser("train", help="run the lifelong training plan")
    train.add_argument("--config", required=True)
    train.add_argument("--run-dir", default=None)
    train.add_argument("--resume", action="store_true")
    train.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint over domains")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--config", default=None)
    ev.add_argument("--domains", default=None, help="comma-separated seen domain names")
    ev.add_argument("--unseen", default=None, help="comma-separated unseen domain names")
    ev.add_argument("--protocol", choices=("auto", "STANDARD", "CC"), default="auto")
    ev.add_argument("--out", default=None)
    ev.set_defaults(func=cmd_eval)

    rep = sub.add_parser("report", help="summarize a run directory")
    rep.add_argument("--run-dir", required=True)
    rep.add_argument("--out", default=None)
    rep.set_defaults(func=cmd_report)

    exp = sub.add_parser("export-embeddings", help="dump per-sample embeddings as JSONL")
    exp.add_argument("--checkpoint", required=True)
    exp.add_argument("--config", default=None)
    exp.add_argument("--domains", default=None)
    exp.add_argument("--out", required=True)
    exp.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (MissingFile, SchemaError, ProtocolError, InvalidArgument, DataLeakError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except TeataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
