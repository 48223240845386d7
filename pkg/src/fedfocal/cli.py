"""Batch command-line entry point.

Subcommands: synth, partition, train, evaluate, analyze, sweep.
Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path


from . import experiment as X
from .config import ExperimentConfig
from .data import BlobSpec, TileSpec, save_dataset, synthesize_longtail, load_dataset
from .errors import ConfigError, FedFocalError
from .federation import eval_scores
from .metrics import evaluate_scores
from .models import load_params
from .partition import PartitionSpec, build_partition, write_manifest

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _ints(raw: str) -> list[int]:
    return [int(p) for p in raw.split(",") if p.strip()]


def _floats(raw: str) -> list[float]:
    return [float(p) for p in raw.split(",") if p.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedfocal",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--counts", type=_ints, default=[1000, 400, 200, 60, 20])
    p.add_argument("--kind", choices=["blobs", "tiles"], default="blobs")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--radius", type=float, default=2.5)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--names", default=None,
                   help="comma-separated class names (default class-i)")

    p = sub.add_parser("partition", help="split a dataset and write the manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["fixed", "dirichlet"], default="fixed")
    p.add_argument("--ratios", type=_floats, default=[0.5, 0.3, 0.2])
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--clients", type=int, default=3)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--test-ratio-index", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)

    for name, help_text in (("train", "run one configured experiment"),
                            ("sweep", "run a preset family of experiments")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="config file to start from")
        p.add_argument("--preset", default=None, choices=X.PRESETS,
                       help="named starting configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override any config key")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--rounds", type=int, default=None)
        if name == "train":
            p.add_argument("--dry-run", action="store_true",
                           help="validate config and partition, skip training")

    p = sub.add_parser("evaluate", help="score a finished run's checkpoint")
    p.add_argument("--run", required=True)

    p = sub.add_parser("analyze", help="derive reports from a finished run")
    p.add_argument("--run", required=True)
    p.add_argument("--out", default=None)

    return parser


def _resolve_config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError("pass either --config or --preset, not both")
    if args.config:
        cfg = ExperimentConfig.from_file(args.config)
    elif args.preset:
        cfg = X.preset_config(args.preset, seed=args.seed or 0)
    else:
        raise ConfigError("pass --config FILE or --preset NAME")
    overrides: dict[str, object] = {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides.setdefault("federation.seed", str(args.seed))
        overrides.setdefault("partition.seed", str(args.seed))
        overrides.setdefault("dataset.synth.seed", str(args.seed))
    if args.rounds is not None:
        overrides["federation.rounds"] = str(args.rounds)
    return cfg.with_overrides(overrides) if overrides else cfg


def cmd_synth(args) -> int:
    if args.kind == "blobs":
        spec = BlobSpec(dim=args.dim, radius=args.radius, sigma=args.sigma)
    else:
        spec = TileSpec(image_size=args.image_size, channels=args.channels,
                        noise=args.noise)
    names = args.names.split(",") if args.names else None
    bundle = synthesize_longtail(args.counts, spec, seed=args.seed,
                                 class_names=names)
    save_dataset(args.out, bundle)
    print(f"wrote {bundle.num_samples} samples, {bundle.num_classes} classes "
          f"to {args.out}")
    return EXIT_OK


def cmd_partition(args) -> int:
    bundle = load_dataset(args.data)
    if args.mode == "fixed":
        spec = PartitionSpec(mode="fixed", ratios=tuple(args.ratios),
                             num_clients=args.clients,
                             test_fraction=args.test_fraction,
                             test_ratio_index=args.test_ratio_index,
                             seed=args.seed)
    else:
        spec = PartitionSpec(mode="dirichlet", beta=args.beta,
                             num_clients=args.clients,
                             test_fraction=args.test_fraction, seed=args.seed)
    result = build_partition(bundle.labels, spec, bundle.num_classes)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(out, result)
    sizes = ", ".join(f"client-{j}: {len(s)}"
                      for j, s in enumerate(result.client_indices))
    print(f"{sizes}, test: {len(result.test_indices)} -> {out}")
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    if args.dry_run:
        out.mkdir(parents=True, exist_ok=True)
        bundle = X.assemble_dataset(cfg)
        X.build_model(cfg, bundle)
        if cfg["run.mode"] == "federated":
            part = build_partition(bundle.labels, cfg.partition_spec(),
                                   bundle.num_classes)
            write_manifest(out / "partition.manifest", part)
        (out / "config.echo").write_text(cfg.to_text(), encoding="ascii")
        print(f"dry run ok: {bundle.num_samples} samples, config echoed to {out}")
        return EXIT_OK
    run = X.run_experiment(cfg, out)
    final = run.records[-1].metrics
    print(f"finished {len(run.records)} rounds; "
          f"accuracy {final.accuracy:.4f}, macro F1 {final.macro_f1:.4f} -> {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    preset = args.preset
    if preset is None or preset not in ("ablation-loss", "ablation-distribution",
                                        "sweep-lr", "sweep-batch"):
        raise ConfigError("sweep needs --preset ablation-loss | "
                          "ablation-distribution | sweep-lr | sweep-batch")
    results = X.run_sweep(cfg, preset, args.out)
    for label, run in results:
        m = run.records[-1].metrics
        print(f"{label}: accuracy {m.accuracy:.4f}, macro F1 {m.macro_f1:.4f}")
    print(f"comparison table -> {Path(args.out) / 'comparison.csv'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run)
    cfg = ExperimentConfig.from_file(run_dir / "config.echo")
    bundle = X.assemble_dataset(cfg)
    model = X.build_model(cfg, bundle)
    features = X.model_features(cfg, bundle)
    params = load_params(run_dir / "final.ckpt")
    if cfg["run.mode"] == "centralized":
        spec = PartitionSpec(mode="fixed", ratios=(1.0,), num_clients=1,
                             test_fraction=cfg["partition.test_fraction"],
                             seed=cfg["federation.seed"])
    else:
        spec = cfg.partition_spec()
    part = build_partition(bundle.labels, spec, bundle.num_classes)
    test_idx = list(part.test_indices)
    scores = eval_scores(model, params, features[test_idx])
    report = evaluate_scores(scores, bundle.labels[test_idx], bundle.num_classes)
    for name in ("accuracy", "macro_precision", "macro_recall", "macro_f1",
                 "macro_specificity", "macro_auc"):
        print(f"{name} = {getattr(report, name)!r}")
    for flag in report.flags:
        print(f"flag: {flag}", file=sys.stderr)
    return EXIT_OK


def cmd_analyze(args) -> int:
    result = X.analyze(args.run, out_dir=args.out)
    where = args.out or args.run
    print(f"wrote dca.csv, roc.csv, gradnorms.csv to {where}")
    for note in result["notes"]:
        print(f"note: {note}", file=sys.stderr)
    return EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "partition": cmd_partition,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FedFocalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
