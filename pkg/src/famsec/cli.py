"""``famsec`` command line: train, eval, infer, ablate, curve, synth, visualize.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Failures print a one-line JSON error record on stderr.  The effective
configuration of every command is echoed on stderr (stdout carries results).
"""

from __future__ import annotations

import argparse
import json
import os
import sys


from . import __version__
from .config import RunConfig, load_config, runs_root
from .errors import ConfigurationError, ContractViolation, FamsecError, IngestionError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _csv_list(value, cast=str):
    return [cast(v) for v in value.split(",") if v.strip()]


def _add_run_options(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--data", help="dataset root (overrides data.root)")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--rank", type=int)
    p.add_argument("--blocks", type=int, help="number of adapted blocks, counted from the last")
    p.add_argument("--dropout", type=float)
    p.add_argument("--train-samples", type=int)
    p.add_argument("--k-refs", type=int, help="reference images per class")
    p.add_argument("--aggregation", choices=("single", "mean_centroid"))
    p.add_argument("--no-fam", action="store_true", help="fully fine-tune instead of adapters")
    p.add_argument("--out", help="output directory (default: $FAMSEC_RUNS_DIR/<command>-<digest>)")


def effective_config(args) -> RunConfig:
    """File values overridden by flags; the result is what gets snapshotted."""
    cfg = load_config(args.config) if args.config else RunConfig()
    d = cfg.to_dict()
    if getattr(args, "no_fam", False):
        d["fam"] = None
    overrides = {
        ("data", "root"): args.data,
        ("train", "steps"): args.steps,
        ("train", "batch_size"): args.batch_size,
        ("train", "lr"): args.lr,
        ("train", "seed"): args.seed,
        ("fam", "rank"): args.rank,
        ("fam", "adapted_block_count"): args.blocks,
        ("fam", "dropout_p"): args.dropout,
        ("data", "train_samples"): args.train_samples,
        ("bank", "k_per_class"): args.k_refs,
        ("bank", "aggregation"): args.aggregation,
    }
    for (section, key), value in overrides.items():
        if value is None:
            continue
        if d.get(section) is None:
            raise ConfigurationError(f"{section}.{key} cannot be set when {section} is disabled", field=f"{section}.{key}")
        d[section][key] = value
    return RunConfig.from_dict(d)


def _out_dir(args, cfg, command):
    return args.out or os.path.join(runs_root(), f"{command}-{cfg.digest()}")


def _echo_config(cfg, extra=None):
    payload = {"effective_config": cfg.to_dict() if cfg is not None else None, **(extra or {})}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def _emit(args, text, payload):
    print(json.dumps(payload, sort_keys=True) if args.json else text)


def cmd_train(args):
    from .harness import run_experiment

    cfg = effective_config(args)
    out = _out_dir(args, cfg, "train")
    _echo_config(cfg, {"out": out})
    res = run_experiment(cfg, out)
    _emit(args, f"trained {cfg.train.steps} steps -> {out} (overall accuracy {res.report.overall:.4f})",
          {"out": out, "report": res.report.to_dict(), "final_tau": res.state.tau})


def cmd_eval(args):
    from .harness import evaluate, load_run_data, restore_run

    cfg, extractor, bank, head = restore_run(args.run, args.ckpt)
    if args.data:
        cfg = cfg.replace(**{"data.root": args.data})
    _echo_config(cfg, {"run": args.run})
    _, test_set = load_run_data(cfg)
    report = evaluate(extractor, bank, test_set, cfg.data.groups, head=head, config=cfg.to_dict())
    out = args.out or args.run
    os.makedirs(out, exist_ok=True)
    report.to_csv(os.path.join(out, "report.csv"))
    report.to_json(os.path.join(out, "report.json"))
    lines = [f"{s}: {r.accuracy:.4f} ({r.correct}/{r.total})" for s, r in sorted(report.per_source.items())]
    lines.append(f"overall: {report.overall:.4f}")
    _emit(args, "\n".join(lines), report.to_dict())


def cmd_infer(args):
    from .data import center_crop, read_image
    from .harness import restore_run
    from .inference import classify, format_verdict, load_bank

    run_dir = args.run or os.path.dirname(os.path.dirname(os.path.abspath(args.ckpt)))
    cfg, extractor, bank, _ = restore_run(run_dir, args.ckpt)
    if args.bank:
        bank = load_bank(args.bank)
    if bank is None:
        raise ConfigurationError("no reference bank: pass --bank", field="bank")
    _echo_config(cfg, {"image": args.image, "bank": args.bank})
    image = center_crop(read_image(args.image), cfg.encoder.image_size)
    v = classify(image, bank, extractor)
    _emit(args, format_verdict(v), {"label": v.label, "d_f": v.d_f, "d_r": v.d_r, "margin": v.margin})


def _values(axis, raw):
    if axis == "components":
        return _csv_list(raw)
    try:
        return _csv_list(raw, int)
    except ValueError as exc:
        raise ConfigurationError(f"--values for axis {axis} must be integers", field="values") from exc


def cmd_ablate(args):
    from .harness import run_sweep

    cfg = effective_config(args)
    out = _out_dir(args, cfg, f"ablate-{args.axis}")
    values = _values(args.axis, args.values)
    _echo_config(cfg, {"axis": args.axis, "values": values, "out": out})
    sweep = run_sweep(args.axis, values, cfg, out)
    rows = [{"value": c.value, "status": c.status, "avg": c.report.overall if c.report else None, "error": c.error}
            for c in sweep.cells]
    text = "\n".join(f"{args.axis}={r['value']}: {r['status']}" + (f" avg={r['avg']:.4f}" if r["avg"] is not None else "")
                     for r in rows)
    _emit(args, text + f"\n-> {os.path.join(out, 'sweep.csv')}", {"out": out, "cells": rows})


def cmd_curve(args):
    from .harness import sample_size_curve

    cfg = effective_config(args)
    out = _out_dir(args, cfg, "curve")
    sizes = _csv_list(args.sizes, int)
    _echo_config(cfg, {"sizes": sizes, "out": out})
    rows = sample_size_curve(sizes, cfg, out)
    _emit(args, "\n".join(f"size={r['size']}: avg={r['avg']}" for r in rows), {"out": out, "rows": rows})


def cmd_synth(args):
    from .data import SyntheticSpec, load_manifest, make_synthetic

    families = _csv_list(args.families)
    if not families:
        raise ConfigurationError("--families is empty", field="families")
    out = args.out or os.path.join(runs_root(), f"synth-{'-'.join(families)}-{args.seed}")
    specs = [SyntheticSpec(families[0], "train", args.count, args.image_size, seed=args.seed)]
    specs += [SyntheticSpec(f, "test", args.test_count or args.count, args.image_size, seed=args.seed) for f in families]
    _echo_config(None, {"synthetic": [s.__dict__ for s in specs], "out": out})
    for spec in specs:
        make_synthetic(out, spec)
    manifest = load_manifest(out)
    manifest.save()
    counts = manifest.to_dict()["counts"]
    _emit(args, f"wrote {len(manifest.entries)} images to {out}", {"out": out, "counts": counts})


def cmd_visualize(args):
    from .data import load_images, load_manifest
    from .harness import build_pair, restore_run, tsne_groups, tsne_plot
    from .vit import embed

    cfg, extractor, _, _ = restore_run(args.run, args.ckpt)
    if args.data:
        cfg = cfg.replace(**{"data.root": args.data})
    _echo_config(cfg, {"run": args.run})
    manifest = load_manifest(cfg.data.root)
    size = cfg.encoder.image_size
    train_sources = cfg.data.train_sources or manifest.sources("train")
    seen = load_images(manifest, "test", [s for s in manifest.sources("test") if s in train_sources], size)
    unseen_sources = [s for s in manifest.sources("test") if s not in train_sources]
    unseen = load_images(manifest, "test", unseen_sources, size) if unseen_sources else None
    images, groups = tsne_groups(seen, unseen, args.per_group, args.seed)
    out = args.out or os.path.join(args.run, "tsne")
    trained = tsne_plot(embed(extractor, images), groups, args.perplexity, args.seed, out)
    untrained = tsne_plot(embed(build_pair(cfg).guide, images), groups, args.perplexity, args.seed,
                          os.path.join(out, "untrained"))
    payload = {"out": out, "silhouette_trained": trained.silhouette, "silhouette_untrained": untrained.silhouette}
    _emit(args, f"silhouette trained={trained.silhouette:.4f} untrained={untrained.silhouette:.4f} -> {out}", payload)


def build_parser():
    parser = _Parser(prog="famsec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train adapters and evaluate")
    _add_run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run on its test split")
    p.add_argument("--run", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="classify one image")
    p.add_argument("--image", required=True)
    p.add_argument("--bank")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--run", help="run directory holding config.json (default: inferred from --ckpt)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="sweep one axis")
    _add_run_options(p)
    p.add_argument("--axis", required=True, choices=("rank", "adapted_blocks", "train_samples", "components"))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("curve", help="accuracy against training-set size")
    _add_run_options(p)
    p.add_argument("--sizes", required=True, help="comma-separated sizes")
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("synth", help="write a synthetic real/fake corpus")
    p.add_argument("--families", required=True, help="first family is the training family")
    p.add_argument("--count", type=int, default=200, help="images per class per split")
    p.add_argument("--test-count", type=int)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("visualize", help="t-SNE of trained vs untrained embeddings")
    p.add_argument("--run", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--per-group", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_visualize)
    return parser


def _fail(code, exc, field=None):
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if field:
        record["field"] = field
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail(EXIT_USAGE, exc)
    try:
        args.func(args)
    except (ConfigurationError, ContractViolation, IngestionError) as exc:
        return _fail(EXIT_USAGE, exc, getattr(exc, "field", None))
    except (FamsecError, OSError, RuntimeError) as exc:
        return _fail(EXIT_RUNTIME, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
