"""Command-line entry point.

One executable with batch subcommands:

    latentcir synth-data  --n 32 --out data/synth --seed 7
    latentcir train       --config run.cfg --data data/synth/manifest.jsonl --out runs/a
    latentcir evaluate    --checkpoint runs/a/checkpoint.npz --queries q.jsonl \
                          --gallery data/synth/manifest.jsonl --k 1,5,10 --out eval/a
    latentcir verify      --suite all

Exit codes: 0 success, 1 validation error (bad arguments, bad config,
failed verification), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

__all__ = ["main"]

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; this tool reserves 2 for
    # runtime failures and reports validation problems with 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit_(f"{self.prog}: error: {message}")


class SystemExit_(Exception):
    pass


def _version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except OSError:
        pass
    try:
        from importlib.metadata import version

        return "v" + version("latentcir")
    except Exception:
        return "unversioned"


def _write_run_manifest(out_dir: Path, command: str, seed, config_path, started: str,
                        args=None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    arguments = {}
    if args is not None:
        arguments = {
            k: v for k, v in vars(args).items()
            if k != "command" and isinstance(v, (str, int, float, bool, list))
        }
    manifest = {
        "command": command,
        "config": str(config_path) if config_path else None,
        "seed": seed,
        "arguments": arguments,
        "version": _version_string(),
        "started_at": started,
        "finished_at": datetime.now(timezone.utc).isoformat(),
        "output_dir": str(out_dir),
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def build_parser() -> _Parser:
    parser = _Parser(prog="latentcir", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic image-caption corpus")
    p.add_argument("--n", type=int, required=True, help="number of pairs")
    p.add_argument("--out", default="data/synth", help="output directory")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train the mapper on a dataset manifest")
    p.add_argument("--config", required=True, help="flat key=value config file")
    p.add_argument("--data", required=True, help="dataset manifest (JSON-lines)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override a config field (repeatable; overrides win over the file)",
    )
    p.add_argument("--workers", type=int, default=1,
                   help="parallel workers for image loading")

    p = sub.add_parser("evaluate", help="run composed retrieval over a query set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--queries", required=True, help="query records (JSON-lines)")
    p.add_argument("--gallery", required=True,
                   help="gallery: dataset manifest (.jsonl) or cached features (.npz)")
    p.add_argument("--k", default="1,5,10", help="comma-separated cutoffs")
    p.add_argument("--out", default="eval", help="report output directory")
    p.add_argument("--mode", choices=("composed", "image"), default="composed")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel workers for gallery embedding")

    p = sub.add_parser("verify", help="run the self-verification suites")
    p.add_argument("--suite", choices=("grad", "oracle", "invariants", "all"), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=1000, help="invariant sweep size")
    p.add_argument("--instances", type=int, default=100, help="oracle instance count")
    return parser


def cmd_synth_data(args) -> int:
    from .views import synth_dataset, write_dataset

    started = _now()
    if args.n < 1:
        raise SystemExit_("--n must be at least 1")
    pairs = synth_dataset(args.n, np.random.default_rng(args.seed))
    out = Path(args.out)
    manifest = write_dataset(pairs, out)
    _write_run_manifest(out, "synth-data", args.seed, None, started, args=args)
    print(f"wrote {len(pairs)} pairs to {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import parse_config_file, apply_overrides
    from .training import run_training

    started = _now()
    cfg = parse_config_file(args.config)
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise SystemExit_(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    out = Path(args.out)
    checkpoint, metrics = run_training(cfg, args.data, out, resume=args.resume,
                                       workers=args.workers)
    last = json.loads(metrics.read_text().splitlines()[-1])
    _write_run_manifest(out, "train", cfg.seed, args.config, started, args=args)
    print(f"checkpoint: {checkpoint}")
    print(
        "final losses: "
        f"L={last['L']:.6f} L_pred={last['L_pred']:.6f} L_align={last['L_align']:.6f} "
        f"gate={last['gate_value']:+.4f}"
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .retrieval import embed_gallery, evaluate_queries, load_gallery, load_queries
    from .training import load_mapper

    started = _now()
    try:
        ks = sorted({int(k) for k in args.k.split(",") if k.strip()})
    except ValueError as exc:
        raise SystemExit_(f"--k expects comma-separated integers: {exc}") from exc
    if not ks or ks[0] < 1:
        raise SystemExit_("--k cutoffs must be positive")

    model, vision, text = load_mapper(args.checkpoint)
    gallery_path = Path(args.gallery)
    if gallery_path.suffix == ".npz":
        gallery = load_gallery(gallery_path)
    else:
        gallery = embed_gallery(gallery_path, vision, model.cfg.encoder_resolution,
                                workers=args.workers)
    if gallery.features.shape[1] != model.cfg.encoder_d:
        raise SystemExit_(
            f"dimension mismatch: checkpoint expects width {model.cfg.encoder_d}, "
            f"gallery has width {gallery.features.shape[1]}"
        )
    queries = load_queries(args.queries)
    report = evaluate_queries(queries, model, vision, text, gallery, ks, mode=args.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.txt").write_text(report.to_text() + "\n")
    _write_run_manifest(out, "evaluate", model.cfg.seed, args.checkpoint, started, args=args)
    print(report.to_text())
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suites

    names = ("grad", "oracle", "invariants") if args.suite == "all" else (args.suite,)
    reports = run_suites(names, seed=args.seed, samples=args.samples, instances=args.instances)
    for report in reports:
        print(report.render())
    return EXIT_OK if all(r.passed for r in reports) else EXIT_VALIDATION


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "synth-data": cmd_synth_data,
            "train": cmd_train,
            "evaluate": cmd_evaluate,
            "verify": cmd_verify,
        }[args.command]
        return handler(args)
    except SystemExit_ as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, KeyError) as exc:
        # bad configs, malformed manifests, mismatched shapes
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
