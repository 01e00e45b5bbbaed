"""Command line entry points.

Exit codes: 0 success, 2 configuration error, 3 missing external tool,
4 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .degrade import CodecBridge
from .model import MAGIC
from .errors import (CodecUnavailable, ConfigError, EmptyDirectory,
                     EnvIdError, InsufficientClasses, InsufficientSamples,
                     MissingPool, ProtocolMismatch, UnreadableFile)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_TOOL = 3
EXIT_DATA = 4

_CONFIG_ERRORS = (ConfigError, ProtocolMismatch, InsufficientClasses,
                  InsufficientSamples)
_DATA_ERRORS = (MissingPool, UnreadableFile, EmptyDirectory)


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}")


def _load_config(args) -> dict:
    cfg = _load_json(args.config) if args.config else {}
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "jobs", None) is not None:
        cfg["jobs"] = args.jobs
    return cfg


def _bridge(args):
    if getattr(args, "codec_bridge", None):
        return CodecBridge.from_file(args.codec_bridge)
    return None


def cmd_simulate_rooms(args) -> int:
    index = pipeline.simulate_rooms(_load_config(args), args.out)
    print(f"wrote {len(index['items'])} impulse responses to {args.out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    manifest = pipeline.generate_dataset(cfg, args.out)
    print(f"wrote manifest with {len(manifest['records'])} records to {args.out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    index = pipeline.ingest_corpus(args.directory, args.kind, args.out)
    print(f"indexed {len(index['items'])} {args.kind} items to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = _load_json(Path(args.manifest))
    cfg = _load_config(args)
    tc = pipeline.train_config_from_dict(cfg)
    store = pipeline.FeatureStore(manifest, cache_dir=args.feature_cache,
                                  bridge=_bridge(args))
    ckpt, log = pipeline.train(manifest, tc, args.out, store=store)
    print(f"checkpoint {ckpt} after {len(log)} epochs, "
          f"best val {max(e['val_accuracy'] for e in log):.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        with open(args.checkpoint, "rb") as fh:
            head = fh.read(len(MAGIC))
    except OSError as e:
        raise UnreadableFile(f"cannot read checkpoint {args.checkpoint}: {e}")
    if head != MAGIC:
        raise UnreadableFile(f"{args.checkpoint} is not a model checkpoint")
    manifest = _load_json(Path(args.manifest))
    extra = _load_config(args)
    extra.pop("jobs", None)
    seed = extra.pop("seed", 0)
    store = pipeline.FeatureStore(manifest, cache_dir=args.feature_cache,
                                  bridge=_bridge(args))
    summary = pipeline.evaluate(args.checkpoint, manifest, args.protocol,
                                args.out, seed=seed, store=store, **extra)
    print(json.dumps({k: v for k, v in summary.items()
                      if not isinstance(v, (list, dict))}, indent=2))
    return EXIT_OK


def cmd_report(args) -> int:
    merged = pipeline.merge_reports(args.directory)
    out = Path(args.out) if args.out else None
    text = json.dumps(merged, indent=2, sort_keys=True)
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        print(f"wrote merged report to {out}")
    else:
        print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="envid",
                                description="Acoustic environment "
                                "identification pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--codec-bridge", default=None,
                        help="JSON file mapping codec ids to encode/decode "
                        "command templates")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--jobs", type=int, default=None)

    sp = sub.add_parser("simulate-rooms", help="sample rooms, export AIRs")
    common(sp)
    sp.set_defaults(func=cmd_simulate_rooms)

    sp = sub.add_parser("generate", help="build a degraded-speech dataset")
    common(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("ingest", help="index a WAV corpus as a pool")
    sp.add_argument("directory")
    sp.add_argument("--kind", choices=("speech", "air", "noise"),
                    required=True)
    common(sp)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("train", help="train a model on a manifest")
    sp.add_argument("manifest", help="path to manifest.json")
    sp.add_argument("--feature-cache", default=None)
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="run an evaluation protocol")
    sp.add_argument("checkpoint")
    sp.add_argument("manifest")
    sp.add_argument("--protocol", choices=pipeline.PROTOCOLS, required=True)
    sp.add_argument("--feature-cache", default=None)
    common(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="merge evaluation summaries")
    sp.add_argument("directory")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--config", default=None)
    sp.add_argument("--codec-bridge", default=None)
    sp.add_argument("--out", default=None)
    sp.add_argument("--jobs", type=int, default=None)
    sp.set_defaults(func=cmd_report)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CodecUnavailable as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING_TOOL
    except _CONFIG_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except _DATA_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except EnvIdError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
