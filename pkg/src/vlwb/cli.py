"""Command-line entry point: ``vlwb <subcommand> [flags]``.

Configuration precedence: built-in defaults < ``--config`` TOML file < flags.
Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 I/O error (missing, colliding or malformed artifacts).  Errors are reported
as one JSON line on stderr.
"""

import argparse
import json
import logging
import sys

from . import pipeline
from .pipeline import ConfigError

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(kind, message, code):
    sys.stderr.write(json.dumps({"error": kind, "message": str(message)}) + "\n")
    return code


def _common(p):
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--out", dest="out_dir", help="run directory")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--parallelism", type=int, help="worker threads for per-sample work")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="vlwb", description="Adversarial robustness workbench for a toy image/text encoder.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render the synthetic dataset")
    _common(p)
    p.add_argument("--classes", type=int, help="use the first N built-in shape classes")
    p.add_argument("--per-class", type=int)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--ppm", action="store_true", help="also write 8-bit PPM previews")

    p = sub.add_parser("train", help="contrastively train the encoders")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("attack", help="attack every val image")
    _common(p)
    p.add_argument("--method", choices=pipeline.METHODS)
    p.add_argument("--setting", choices=pipeline.SETTINGS)
    p.add_argument("--task", choices=pipeline.TASKS)
    p.add_argument("--steps", type=int)
    p.add_argument("--step-size", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--c", type=float)
    p.add_argument("--kappa", type=float)

    p = sub.add_parser("eval", help="pre/post metrics over all configured attacks")
    _common(p)
    p.add_argument("--no-context", dest="with_context", action="store_false", default=None)
    p.add_argument("--k", type=int)

    p = sub.add_parser("qd-classify", help="query-decomposition classification")
    _common(p)
    p.add_argument("--k", type=int)

    p = sub.add_parser("report", help="write report.csv, report.md and breakdown.svg")
    _common(p)

    p = sub.add_parser("verify", help="run the invariant suite")
    _common(p)
    p.add_argument("--graphs", type=int, default=10, help="random encoder graphs to gradient-check")

    p = sub.add_parser("pipeline", help="gen-data, train, all attacks, eval and report")
    _common(p)
    return parser


_FLAG_KEYS = {
    "per_class": ("data", "per_class"),
    "noise_std": ("data", "noise_std"),
    "epochs": ("train", "epochs"),
    "batch": ("train", "batch"),
    "lr": ("train", "lr"),
    "method": ("attack", "method"),
    "setting": ("attack", "setting"),
    "task": ("attack", "task"),
    "steps": ("attack", "steps"),
    "step_size": ("attack", "step_size"),
    "epsilon": ("attack", "epsilon"),
    "c": ("attack", "c"),
    "kappa": ("attack", "kappa"),
    "with_context": ("eval", "with_context"),
    "k": ("eval", "k"),
}


def overrides_from_args(args):
    out = {}
    for key in ("out_dir", "seed", "parallelism"):
        if getattr(args, key, None) is not None:
            out[key] = getattr(args, key)
    for flag, (section, key) in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            out.setdefault(section, {})[key] = value
    n = getattr(args, "classes", None)
    if n is not None:
        from .datagen import DEFAULT_CLASSES

        if not 1 <= n <= len(DEFAULT_CLASSES):
            raise ConfigError(f"--classes must be between 1 and {len(DEFAULT_CLASSES)}")
        out.setdefault("data", {})["classes"] = list(DEFAULT_CLASSES[:n])
    return out


def _run(args, cfg):
    cmd = args.command
    if cmd == "gen-data":
        ds = pipeline.gen_data(cfg, overwrite=args.overwrite, ppm=args.ppm)
        return {"samples": len(ds.samples), "train": len(ds.train), "val": len(ds.val),
                "dir": str(pipeline.data_dir(cfg))}
    if cmd == "train":
        _, curve = pipeline.train(cfg)
        return {"epochs": len(curve), "val_accuracy": curve[-1]["val_accuracy"] if curve else None,
                "checkpoint": str(pipeline.model_path(cfg))}
    if cmd == "attack":
        _, s = pipeline.attack(cfg)
        a = cfg["attack"]
        return {"dir": str(pipeline.attack_dir(cfg, a["task"], a["method"], a["setting"])),
                "pre_accuracy": s.pre_accuracy, "post_accuracy": s.post_accuracy, "failed": s.n_failed}
    if cmd == "eval":
        rep = pipeline.evaluate(cfg)
        return {"rows": len(rep.rows), "file": str(pipeline.run_dir(cfg) / "eval" / "eval.json")}
    if cmd == "qd-classify":
        return pipeline.qd_classify(cfg)
    if cmd == "report":
        pipeline.report(cfg)
        return {"dir": str(pipeline.run_dir(cfg) / "report")}
    if cmd == "pipeline":
        rep = pipeline.run_all(cfg)
        return {"rows": len(rep.rows), "dir": str(pipeline.run_dir(cfg))}
    if cmd == "verify":
        from .verify import run_checks

        failures = run_checks(cfg, graphs=args.graphs)
        for f in failures:
            sys.stderr.write(json.dumps({"error": "verify", "message": f}) + "\n")
        return None if failures else {"verify": "ok"}
    raise UsageError(f"unknown command {cmd!r}")


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        file_values = pipeline.load_config_file(args.config) if args.config else {}
        cfg = pipeline.resolve_config(file_values, overrides_from_args(args))
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_USAGE)
    except OSError as exc:
        return _fail("io", exc, EXIT_IO)
    try:
        result = _run(args, cfg)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_USAGE)
    except OSError as exc:
        return _fail("io", exc, EXIT_IO)
    except ValueError as exc:
        # malformed input artifacts (bad magic, truncated payloads, missing records)
        return _fail("artifact", exc, EXIT_IO)
    if result is None:
        return EXIT_VERIFY
    print(json.dumps(result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
