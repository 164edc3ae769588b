"""Command-line entry point: ``mdd <command> [options]``.

Exit codes: 0 success, 1 a check gate failed, 2 bad configuration,
3 IO or file-format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import experiments as X
from .buffer import load_trajectory
from .config import ConfigError, RunConfig
from .data import load_embeddings, save_embeddings
from .distill import load_synthetic, log_to_csv, save_synthetic
from .errors import ContractError, DegenerateBufferError, DimensionError, FormatError, NumericError
from .metrics import reports_to_csv

log = logging.getLogger("mddistill")

EXIT_GATE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _setup_logging():
    level = os.environ.get("MDD_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise CliError(f"MDD_LOG must be one of {sorted(levels)}, got {level!r}", EXIT_CONFIG)
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _resolve(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.set("seed", args.seed)
    if args.precision is not None:
        cfg.set("precision", args.precision)
    if getattr(args, "no_blend", False):
        cfg.set("blend.enabled", False)
    if getattr(args, "asymmetric", False):
        cfg.set("model.mode", "asymmetric")
    if getattr(args, "iterations", None) is not None:
        cfg.set("distill.iterations", args.iterations)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str):
    path.write_text(text)
    log.info("wrote %s", path)


def _echo(cfg: RunConfig, out: Path):
    _write(out / "config.json", cfg.to_json())


def _load_traj_heads(args, cfg):
    if args.traj is None:
        return None
    traj = load_trajectory(args.traj)
    epoch = traj.epochs if args.epoch is None else args.epoch
    if not 0 <= epoch <= traj.epochs:
        raise CliError(f"--epoch {epoch} outside [0, {traj.epochs}] for {args.traj}", EXIT_CONFIG)
    return X.arch_for_trajectory(cfg, traj), traj.img(epoch), traj.txt(epoch)


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args):
    cfg = _resolve(args)
    out = _out_dir(args)
    train, test = X.load_data(cfg)
    save_embeddings(train, out / "train.mdde")
    save_embeddings(test, out / "test.mdde")
    _echo(cfg, out)
    print(json.dumps({"train": str(out / "train.mdde"), "test": str(out / "test.mdde"), "n_train": len(train), "n_test": len(test)}, sort_keys=True))


def cmd_buffer(args):
    cfg = _resolve(args)
    out = _out_dir(args)
    manifest = X.build_buffer(cfg, out, jobs=args.jobs)
    _echo(cfg, out)
    print(json.dumps(manifest, indent=2, sort_keys=True))


def cmd_distill(args):
    cfg = _resolve(args)
    out = _out_dir(args)
    _echo(cfg, out)
    train, test = X.load_data(cfg)
    buffer_dir = Path(args.buffer) if args.buffer else out / "buffer"
    if not args.buffer:
        X.build_buffer(cfg, buffer_dir, jobs=args.jobs)
    buffer = X.load_buffer(cfg, buffer_dir, train)
    syn, rows, summary = X.distill_and_summarize(cfg, train, buffer)
    save_synthetic(syn, out / "synthetic.mdds")
    _write(out / "log.csv", log_to_csv(rows))
    report = X.evaluate(cfg, syn, train, test)
    if rows:
        report.update_norm_img = summary["upd_img"]
        report.update_norm_txt = summary["upd_txt"]
    _write(out / "report.json", report.to_json() + "\n")
    _write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(report.to_json())


def cmd_eval(args):
    cfg = _resolve(args)
    out = _out_dir(args)
    syn = load_synthetic(args.synthetic)
    test = load_embeddings(args.test, "test")
    report = X.evaluate(cfg, syn, None, test)
    _echo(cfg, out)
    _write(out / "eval_report.json", report.to_json() + "\n")
    print(report.to_json())


def cmd_metrics(args):
    cfg = _resolve(args)
    data = load_embeddings(args.embeddings)
    heads = _load_traj_heads(args, cfg)
    result = X.embedding_metrics(data, heads)
    print(json.dumps(result, indent=2, sort_keys=True))


def cmd_gradcheck(args):
    from .checks import GATE, primitive_checks, unroll_check

    results = primitive_checks()
    worst = max(r.error for r in results)
    unroll = unroll_check()
    summary = {
        "primitives": {f"{r.name}/{r.route}": r.error for r in results},
        "max_primitive_error": worst,
        "unroll_error": unroll,
        "gate": GATE,
        "passed": bool(worst < GATE and unroll < GATE),
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    if not summary["passed"]:
        raise CliError(f"gradient check failed: max error {max(worst, unroll):.3e} >= {GATE}", EXIT_GATE)


def cmd_noise_sweep(args):
    cfg = _resolve(args)
    out = _out_dir(args)
    if args.iterations is not None:
        cfg.set("noise.iterations", args.iterations)
    _echo(cfg, out)
    rows = X.noise_sweep(cfg, out, jobs=args.jobs)
    text = reports_to_csv(rows)
    _write(out / "noise_sweep.csv", text)
    sys.stdout.write(text)


def cmd_proposition(args):
    cfg = _resolve(args)
    report = X.proposition_report(cfg.loss_config(), seed=cfg["seed"])
    print(json.dumps(report, indent=2, sort_keys=True))
    if not report["passed"]:
        raise CliError("proposition check failed", EXIT_GATE)


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--precision", choices=["f32", "f64"])
    common.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")

    parser = argparse.ArgumentParser(prog="mdd", description="Multimodal dataset distillation on paired embeddings.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write the toy train/test embedding files")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("buffer", parents=[common], help="train expert trajectories")
    p.add_argument("--asymmetric", action="store_true", help="train the image encoder instead of an image head")
    p.set_defaults(func=cmd_buffer)

    p = sub.add_parser("distill", parents=[common], help="distill a synthetic set and evaluate it")
    p.add_argument("--buffer", help="directory with trajectory files and manifest.json")
    p.add_argument("--iterations", type=int)
    p.add_argument("--no-blend", action="store_true", help="disable representation blending")
    p.add_argument("--asymmetric", action="store_true", help="match image encoder + text head")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", parents=[common], help="evaluate a synthetic set on test embeddings")
    p.add_argument("synthetic")
    p.add_argument("test")
    p.add_argument("--asymmetric", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("metrics", parents=[common], help="Sim, Gap, CR and stripe statistic of an embedding file")
    p.add_argument("embeddings")
    p.add_argument("--traj", help="embed through the heads of this trajectory file")
    p.add_argument("--epoch", type=int, help="checkpoint index within --traj (default: last)")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all gradients")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("noise-sweep", parents=[common], help="Sim and Gap under in-loop text noise")
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_noise_sweep)

    p = sub.add_parser("proposition", parents=[common], help="gradient inner-product check on constructed batches")
    p.set_defaults(func=cmd_proposition)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, DegenerateBufferError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractError, DimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
