"""Command line: gen-synth, train, eval, check-grad, export-embeddings.

Exit codes: 0 success, 1 usage/validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import datahub, trainer
from .datahub import ParseError, SynthConfig, ValidationError
from .evaluation import evaluate, export_embeddings
from .gradsuite import run_suite
from .model import ConfigError, ModelConfig, init_model, load_checkpoint


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _dataset_flags(p):
    p.add_argument("--features", required=True, help="features .jsonl")
    p.add_argument("--knowledge", required=True, help="knowledge .jsonl")
    p.add_argument("--split", required=True, help="split .json")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kda", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="write a synthetic dataset")
    p.add_argument("--config", help="key = value file with SynthConfig fields")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train a model")
    _dataset_flags(p)
    p.add_argument("--config", help="key = value run configuration")
    p.add_argument("--checkpoint", required=True, help="where to write the best checkpoint")
    p.add_argument("--out", help="directory for train.log and metrics.csv")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _dataset_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("gzsl", "zsl", "both"), default="both")

    p = sub.add_parser("check-grad", help="finite-difference gradient suite on tiny models")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--seeds", type=int, default=20, help="number of seeds")

    p = sub.add_parser("export-embeddings", help="dump common-space embeddings")
    _dataset_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    return parser


def _synth_config(path, seed):
    values = trainer.parse_kv(Path(path).read_text(encoding="utf-8"), str(path)) if path else {}
    known = {f.name: f for f in fields(SynthConfig)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for k, v in values.items():
        typ = type(known[k].default)
        try:
            kwargs[k] = typ(v)
        except ValueError:
            raise ConfigError(f"{path}: {k} = {v!r} is not a valid {typ.__name__}") from None
    if seed is not None:
        kwargs["seed"] = seed
    return SynthConfig(**kwargs)


def format_metrics(result, mode: str) -> str:
    if mode == "gzsl":
        return f"S={100 * result.S:.2f} U={100 * result.U:.2f} HM={100 * result.HM:.2f}"
    if mode == "zsl":
        return f"ZSL={100 * result.ZSL:.2f}"
    return result.line()


def cmd_gen_synth(args) -> int:
    cfg = _synth_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = datahub.generate_synthetic(cfg)
    datahub.save_dataset(ds, out / "features.jsonl", out / "knowledge.jsonl", out / "split.json")
    print(f"wrote {len(ds.records)} samples, {len(ds.knowledge)} classes to {out}")
    return 0


def cmd_train(args) -> int:
    ds = datahub.load_dataset(args.features, args.knowledge, args.split)
    if args.config:
        tc, model_over = trainer.load_run_config(args.config)
    else:
        tc, model_over = trainer.TrainConfig(), {}
    if args.seed is not None:
        tc = trainer.TrainConfig(**{**tc.__dict__, "seed": args.seed})
    mc = ModelConfig(audio_dim=ds.audio_dim, visual_dim=ds.visual_dim, text_dim=ds.text_dim, **model_over)
    handler = None
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(out / "train.log", mode="w")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        logging.getLogger("kda").addHandler(handler)
        logging.getLogger("kda").setLevel(logging.INFO)
    try:
        model = init_model(mc, tc.seed)
        report = trainer.fit(model, ds, tc, checkpoint_path=args.checkpoint)
    finally:
        if handler is not None:
            logging.getLogger("kda").removeHandler(handler)
            handler.close()
    if args.out:
        report.write_metrics(Path(args.out) / "metrics.csv")
    best = report.epochs[report.best_epoch - 1]
    print(f"epochs={len(report.epochs)} best_epoch={report.best_epoch} seconds={report.seconds:.1f}")
    print(best.result.line())
    return 0


def cmd_eval(args) -> int:
    ds = datahub.load_dataset(args.features, args.knowledge, args.split)
    model = load_checkpoint(args.checkpoint)
    print(format_metrics(evaluate(model, ds, args.mode), args.mode))
    return 0


def cmd_check_grad(args) -> int:
    results = run_suite(range(args.seed, args.seed + args.seeds))
    by_op = {}
    for name, seed, report in results:
        rel, ok, fail = by_op.get(name, (0.0, True, None))
        by_op[name] = (max(rel, *report.max_rel_error.values()), ok and report.passed, fail or report.failure)
    for name, (rel, ok, fail) in by_op.items():
        print(f"{name:24s} max_rel={rel:.2e} {'PASS' if ok else 'FAIL'}" + (f"  ({fail})" if fail else ""))
    passed = all(ok for _, ok, _ in by_op.values())
    print("check-grad: PASS" if passed else "check-grad: FAIL")
    return 0 if passed else 2


def cmd_export(args) -> int:
    ds = datahub.load_dataset(args.features, args.knowledge, args.split)
    model = load_checkpoint(args.checkpoint)
    rows = export_embeddings(model, ds, args.out)
    print(f"wrote {rows} rows to {args.out}")
    return 0


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "check-grad": cmd_check_grad,
    "export-embeddings": cmd_export,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, ParseError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e.filename}: no such file", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
