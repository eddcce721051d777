"""``deeptopo`` command line.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 gradient
check failure. Every refusal is a single ``error: ...`` line on stderr and
happens before anything is written.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, dump_config, load_config_file, parse_value, resolve
from .synthdata import MIN_SIZE, ZONES, DatasetError, generate_dataset, write_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_GRADCHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would print usage and exit 2
        raise UsageError(message)


def _positive_int(name):
    def conv(text):
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {text!r}") from None
        if v < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1, got {v}")
        return v
    return conv


def _nonneg_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {v}")
    return v


def _float(text):
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None


# flag -> RunConfig field
RUN_FLAGS = {
    "profile": "profile", "seed": "seed", "epochs": "epochs", "batch_size": "batch_size",
    "lr": "learning_rate", "weight_decay": "weight_decay", "lam": "lam", "mask_ratio": "mask_ratio",
    "ablation": "ablation", "alpha_max": "alpha_max", "data_dir": "data_dir", "eval_dir": "eval_dir",
    "out_dir": "out_dir",
}


def _add_run_flags(p: argparse.ArgumentParser, with_lambda: bool = True, with_ablation: bool = True):
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", help="key = value config file (flags override it)")
    g.add_argument("--profile", choices=("toy", "paper"))
    g.add_argument("--seed", type=_nonneg_int)
    g.add_argument("--epochs", type=_positive_int("--epochs"))
    g.add_argument("--batch-size", dest="batch_size", type=_positive_int("--batch-size"))
    g.add_argument("--lr", type=_float, help="learning rate")
    g.add_argument("--weight-decay", dest="weight_decay", type=_float)
    if with_lambda:
        g.add_argument("--lambda", dest="lam", type=_float, help="reconstruction loss weight in [0, 1]")
    g.add_argument("--mask-ratio", dest="mask_ratio", type=_float)
    g.add_argument("--alpha-max", dest="alpha_max", type=_float)
    if with_ablation:
        g.add_argument("--ablation", choices=("full", "baseline", "wcap_only", "atrm_only"))
    g.add_argument("--data-dir", dest="data_dir", help="training corpus")
    g.add_argument("--eval-dir", dest="eval_dir", help="held-out corpus")
    g.add_argument("--out-dir", dest="out_dir", help="output directory")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field (repeatable)")


def run_config(args) -> RunConfig:
    file_values = load_config_file(args.config) if getattr(args, "config", None) else {}
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        overrides[k] = parse_value(k, v)
    for flag, fld in RUN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            overrides[fld] = v
    return resolve(None, file_values, overrides)


def _load(directory, cfg: RunConfig, what: str):
    from .train import load_samples
    if not Path(directory).is_dir():
        raise DataError(f"{what} directory {directory} does not exist")
    return load_samples(directory, cfg.image_size)


def _say(msg: str) -> None:
    print(msg, flush=True)


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    zones = [z.strip() for z in args.zones.split(",") if z.strip()]
    bad = [z for z in zones if z not in ZONES]
    if not zones or bad:
        raise UsageError(f"--zones must be a comma list drawn from {','.join(ZONES)}, got {args.zones!r}")
    if args.size < MIN_SIZE:
        raise UsageError(f"--size {args.size} is below the minimum of {MIN_SIZE}")
    samples = generate_dataset(args.count, args.size, args.seed, zones)
    root = write_dataset(samples, args.out)
    _say(str(root))
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train
    cfg = run_config(args)
    samples = _load(cfg.data_dir, cfg, "training data")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config({k: getattr(cfg, k) for k in cfg.__dataclass_fields__}))
    t0 = time.perf_counter()
    res = train(cfg, samples, out, log=None if args.quiet else _say)
    _say(f"trained {cfg.epochs} epochs in {time.perf_counter() - t0:.1f}s; best epoch {res.best_epoch}; "
         f"checkpoints in {out / 'final'} and {out / 'best'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate, load_model
    cfg = run_config(args)
    samples = _load(cfg.eval_dir, cfg, "evaluation data")
    model = None
    if not args.gt_as_pred:
        ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.out_dir) / "final"
        model = load_model(ckpt, cfg)
    dest = Path(args.report_dir) if args.report_dir else Path(cfg.out_dir) / "eval"
    report = evaluate(model, samples, dest, gt_as_pred=args.gt_as_pred, config={
        "checkpoint": "none (bypass)" if args.gt_as_pred else str(ckpt), "eval_dir": cfg.eval_dir})
    agg = report.aggregate()
    _say("  ".join(f"{k} {agg[k]:.4f}" for k in agg))
    _say(f"reports in {dest}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradsuite
    ops = None
    if args.ops:
        ops = [o.strip() for o in args.ops.split(",") if o.strip()]
        unknown = [o for o in ops if o not in gradsuite.OPERATORS]
        if unknown:
            raise UsageError(f"unknown operator {unknown[0]!r} (see --list)")
    if args.list:
        for name in gradsuite.OPERATORS:
            _say(name)
        return EXIT_OK
    t0 = time.perf_counter()
    results, neg = gradsuite.run_suite(ops, seeds=tuple(range(args.seeds)), end_to_end=not args.skip_model,
                                       per_tensor=not args.quick, log=_say)
    failed = [r for r in results if not r.passed]
    if args.inject_wrong_grad:
        failed.append(neg)
        _say("injected wrong-gradient fixture counted as a registered operator")
    control_ok = not neg.passed
    worst = max(results, key=lambda r: r.max_rel_err) if results else None
    _say(f"{len(results) - len([r for r in failed if r is not neg])}/{len(results)} checks passed "
         f"(tolerance {gradsuite.TOLERANCE:g}); worst {worst.name if worst else '-'} "
         f"{worst.max_rel_err if worst else 0:.3e}; {time.perf_counter() - t0:.1f}s")
    if not control_ok:
        _say("negative control did not fail: the checker cannot detect a wrong gradient")
        return EXIT_GRADCHECK
    return EXIT_GRADCHECK if failed else EXIT_OK


def _experiment_data(args, cfg):
    train_s = _load(cfg.data_dir, cfg, "training data")
    eval_s = _load(cfg.eval_dir, cfg, "evaluation data")
    return train_s, eval_s


def cmd_sweep_lambda(args) -> int:
    from .experiments import LAMBDA_GRID, parse_lambda, sweep_lambda
    cfg = run_config(args)
    lambdas = [s.strip() for s in args.lambdas.split(",")] if args.lambdas else list(LAMBDA_GRID)
    for s in lambdas:
        try:
            parse_lambda(s)
        except ValueError as e:
            raise UsageError(str(e)) from None
    train_s, eval_s = _experiment_data(args, cfg)
    out = Path(cfg.out_dir)
    res = sweep_lambda(cfg, train_s, eval_s, lambdas, args.cache_dir or out / "runs", log=_say)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep_lambda.tsv").write_text(res.table)
    sys.stdout.write(res.table)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiments import ABLATION_ROWS, ablate
    cfg = run_config(args)
    variants = None
    if args.variants:
        variants = [v.strip() for v in args.variants.split(",") if v.strip()]
        known = [r for r, _ in ABLATION_ROWS]
        bad = [v for v in variants if v not in known]
        if bad or not variants:
            raise UsageError(f"--variants must be drawn from {','.join(known)}, got {args.variants!r}")
    train_s, eval_s = _experiment_data(args, cfg)
    out = Path(cfg.out_dir)
    res = ablate(cfg, train_s, eval_s, args.cache_dir or out / "runs", variants, log=_say)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.tsv").write_text(res.table)
    sys.stdout.write(res.table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deeptopo", description="Synthetic data, training, evaluation and checks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--out", required=True, help="destination directory")
    g.add_argument("--count", type=_positive_int("--count"), default=300)
    g.add_argument("--size", type=_positive_int("--size"), default=96)
    g.add_argument("--zones", default=",".join(ZONES), help="comma list; samples cycle through it")
    g.add_argument("--seed", type=_nonneg_int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    _add_run_flags(t)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a held-out corpus")
    _add_run_flags(e)
    e.add_argument("--checkpoint", help="checkpoint directory (default OUT_DIR/final)")
    e.add_argument("--report-dir", help="where to write predictions and reports (default OUT_DIR/eval)")
    e.add_argument("--gt-as-pred", action="store_true", help="score the ground truth against itself")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--seeds", type=_positive_int("--seeds"), default=2)
    c.add_argument("--ops", help="comma list of operators (default: all)")
    c.add_argument("--list", action="store_true", help="list registered operators")
    c.add_argument("--skip-model", action="store_true", help="skip the end-to-end toy model")
    c.add_argument("--quick", action="store_true", help="one direction for the toy model instead of one per tensor")
    c.add_argument("--inject-wrong-grad", action="store_true",
                   help="register the deliberately wrong gradient fixture as an operator")
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("sweep-lambda", help="train and evaluate one model per loss weight")
    _add_run_flags(s, with_lambda=False, with_ablation=False)
    s.add_argument("--lambdas", help="comma list (default 0,0.05,0.1,0.2,0.5)")
    s.add_argument("--cache-dir", help="trained-run cache (default OUT_DIR/runs)")
    s.set_defaults(func=cmd_sweep_lambda)

    a = sub.add_parser("ablate", help="train and evaluate the four component variants")
    _add_run_flags(a, with_ablation=False)
    a.add_argument("--variants", help="comma subset of B,B+WCAP,B+ATRM,Ours (default all)")
    a.add_argument("--cache-dir", help="trained-run cache (default OUT_DIR/runs)")
    a.set_defaults(func=cmd_ablate)
    return p


def _one_line(msg) -> str:
    return " ".join(str(msg).split())


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a command is required (gen-data, train, eval, gradcheck, sweep-lambda, ablate)")
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {_one_line(e)}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DatasetError, CheckpointError) as e:
        print(f"error: {_one_line(e)}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"error: {_one_line(e.strerror or e)}: {e.filename or ''}".rstrip(": "), file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
