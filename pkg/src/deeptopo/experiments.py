"""Ablation and loss-weight sweep harnesses.

Both train one toy model per row on a shared corpus and seed, evaluate on a
shared held-out set, and emit a table. Trained runs are cached on disk by a
digest of their configuration and data, so a row that appears in both
tables (the full model at the default λ) is trained once.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import checkpoint
from .backbone import DeepTopoNet, parameter_groups
from .config import RunConfig, dump_config
from .metrics import METRIC_NAMES, EvalReport, _fmt
from .synthdata import SegSample
from .train import ENCODER_INIT_NOTE, evaluate, train

ABLATION_ROWS = (("B", "baseline"), ("B+WCAP", "wcap_only"), ("B+ATRM", "atrm_only"), ("Ours", "full"))
LAMBDA_GRID = ("0", "0.05", "0.1", "0.2", "0.5")
SWEEP_COLUMNS = ("s_alpha", "f_beta_w", "mean_e", "mae")


def dataset_digest(samples: Sequence[SegSample]) -> str:
    """SHA-256 over ids, quantised images, masks and skeletons."""
    h = hashlib.sha256()
    for s in samples:
        h.update(s.id.encode())
        h.update(np.floor(np.clip(s.image, 0, 1) * 255 + 0.5).astype(np.uint8).tobytes())
        h.update(np.packbits(s.mask).tobytes())
        h.update(np.packbits(s.skeleton).tobytes())
    return h.hexdigest()


def run_key(cfg: RunConfig, train_digest: str) -> str:
    h = hashlib.sha256(dump_config(cfg.identity()).encode())
    h.update(train_digest.encode())
    return h.hexdigest()[:16]


@dataclass
class RunOutcome:
    label: str
    cfg: RunConfig
    model: DeepTopoNet
    report: EvalReport
    first_epoch_loss: Optional[float]
    last_epoch_loss: Optional[float]
    cached: bool

    @property
    def metrics(self) -> dict[str, float]:
        return self.report.aggregate()


class RunCache:
    """Directory of trained runs: ``<key>/final`` checkpoint plus ``<key>/train_log.tsv``."""

    def __init__(self, directory):
        self.dir = Path(directory)

    def path(self, key: str) -> Path:
        return self.dir / key

    def load(self, key: str, cfg: RunConfig):
        d = self.path(key)
        if not (d / "final" / checkpoint.MANIFEST).is_file() or not (d / "train_log.tsv").is_file():
            return None
        saved, arrays = checkpoint.read(d / "final")
        if saved != cfg.identity():
            return None
        model = DeepTopoNet(cfg.model_config())
        checkpoint.load_into(model, arrays)
        rows = [ln.split("\t") for ln in (d / "train_log.tsv").read_text().splitlines()[1:] if ln]
        return model, float(rows[0][3]), float(rows[-1][3])


def run_one(label: str, cfg: RunConfig, train_samples, eval_samples, cache: Optional[RunCache],
            train_digest: str, log: Optional[Callable[[str], None]] = None) -> RunOutcome:
    key = run_key(cfg, train_digest)
    hit = cache.load(key, cfg) if cache is not None else None
    if hit is not None:
        model, first, last = hit
        if log:
            log(f"[{label}] reusing trained run {key}")
    else:
        if log:
            log(f"[{label}] training ({cfg.ablation}, lambda={cfg.lam!r}, {cfg.epochs} epochs)")
        out = cache.path(key) if cache is not None else None
        res = train(cfg, train_samples, out, log=(lambda s: log(f"[{label}] {s}")) if log else None)
        model = res.model
        first, last = res.epochs[0].l_total, res.epochs[-1].l_total
    report = evaluate(model, eval_samples)
    return RunOutcome(label, cfg, model, report, first, last, hit is not None)


def _table(header: Sequence[str], rows: list[list[str]], footer: Sequence[str]) -> str:
    lines = ["\t".join(header)] + ["\t".join(r) for r in rows]
    lines += [f"# {f}" for f in footer]
    return "\n".join(lines) + "\n"


def _common_footer(base: RunConfig, train_digest: str, eval_digest: str) -> list[str]:
    return [f"seed = {base.seed}", f"epochs = {base.epochs}", f"profile = {base.profile}",
            f"train_data = {train_digest[:16]}", f"eval_data = {eval_digest[:16]}",
            f"encoder_init = {ENCODER_INIT_NOTE}"]


@dataclass
class AblationResult:
    rows: list[RunOutcome]
    params: list[dict[str, int]]
    table: str


def ablate(base: RunConfig, train_samples, eval_samples, cache_dir=None,
           variants: Optional[Sequence[str]] = None, log=None) -> AblationResult:
    """Rows B, B+WCAP, B+ATRM, Ours (or the requested subset, in that order)."""
    wanted = [lbl for lbl, _ in ABLATION_ROWS] if variants is None else list(variants)
    unknown = [v for v in wanted if v not in dict(ABLATION_ROWS)]
    if unknown:
        raise ValueError(f"unknown ablation row {unknown[0]!r}; expected some of {[r for r, _ in ABLATION_ROWS]}")
    cache = RunCache(cache_dir) if cache_dir is not None else None
    td, ed = dataset_digest(train_samples), dataset_digest(eval_samples)
    outcomes, params = [], []
    for label, abl in ABLATION_ROWS:
        if label not in wanted:
            continue
        cfg = base.replace(ablation=abl).validate()
        o = run_one(label, cfg, train_samples, eval_samples, cache, td, log)
        outcomes.append(o)
        params.append(parameter_groups(o.model))
    header = ["variant", "ablation", "wcap_params", "astb_params", "total_params", *METRIC_NAMES, "train_data"]
    rows = []
    for o, p in zip(outcomes, params):
        agg = o.metrics
        rows.append([o.label, o.cfg.ablation, str(p["wcap"]), str(p["astb"]), str(sum(p.values())),
                     *[_fmt(agg[k]) for k in METRIC_NAMES], td[:16]])
    return AblationResult(outcomes, params, _table(header, rows, _common_footer(base, td, ed)))


@dataclass
class SweepResult:
    lambdas: list[str]
    rows: list[RunOutcome]
    table: str


def parse_lambda(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ValueError(f"lambda {text!r} is not a number") from None
    if not 0 <= v <= 1:
        raise ValueError(f"lambda must lie in [0, 1], got {text}")
    return v


def sweep_lambda(base: RunConfig, train_samples, eval_samples, lambdas: Sequence[str] = LAMBDA_GRID,
                 cache_dir=None, log=None) -> SweepResult:
    """One full-model run per λ; the λ column echoes the requested strings verbatim."""
    values = [parse_lambda(s) for s in lambdas]
    cache = RunCache(cache_dir) if cache_dir is not None else None
    td, ed = dataset_digest(train_samples), dataset_digest(eval_samples)
    outcomes = []
    for text, lam in zip(lambdas, values):
        cfg = base.replace(lam=lam).validate()
        outcomes.append(run_one(f"lambda={text}", cfg, train_samples, eval_samples, cache, td, log))
    header = ["lambda", *SWEEP_COLUMNS]
    rows = [[text, *[_fmt(o.metrics[k]) for k in SWEEP_COLUMNS]] for text, o in zip(lambdas, outcomes)]
    return SweepResult(list(lambdas), outcomes, _table(header, rows, _common_footer(base, td, ed)))
