"""Training loop, prediction and evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import checkpoint
from .backbone import DeepTopoNet, ModelConfig, random_mask
from .config import RunConfig
from .losses import dynamic_weight, recon_loss, seg_loss, total_loss
from .metrics import EvalReport
from .optim import AdamW
from .rng import derive_seed, make_rng
from .synthdata import DatasetError, SegSample, read_dataset, to_uint8, write_pnm
from .tensor import Tensor, no_grad, sigmoid

# stream tags for derive_seed
_EPOCH_ORDER = 101
_MASK = 102

# model fields compared when loading a checkpoint for evaluation
ARCH_KEYS = tuple(k for k in ModelConfig.__dataclass_fields__ if k != "seed")

ENCODER_INIT_NOTE = "encoder initialised randomly (no pretrained masked-autoencoder weights)"


@dataclass
class EpochStats:
    epoch: int
    l_seg: float
    l_rec: float
    l_total: float
    steps: int


@dataclass
class TrainResult:
    model: DeepTopoNet
    epochs: list[EpochStats] = field(default_factory=list)
    steps: list[tuple[int, int, float, float, float]] = field(default_factory=list)
    best_epoch: int = 0
    out_dir: Optional[Path] = None


def load_samples(directory, image_size: int) -> list[SegSample]:
    d = Path(directory)
    if not (d / "manifest.tsv").is_file():
        raise DatasetError(f"no dataset at {d} (manifest.tsv missing)")
    samples = read_dataset(d)
    if not samples:
        raise DatasetError(f"dataset {d} is empty")
    for s in samples:
        if s.image.shape != (3, image_size, image_size):
            raise DatasetError(f"sample {s.id} in {d} is {s.image.shape[1]}×{s.image.shape[2]}, "
                               f"the run expects {image_size}×{image_size}")
    return samples


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return make_rng(derive_seed(seed, _EPOCH_ORDER, epoch)).permutation(n)


def batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def train(cfg: RunConfig, samples: Optional[Sequence[SegSample]] = None,
          out_dir=None, log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Joint segmentation + masked reconstruction training.

    Each step: draw per-sample patch masks, one shared encoder pass, both
    heads, ``λ·l_rec + (1-λ)·l_seg``, AdamW update. Writes ``final/`` and
    ``best/`` checkpoints (best = lowest epoch-mean total loss) and two TSV
    logs when ``out_dir`` is given.
    """
    cfg.validate()
    mcfg = cfg.model_config()
    weights = cfg.loss_weights()
    if samples is None:
        samples = load_samples(cfg.data_dir, cfg.image_size)
    dt = mcfg.np_dtype
    images = np.stack([s.image for s in samples]).astype(dt)
    masks = np.stack([s.mask for s in samples])
    wmaps = [dynamic_weight(m, weights, dt) for m in masks]

    model = DeepTopoNet(mcfg)
    opt = AdamW(model.named_parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay,
                masks=dict(model.named_masks()))
    out = Path(out_dir) if out_dir is not None else None
    echo = cfg.identity()
    result = TrainResult(model, out_dir=out)
    best = None
    step_lines = ["epoch\tstep\tl_seg\tl_rec\tl_total"]
    epoch_lines = ["epoch\tl_seg\tl_rec\tl_total"]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(3)
        n_steps = 0
        for idx in batches(epoch_order(len(samples), cfg.seed, epoch), cfg.batch_size):
            plans = [random_mask(mcfg.n_tokens, mcfg.mask_ratio, derive_seed(cfg.seed, _MASK, epoch, int(i)))
                     for i in idx]
            x = Tensor(images[idx])
            model.zero_grad()
            logits, rec = model.forward_train(x, plans)
            l_seg = seg_loss(logits, masks[idx], [wmaps[i] for i in idx])
            l_rec = recon_loss(rec, model.prepare(x).data, plans, mcfg.patch_size)
            l_tot = total_loss(l_seg, l_rec, weights.lam)
            l_tot.backward()
            opt.step()
            step += 1
            n_steps += 1
            vals = (float(l_seg.data), float(l_rec.data), float(l_tot.data))
            sums += vals
            result.steps.append((epoch, step, *vals))
            step_lines.append(f"{epoch}\t{step}\t" + "\t".join(repr(v) for v in vals))
        stats = EpochStats(epoch, *(float(v) for v in sums / n_steps), steps=n_steps)
        result.epochs.append(stats)
        epoch_lines.append(f"{epoch}\t{stats.l_seg!r}\t{stats.l_rec!r}\t{stats.l_total!r}")
        if log:
            log(f"epoch {epoch:3d}  l_seg {stats.l_seg:.5f}  l_rec {stats.l_rec:.5f}  l_total {stats.l_total:.5f}")
        if best is None or stats.l_total < best:
            best = stats.l_total
            result.best_epoch = epoch
            if out is not None:
                checkpoint.save(out / "best", model, echo)
    if out is not None:
        checkpoint.save(out / "final", model, echo)
        (out / "train_steps.tsv").write_text("\n".join(step_lines) + "\n")
        (out / "train_log.tsv").write_text("\n".join(epoch_lines) + "\n")
    return result


def predict(model: DeepTopoNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Foreground probabilities ``N×H×W`` (float64) in eval mode."""
    dt = model.cfg.np_dtype
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits = model.seg_forward(Tensor(np.asarray(images[i:i + batch_size], dtype=dt)), "eval")
            out.append(sigmoid(logits).data[:, 0].astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:])


def quantise(prob: np.ndarray) -> np.ndarray:
    """Round-trip through the 8-bit prediction format."""
    return to_uint8(prob).astype(np.float64) / 255.0


def evaluate(model: Optional[DeepTopoNet], samples: Sequence[SegSample], out_dir=None,
             gt_as_pred: bool = False, batch_size: int = 8, config: Optional[dict] = None) -> EvalReport:
    """Score predictions against each sample's mask and skeleton.

    Predictions are quantised to 8 bits before scoring, so the report can be
    recomputed from the written PGM files. ``gt_as_pred`` scores the ground
    truth against itself.
    """
    if gt_as_pred:
        probs = np.stack([s.mask.astype(np.float64) for s in samples])
    else:
        if model is None:
            raise ValueError("evaluate needs a model unless gt_as_pred is set")
        probs = quantise(predict(model, np.stack([s.image for s in samples]), batch_size))
    notes = dict(config or {})
    notes["encoder_init"] = ENCODER_INIT_NOTE
    notes["source"] = "ground truth (bypass)" if gt_as_pred else "model"
    report = EvalReport(config=notes)
    for s, p in zip(samples, probs):
        report.add(s.id, p, s.mask, s.skeleton)
    if out_dir is not None:
        out = Path(out_dir)
        (out / "predictions").mkdir(parents=True, exist_ok=True)
        for s, p in zip(samples, probs):
            write_pnm(out / "predictions" / f"{s.id}.pgm", to_uint8(p))
        (out / "report.tsv").write_text(report.to_tsv())
        (out / "report.txt").write_text(report.to_text())
    return report


def load_model(ckpt_dir, cfg: RunConfig) -> DeepTopoNet:
    """Build the model for ``cfg`` and load ``ckpt_dir``; refuses on any mismatch."""
    saved, arrays = checkpoint.read(ckpt_dir)
    expected = cfg.identity()
    checkpoint.check_config(saved, expected, list(ARCH_KEYS))
    model = DeepTopoNet(cfg.model_config())
    checkpoint.load_into(model, arrays)
    return model
