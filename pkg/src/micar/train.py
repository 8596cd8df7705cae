"""Epoch loop, evaluation and resumable checkpointing."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from micar.checkpoint import load_checkpoint, restore, save_checkpoint
from micar.config import TrainConfig
from micar.data import Dataset, tokenize
from micar.decoding import generate
from micar.errors import ConfigurationError
from micar.metrics import MetricReport, evaluate_corpus
from micar.model import MicarVLMoE
from micar.optim import AdamW, StepLR, step_rng, train_step

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "L_total", "L_lang", "L_balance", "lr")


def predict(model: MicarVLMoE, dataset: Dataset, width: int = 3, ban_unk: bool = False) -> dict[str, str]:
    """Decoded text per example id."""
    return {ex.id: dataset.vocab.decode(generate(model, ex.image, width, ban_unk=ban_unk)) for ex in dataset}


def evaluate(model: MicarVLMoE, dataset: Dataset, width: int = 3) -> MetricReport:
    preds = predict(model, dataset, width)
    refs = {ex.id: tokenize(ex.text) for ex in dataset}
    return evaluate_corpus({k: tokenize(v) for k, v in preds.items()}, refs)


class CheckpointLock:
    """Exclusive ownership of a checkpoint directory for one training process."""

    def __init__(self, directory: Path):
        self.path = Path(directory) / "train.lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise ConfigurationError(f"{self.path} exists: another run owns this checkpoint directory") from exc
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


@dataclass
class FitResult:
    steps: int
    history: list = field(default_factory=list)
    best_val_bleu: float = float("-inf")


def _finite(v: float):
    return v if np.isfinite(v) else None


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def fit(model: MicarVLMoE, train: Dataset, tcfg: TrainConfig, checkpoint_dir=None, val: Optional[Dataset] = None,
        resume: bool = False, log_path=None) -> FitResult:
    """Train ``model`` in place.

    Batch order and dropout noise are pure functions of (seed, epoch) and
    (seed, step), so a run resumed from ``last.ckpt`` continues exactly where
    an uninterrupted one would be.
    """
    params = model.params()
    opt = AdamW(params, lr=tcfg.lr, msve_lr=tcfg.msve_lr, weight_decay=tcfg.weight_decay)
    sched = StepLR(opt, tcfg.resolved_step_epochs(), tcfg.gamma)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    start, best = 0, float("-inf")
    if resume:
        if ckpt_dir is None or not (ckpt_dir / "last.ckpt").exists():
            raise ConfigurationError("resume requested but no last.ckpt found")
        ck = load_checkpoint(ckpt_dir / "last.ckpt")
        restore(ck, model, opt)
        start = ck.step
        saved = ck.header["extra"].get("best_val_bleu")
        best = float(saved) if saved is not None else best
    if log_path is None and ckpt_dir is not None:
        log_path = ckpt_dir / "metrics.csv"
    result = FitResult(start, best_val_bleu=best)
    per_epoch = len(train.batches(tcfg.batch_size))
    total_steps = tcfg.epochs * per_epoch
    if tcfg.max_steps is not None:
        total_steps = min(total_steps, tcfg.max_steps)
    log_fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fresh = not resume or not Path(log_path).exists()
        log_fh = open(log_path, "w" if fresh else "a", newline="", encoding="utf-8")
        writer = csv.writer(log_fh)
        if fresh:
            writer.writerow(LOG_COLUMNS)
    try:
        step = start
        while step < total_steps:
            epoch, in_epoch = divmod(step, per_epoch)
            sched.set_epoch(epoch)
            batches = train.batches(tcfg.batch_size, tcfg.seed, epoch)
            for idx in batches[in_epoch:]:
                if step >= total_steps:
                    break
                images, ids = train.batch(idx)
                metrics = train_step(model, opt, images, ids, step_rng(tcfg.seed, step))
                metrics["step"] = step + 1
                result.history.append(metrics)
                if log_fh is not None:
                    writer.writerow([_fmt(metrics[c]) for c in LOG_COLUMNS])
                step += 1
            end_of_epoch = step % per_epoch == 0
            if end_of_epoch and val is not None and len(val):
                report = evaluate(model, val, tcfg.val_width)
                log.info("epoch %d val bleu_1=%.4f avg_bleu=%.4f", epoch + 1, report.bleu_1, report.avg_bleu)
                if report.avg_bleu > result.best_val_bleu:
                    result.best_val_bleu = report.avg_bleu
                    if ckpt_dir is not None:
                        save_checkpoint(ckpt_dir / "best.ckpt", model, opt, step, train.vocab,
                                        {"best_val_bleu": _finite(result.best_val_bleu)})
                model.train()
            if ckpt_dir is not None:
                save_checkpoint(ckpt_dir / "last.ckpt", model, opt, step, train.vocab,
                                {"best_val_bleu": _finite(result.best_val_bleu)})
        result.steps = step
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    return result
