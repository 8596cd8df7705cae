"""``micar`` command line: synth, train, generate, eval, viz, gradcheck."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from micar.autodiff.gradcheck import GradCheckRow, check_parameters
from micar.checkpoint import model_from_checkpoint
from micar.config import RunConfig, load_run_config, packaged_config
from micar.data import (EOS_ID, SOS_ID, SyntheticSpec, Vocabulary, generate_synthetic, load_dataset, load_image,
                        read_captions, tokenize)
from micar.decoding import generate
from micar.errors import ConfigurationError, MicarError
from micar.metrics import evaluate_corpus
from micar.model import MicarVLMoE, ModelConfig, teacher_forcing, total_loss
from micar.train import CheckpointLock, fit
from micar.viz import emit_visualizations

log = logging.getLogger("micar")

GRADCHECK_TOL = 1e-4


# -- gradient check ------------------------------------------------------------------

def model_gradcheck(model_cfg: ModelConfig, seed: int = 0, eps: float = 1e-4, max_entries: Optional[int] = 8,
                    image_size: int = 32, caption_len: int = 6, batch: int = 2) -> list[GradCheckRow]:
    """Finite-difference check of every parameter tensor through the full model and loss.

    Runs in training mode (batch statistics) with dropout forced to zero so the
    loss is a deterministic function of the parameters.
    """
    cfg = dataclasses.replace(model_cfg, attn_dropout=0.0, block_dropout=0.0)
    model = MicarVLMoE(cfg, seed)
    model.train()
    rng = np.random.default_rng([seed, 1])
    images = rng.uniform(0.0, 1.0, size=(batch, cfg.in_channels, image_size, image_size))
    words = rng.integers(4, cfg.vocab_size, size=(batch, caption_len))
    ids = np.concatenate([np.full((batch, 1), SOS_ID), words, np.full((batch, 1), EOS_ID)], axis=1)
    inputs, targets = teacher_forcing(ids)

    def loss_fn():
        out = model(images, inputs)
        return total_loss(out.logits, targets, out.lb, cfg.alpha).total

    return check_parameters(loss_fn, model.params(), eps, max_entries, 1, seed)


def format_gradcheck(rows: Sequence[GradCheckRow], tol: float) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'parameter':<{width}}  checked  worst_rel_err  status"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.checked:>7}  {r.worst_error:13.3e}  {'ok' if r.passed(tol) else 'FAIL'}")
    return "\n".join(lines)


# -- commands ------------------------------------------------------------------------

def _run_config(args) -> RunConfig:
    path = args.config
    if path is None and getattr(args, "preset", None):
        path = packaged_config(args.preset)
    cfg = load_run_config(path)
    overrides = {
        ("train", "epochs"): args.epochs, ("train", "batch_size"): args.batch_size, ("train", "lr"): args.lr,
        ("train", "msve_lr"): args.msve_lr, ("train", "seed"): args.seed, ("train", "max_steps"): args.max_steps,
        ("data", "path"): args.data, ("paths", "checkpoint_dir"): args.checkpoint_dir,
    }
    for (section, key), value in overrides.items():
        if value is not None:
            setattr(getattr(cfg, section), key, value)
    return cfg


def cmd_synth(args) -> int:
    out = generate_synthetic(SyntheticSpec(args.size, args.seed), args.n, args.out)
    print(f"wrote {args.n} pairs to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    data = load_dataset(cfg.data.path, max_len=cfg.data.max_len)
    if cfg.model.vocab_size != len(data.vocab):
        log.info("model vocab_size %d -> %d (dataset vocabulary)", cfg.model.vocab_size, len(data.vocab))
        cfg.model.vocab_size = len(data.vocab)
    if cfg.data.max_len > cfg.model.max_len:
        raise ConfigurationError(f"data.max_len {cfg.data.max_len} exceeds model.max_len {cfg.model.max_len}")
    train = data.split(*cfg.data.train_splits)
    val = data.split("val") if "val" not in cfg.data.train_splits else None
    if not len(train):
        raise ConfigurationError(f"no training examples in splits {cfg.data.train_splits}")
    ckpt_dir = Path(cfg.paths.checkpoint_dir)
    with CheckpointLock(ckpt_dir):
        (ckpt_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        model = MicarVLMoE(cfg.model, seed=cfg.train.seed)
        result = fit(model, train, cfg.train, ckpt_dir, val if val is not None and len(val) else None,
                     resume=args.resume)
    last = result.history[-1] if result.history else {}
    print(f"trained to step {result.steps}; last L_lang {last.get('L_lang', float('nan')):.4f}; "
          f"checkpoints in {ckpt_dir}")
    return 0


def _write_jsonl(rows, out) -> None:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")


def cmd_generate(args) -> int:
    model, ckpt = model_from_checkpoint(args.checkpoint)
    vocab = ckpt.vocab
    if vocab is None:
        raise ConfigurationError(f"{args.checkpoint} carries no vocabulary")
    if args.image:
        items = [(Path(p).stem, load_image(p)) for p in args.image]
    else:
        data_vocab = Vocabulary.load(Path(args.data) / "vocab.json")
        if data_vocab.tokens != vocab.tokens:
            raise ConfigurationError(f"vocabulary of {args.data} does not match the checkpoint's "
                                     f"({len(data_vocab)} vs {len(vocab)} tokens)")
        items = [(ex.id, ex.image) for ex in load_dataset(args.data, vocab, splits=[args.split])]
    rows = []
    for ex_id, image in items:
        ids = generate(model, image, args.width, args.max_len, ban_unk=args.ban_unk)
        rows.append({"id": ex_id, "text": vocab.decode(ids)})
    _write_jsonl(rows, args.out)
    return 0


def cmd_eval(args) -> int:
    preds = {}
    for row in read_captions(args.predictions):
        preds[str(row["id"])] = tokenize(row["text"])
    refs = {str(r["id"]): tokenize(r["text"]) for r in read_captions(Path(args.data) / "captions.jsonl")
            if args.split is None or r.get("split") == args.split}
    report = evaluate_corpus(preds, refs)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    summary = {k: v for k, v in report.to_dict().items() if k != "per_example"}
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_viz(args) -> int:
    model, ckpt = model_from_checkpoint(args.checkpoint)
    if ckpt.vocab is None:
        raise ConfigurationError(f"{args.checkpoint} carries no vocabulary")
    paths = emit_visualizations(model, ckpt.vocab, load_image(args.image), args.caption, args.out)
    print(f"wrote {len(paths)} files to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    path = args.config or packaged_config("minimal")
    cfg = load_run_config(path)
    rows = model_gradcheck(cfg.model, seed=args.seed, max_entries=args.entries)
    print(format_gradcheck(rows, args.tol))
    bad = [r for r in rows if not r.passed(args.tol)]
    if bad:
        worst = max(bad, key=lambda r: r.worst_error)
        print(f"gradcheck FAILED: {len(bad)} parameter(s) above {args.tol:g}; worst {worst.name} "
              f"({worst.worst_error:.3e} at {worst.worst_index})", file=sys.stderr)
        return 1
    print(f"gradcheck passed: {len(rows)} parameter tensors, worst {max(r.worst_error for r in rows):.3e}")
    return 0


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="micar", description="Vision-language MoE report generator (desk scale).")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write the synthetic shapes corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=32)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train from a run config")
    t.add_argument("--config")
    t.add_argument("--preset", choices=["minimal", "desk"])
    t.add_argument("--data")
    t.add_argument("--checkpoint-dir")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--msve-lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="beam-search captions for images or a dataset split")
    g.add_argument("--checkpoint", required=True)
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", nargs="+")
    src.add_argument("--data")
    g.add_argument("--split", default="test")
    g.add_argument("--width", type=int, default=3)
    g.add_argument("--max-len", type=int)
    g.add_argument("--ban-unk", action="store_true")
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("eval", help="score a predictions JSONL against dataset captions")
    e.add_argument("--predictions", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz", help="dump attention maps and expert routing for one image/caption")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--image", required=True)
    v.add_argument("--caption", required=True)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_viz)

    c = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    c.add_argument("--config")
    c.add_argument("--tol", type=float, default=GRADCHECK_TOL)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--entries", type=int, default=8, help="sampled coordinates per parameter tensor")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (MicarError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
