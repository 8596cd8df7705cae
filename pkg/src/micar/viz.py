"""Attention-map and routing dumps for one (image, caption) pair."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from micar.autodiff.tensor import Tensor, no_grad
from micar.data import Vocabulary, write_pgm
from micar.fusion import emit_routing_artifacts
from micar.model import MicarVLMoE


def row_normalized_gray(matrix: np.ndarray) -> np.ndarray:
    """Map each row linearly from [0, row max] to [0, 255]; all-zero rows stay black."""
    m = np.asarray(matrix, dtype=np.float64)
    peak = m.max(axis=1, keepdims=True)
    scaled = np.divide(m, peak, out=np.zeros_like(m), where=peak > 0)
    return np.rint(np.clip(scaled, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_matrix_csv(path, matrix: np.ndarray, row_labels, col_labels) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["query"] + list(col_labels))
        for label, row in zip(row_labels, matrix):
            w.writerow([label] + [repr(float(v)) for v in row])


def read_matrix_csv(path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return [r[0] for r in rows[1:]], rows[0][1:], np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def emit_visualizations(model: MicarVLMoE, vocab: Vocabulary, image: np.ndarray, caption: str, out_dir) -> list[Path]:
    """Teacher-force ``caption`` through ``model`` and dump every attention map and routing trace.

    Writes ``layer{n}_head{h}_{self,cross}.csv`` and ``.pgm`` per decoder layer
    and head, plus ``layer{n}_routing_*.csv``. The caption is fed as
    ``<sos> w1 .. wn`` so each query row is labelled by its input token.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = vocab.encode(caption, max_len=model.cfg.max_len)[:-1]
    labels = [f"{i}:{vocab.token(t)}" for i, t in enumerate(ids)]
    model.eval()
    with no_grad():
        fwd = model(Tensor(np.asarray(image, dtype=np.float64)), np.asarray(ids), trace=True, token_labels=labels)
    written = []
    for n, layer in enumerate(fwd.layers):
        patches = [f"p{j}" for j in range(layer.cross_attn_map.shape[-1])]
        for kind, maps, cols in (("self", layer.self_attn_map, labels), ("cross", layer.cross_attn_map, patches)):
            for h, mat in enumerate(maps):
                stem = out_dir / f"layer{n}_head{h}_{kind}"
                write_matrix_csv(stem.with_suffix(".csv"), mat, labels, cols)
                write_pgm(stem.with_suffix(".pgm"), row_normalized_gray(mat))
                written += [stem.with_suffix(".csv"), stem.with_suffix(".pgm")]
        written += emit_routing_artifacts(layer.routing, out_dir, prefix=f"layer{n}_routing")
    return written
