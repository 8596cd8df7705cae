"""Vocabulary, tokenisation, the synthetic shapes corpus and the on-disk dataset format.

Dataset layout::

    images/NNNNNN.pgm   binary PGM (P5, maxval 255), grayscale
    captions.jsonl      {"id": "NNNNNN", "text": "...", "split": "train|val|test"}
    vocab.json          {"tokens": [...], "min_freq": 3}
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from micar.errors import ContractError, DataLoadError, VocabularyError

PAD, SOS, EOS, UNK = "<pad>", "<sos>", "<eos>", "<unk>"
RESERVED = (PAD, SOS, EOS, UNK)
PAD_ID, SOS_ID, EOS_ID, UNK_ID = range(4)

_WORD = re.compile(r"[a-z0-9]+(?:[-'][a-z0-9]+)*")
# de-identification residue: letter/digit mixtures ("xxxx1", "a2b") and xx-style placeholders
DEID_PATTERN = re.compile(r"^(?:(?=[a-z0-9]*[a-z])(?=[a-z0-9]*[0-9])[a-z0-9]+|x{2,})$")


def tokenize(text: str) -> list[str]:
    """Lowercase, split into word tokens and drop de-identification artifacts."""
    return [w for w in _WORD.findall(text.lower()) if not DEID_PATTERN.match(w)]


@dataclass
class Vocabulary:
    tokens: list[str]
    min_freq: int = 3
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != RESERVED:
            raise ContractError(f"vocabulary must start with reserved tokens {RESERVED}")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ContractError("vocabulary tokens are not unique")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def token(self, i: int) -> str:
        if not 0 <= i < len(self.tokens):
            raise VocabularyError(f"token id {i} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[i]

    def encode(self, text: str, max_len: Optional[int] = None, pad_to: Optional[int] = None) -> list[int]:
        """``<sos> w1 .. wn <eos>`` (content truncated to fit ``max_len``), padded to ``pad_to``."""
        words = [self.id(w) for w in tokenize(text)]
        if max_len is not None:
            if max_len < 2:
                raise ContractError("max_len must leave room for <sos> and <eos>")
            words = words[: max_len - 2]
        ids = [SOS_ID] + words + [EOS_ID]
        if pad_to is not None:
            if len(ids) > pad_to:
                raise ContractError(f"report of {len(ids)} ids does not fit pad_to={pad_to}")
            ids += [PAD_ID] * (pad_to - len(ids))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """Text of the ids between ``<sos>`` and the first ``<eos>``."""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i in (SOS_ID, PAD_ID):
                continue
            out.append(self.token(i))
        return " ".join(out)

    def to_json(self) -> dict:
        return {"tokens": list(self.tokens), "min_freq": self.min_freq}

    @classmethod
    def from_json(cls, d: dict) -> "Vocabulary":
        return cls(list(d["tokens"]), int(d.get("min_freq", 3)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(texts: Sequence[str], min_freq: int = 3) -> Vocabulary:
    """Keep tokens seen at least ``min_freq`` times; ids ordered by (frequency desc, token asc)."""
    if not texts:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    counts = Counter(w for t in texts for w in tokenize(t))
    kept = sorted((w for w, c in counts.items() if c >= min_freq and w not in RESERVED),
                  key=lambda w: (-counts[w], w))
    return Vocabulary(list(RESERVED) + kept, min_freq)


# -- PGM -------------------------------------------------------------------------

def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError(f"PGM needs a 2-d array, got shape {pixels.shape}")
    h, w = pixels.shape
    data = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Return (pixels as float array, maxval) for a binary P5 file."""
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataLoadError(f"{path}: truncated PGM header")
        fields.append(raw[start:pos])
    pos += 1
    if fields[0] != b"P5":
        raise DataLoadError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    w, h, maxval = (int(f) for f in fields[1:])
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    count = w * h
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    return arr.reshape(h, w).astype(np.float64), maxval


def load_image(path) -> np.ndarray:
    """Grayscale PGM -> ``3×H×W`` array scaled to [0, 1]."""
    pixels, maxval = read_pgm(path)
    gray = pixels / float(maxval)
    return np.repeat(gray[None], 3, axis=0)


# -- synthetic corpus ----------------------------------------------------------

SHAPES = ("circle", "square", "cross")
POSITIONS = ("top-left", "top-right", "bottom-left", "bottom-right", "center")
INTENSITIES = ("dim", "bright")
INTENSITY_LEVEL = {"dim": 110, "bright": 240}
CLASSES = [(s, p, i) for s in SHAPES for p in POSITIONS for i in INTENSITIES]


@dataclass
class SyntheticSpec:
    image_size: int = 32
    seed: int = 0


def caption_for(shape: str, position: str, intensity: str) -> str:
    return f"a {intensity} {shape} in the {position}"


def position_center(position: str, size: int) -> tuple[int, int]:
    q, c = size // 4, size // 2
    return {
        "top-left": (q, q), "top-right": (q, size - q), "bottom-left": (size - q, q),
        "bottom-right": (size - q, size - q), "center": (c, c),
    }[position]


def render_shape(shape: str, position: str, intensity: str, size: int = 32,
                 jitter: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Grayscale ``size×size`` image (0..255) with one filled shape on black."""
    cy, cx = position_center(position, size)
    cy, cx = cy + jitter[0], cx + jitter[1]
    r = max(size // 8, 2)
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        mask = dy * dy + dx * dx <= r * r
    elif shape == "square":
        mask = (np.abs(dy) <= r - 1) & (np.abs(dx) <= r - 1)
    elif shape == "cross":
        arm = max(r // 4, 1)
        mask = ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    else:
        raise ValueError(f"unknown shape {shape!r}")
    img = np.zeros((size, size))
    img[mask] = INTENSITY_LEVEL[intensity]
    return img


def split_assignment(n: int, seed: int, ratios: tuple[int, int, int] = (8, 1, 1)) -> list[str]:
    """Split name per index: items ranked by a seeded hash, then cut 8:1:1 (exact counts)."""
    def key(i: int) -> str:
        return hashlib.sha256(f"{seed}:{i}".encode()).hexdigest()

    order = sorted(range(n), key=key)
    total = sum(ratios)
    n_train = n * ratios[0] // total
    n_val = n * ratios[1] // total
    out = [""] * n
    for rank, i in enumerate(order):
        out[i] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return out


def generate_synthetic(spec: SyntheticSpec, n: int, path) -> Path:
    """Write ``n`` (image, caption) pairs cycling through the 30 classes with ±1 px jitter."""
    if n < 1:
        raise ContractError("n must be >= 1")
    root = Path(path)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    splits = split_assignment(n, spec.seed)
    lines = []
    for i in range(n):
        shape, position, intensity = CLASSES[i % len(CLASSES)]
        jitter = tuple(int(v) for v in np.random.default_rng([spec.seed, i]).integers(-1, 2, size=2))
        item_id = f"{i:06d}"
        write_pgm(root / "images" / f"{item_id}.pgm", render_shape(shape, position, intensity, spec.image_size, jitter))
        lines.append(json.dumps({"id": item_id, "text": caption_for(shape, position, intensity), "split": splits[i]}))
    (root / "captions.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    train_texts = [json.loads(l)["text"] for l in lines if json.loads(l)["split"] == "train"]
    build_vocab(train_texts or [json.loads(l)["text"] for l in lines]).save(root / "vocab.json")
    return root


# -- loading -------------------------------------------------------------------

@dataclass
class Example:
    id: str
    image: np.ndarray
    text: str
    split: str
    ids: list[int]


@dataclass
class Dataset:
    root: Path
    vocab: Vocabulary
    examples: list[Example]

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)

    def split(self, *names: str) -> "Dataset":
        return Dataset(self.root, self.vocab, [e for e in self.examples if e.split in names])

    def by_id(self) -> dict[str, Example]:
        return {e.id: e for e in self.examples}

    def batch(self, indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Stacked images and ids padded with ``<pad>`` to the longest report in the batch."""
        exs = [self.examples[i] for i in indices]
        width = max(len(e.ids) for e in exs)
        ids = np.full((len(exs), width), PAD_ID, dtype=np.int64)
        for row, e in enumerate(exs):
            ids[row, :len(e.ids)] = e.ids
        return np.stack([e.image for e in exs]), ids

    def batches(self, batch_size: int, seed: Optional[int] = None, epoch: int = 0) -> list[list[int]]:
        """Index batches; shuffled only through a permutation seeded by (seed, epoch)."""
        order = np.arange(len(self.examples))
        if seed is not None:
            order = np.random.default_rng([seed, epoch]).permutation(len(self.examples))
        return [order[i:i + batch_size].tolist() for i in range(0, len(order), batch_size)]


def read_captions(path) -> list[dict]:
    """Parse ``captions.jsonl``; malformed lines raise with their 1-based line number."""
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataLoadError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
        if not isinstance(rec, dict) or not {"id", "text"} <= rec.keys():
            raise DataLoadError(f"{path}:{lineno}: record needs 'id' and 'text' fields")
        rec["_line"] = lineno
        records.append(rec)
    return records


def load_dataset(path, vocab: Optional[Vocabulary] = None, splits: Optional[Sequence[str]] = None,
                 max_len: int = 60) -> Dataset:
    """Load images and captions in file order; captions are tokenised against ``vocab``."""
    root = Path(path)
    if vocab is None:
        vpath = root / "vocab.json"
        if not vpath.exists():
            raise DataLoadError(f"{vpath}: vocabulary file missing")
        vocab = Vocabulary.load(vpath)
    examples = []
    for rec in read_captions(root / "captions.jsonl"):
        split = rec.get("split", "train")
        if splits is not None and split not in splits:
            continue
        img_path = root / "images" / f"{rec['id']}.pgm"
        if not img_path.exists():
            raise DataLoadError(f"captions.jsonl:{rec['_line']}: image {img_path} not found")
        examples.append(Example(str(rec["id"]), load_image(img_path), rec["text"], split,
                                vocab.encode(rec["text"], max_len)))
    return Dataset(root, vocab, examples)
