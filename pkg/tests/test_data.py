import hashlib
import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from micar.data import (CLASSES, EOS_ID, PAD_ID, SOS_ID, UNK_ID, SyntheticSpec, Vocabulary, build_vocab,
                        caption_for, generate_synthetic, load_dataset, load_image, read_captions, render_shape,
                        split_assignment, tokenize, write_pgm)
from micar.errors import ContractError, DataLoadError, VocabularyError


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# -- vocabulary ----------------------------------------------------------------------

def test_frequency_threshold():
    v = build_vocab(["a b a b a"])
    assert "a" in v and "b" not in v


def test_reserved_ids():
    v = build_vocab(["x y z"], min_freq=1)
    assert [v.id(t) for t in ("<pad>", "<sos>", "<eos>", "<unk>")] == [0, 1, 2, 3]
    assert (PAD_ID, SOS_ID, EOS_ID, UNK_ID) == (0, 1, 2, 3)


def test_unseen_token_is_unk():
    v = build_vocab(["a a a"])
    assert v.encode("a zebra") == [SOS_ID, v.id("a"), UNK_ID, EOS_ID]


def test_id_order_frequency_then_alpha():
    v = build_vocab(["c c c b b b b a a a"])
    assert v.tokens[4:] == ["b", "a", "c"]


def test_empty_corpus():
    with pytest.raises(ContractError):
        build_vocab([])


def test_deid_tokens_are_stripped():
    assert tokenize("The XXXX lung has a2b nodule 3 mm, xxxx1 Stable.") == ["the", "lung", "has", "nodule", "3",
                                                                          "mm", "stable"]


def test_encode_shape_contract():
    v = build_vocab(["a b c"] * 3)
    ids = v.encode("a b c a b", max_len=5, pad_to=8)
    assert ids == [SOS_ID, v.id("a"), v.id("b"), v.id("c"), EOS_ID, 0, 0, 0]
    assert ids.count(EOS_ID) == 1
    with pytest.raises(ContractError):
        v.encode("a b c", pad_to=3)


def test_vocab_bijection_and_bad_ids():
    v = build_vocab(["p q r s"] * 3)
    assert all(v.id(v.token(i)) == i for i in range(len(v)))
    with pytest.raises(VocabularyError):
        v.token(len(v))
    with pytest.raises(ContractError):
        Vocabulary(["a", "b", "c", "d"])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["a", "dim", "circle", "in", "the", "top-left", "x-ray", "lung's"]), min_size=1,
                max_size=12))
def test_tokenize_detokenize_round_trip(words):
    v = build_vocab([" ".join(words)] * 3)
    text = " ".join(words)
    assert v.decode(v.encode(text)) == text
    assert v.decode(v.encode("  " + text.upper() + "  ")) == text


def test_decode_stops_at_eos():
    v = build_vocab(["a b"] * 3, min_freq=1)
    assert v.decode([SOS_ID, v.id("a"), EOS_ID, v.id("b")]) == "a"


# -- synthetic corpus ----------------------------------------------------------------

def test_caption_template():
    assert caption_for("circle", "top-left", "dim") == "a dim circle in the top-left"


def test_classes_cover_every_combination():
    assert len(CLASSES) == 30 and len(set(CLASSES)) == 30


def test_n30_covers_each_class_once(tmp_path):
    root = generate_synthetic(SyntheticSpec(32, 1), 30, tmp_path)
    texts = [r["text"] for r in read_captions(root / "captions.jsonl")]
    assert sorted(texts) == sorted(caption_for(*c) for c in CLASSES)


def test_split_counts():
    for n in (100, 1000):
        counts = Counter(split_assignment(n, 7))
        assert counts == {"train": n * 8 // 10, "val": n // 10, "test": n // 10}


def test_split_is_pure_function_of_seed_and_index():
    assert split_assignment(50, 3) == split_assignment(50, 3)
    assert split_assignment(50, 3) != split_assignment(50, 4)


def test_same_seed_is_byte_identical(tmp_path):
    a = generate_synthetic(SyntheticSpec(32, 5), 40, tmp_path / "a")
    b = generate_synthetic(SyntheticSpec(32, 5), 40, tmp_path / "b")
    c = generate_synthetic(SyntheticSpec(32, 6), 40, tmp_path / "c")
    assert tree_digest(a) == tree_digest(b) != tree_digest(c)


def test_shape_templates_do_not_overlap():
    renders = {c: render_shape(*c) > 0 for c in CLASSES}
    for (s1, p1, i1), m1 in renders.items():
        for (s2, p2, i2), m2 in renders.items():
            if (s1, p1) != (s2, p2):
                assert not np.array_equal(m1, m2)
    # intensity is the only difference between dim and bright renders
    dim = render_shape("cross", "center", "dim")
    bright = render_shape("cross", "center", "bright")
    assert np.array_equal(dim > 0, bright > 0) and dim.max() < bright.max()


def test_round_trip_captions(small_corpus):
    data = load_dataset(small_corpus)
    for i, ex in enumerate(data):
        assert ex.text == caption_for(*CLASSES[i % 30])
        assert ex.image.shape == (3, 32, 32)
        assert 0.0 <= ex.image.min() and ex.image.max() <= 1.0
        assert ex.ids[0] == SOS_ID and ex.ids[-1] == EOS_ID


def test_full_vocab_coverage_at_n90(tmp_path):
    root = generate_synthetic(SyntheticSpec(32, 0), 90, tmp_path)
    vocab = json.loads((root / "vocab.json").read_text())
    assert vocab["min_freq"] == 3
    data = load_dataset(root)
    assert all(UNK_ID not in ex.ids for ex in data)


def test_nonpositive_n(tmp_path):
    with pytest.raises(ContractError):
        generate_synthetic(SyntheticSpec(), 0, tmp_path)


def test_unwritable_path(tmp_path):
    blocker = tmp_path / "f"
    blocker.write_text("")
    with pytest.raises(OSError):
        generate_synthetic(SyntheticSpec(), 3, blocker / "sub")


# -- loading -------------------------------------------------------------------------

def test_all_white_pgm(tmp_path):
    write_pgm(tmp_path / "w.pgm", np.full((4, 6), 255))
    img = load_image(tmp_path / "w.pgm")
    assert img.shape == (3, 4, 6)
    assert np.all(img == 1.0)


def test_pgm_with_comment_header(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 51]))
    np.testing.assert_allclose(load_image(p)[0], [[0.0, 0.2]])


def test_not_a_pgm(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(DataLoadError, match="P2"):
        load_image(p)


def _copy_corpus(src, dst):
    import shutil
    shutil.copytree(src, dst)
    return dst


def test_malformed_jsonl_line(small_corpus, tmp_path):
    root = _copy_corpus(small_corpus, tmp_path / "c")
    lines = (root / "captions.jsonl").read_text().splitlines()
    lines[4] = '{"id": "000004", "text": '
    (root / "captions.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(DataLoadError, match=":5:"):
        load_dataset(root)


def test_missing_image_names_line(small_corpus, tmp_path):
    root = _copy_corpus(small_corpus, tmp_path / "c")
    (root / "images" / "000002.pgm").unlink()
    with pytest.raises(DataLoadError, match=r"captions.jsonl:3: image"):
        load_dataset(root)


def test_missing_fields(tmp_path):
    (tmp_path / "captions.jsonl").write_text('{"id": "1"}\n')
    with pytest.raises(DataLoadError, match=":1:"):
        read_captions(tmp_path / "captions.jsonl")


def test_split_filter_and_batches(small_corpus):
    data = load_dataset(small_corpus, splits=["val", "test"])
    assert {ex.split for ex in data} <= {"val", "test"}
    full = load_dataset(small_corpus)
    assert len(full.split("train")) == 48
    plain = full.batches(16)
    assert plain[0] == list(range(16)) and len(plain) == 4
    shuffled = full.batches(16, seed=1, epoch=0)
    assert sorted(sum(shuffled, [])) == list(range(60))
    assert shuffled == full.batches(16, seed=1, epoch=0) != full.batches(16, seed=1, epoch=1)


def test_batch_pads_to_longest(small_corpus):
    data = load_dataset(small_corpus, max_len=5)
    images, ids = data.batch([0, 1, 2])
    assert images.shape == (3, 3, 32, 32)
    assert ids.shape == (3, 5)
    assert np.all(ids[:, 0] == SOS_ID) and np.all(ids[:, -1] == EOS_ID)
