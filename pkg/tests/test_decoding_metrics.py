import hashlib
import itertools
import math
from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_model_cfg
from micar.data import EOS_ID, SOS_ID
from micar.decoding import Beam, ModelStepper, beam_search, generate, greedy_decode
from micar.errors import ContractError
from micar.metrics import average_bleu, bleu_n, evaluate_corpus, lcs_length, rouge_l
from micar.model import MicarVLMoE

A, B = 3, 4


def table_step(table, vocab=5, floor=1e-9):
    """Step function from a prefix -> {token: prob} table; unlisted prefixes emit <eos>."""
    def step(prefixes):
        rows = []
        for p in prefixes:
            probs = np.full(vocab, floor)
            for tok, pr in table.get(tuple(p), {EOS_ID: 1.0}).items():
                probs[tok] = pr
            rows.append(np.log(probs / probs.sum()))
        return np.array(rows)
    return step


TOY = {
    (SOS_ID,): {A: 0.6, B: 0.4},
    (SOS_ID, A): {A: 0.4, B: 0.3, EOS_ID: 0.3},
    (SOS_ID, B): {A: 0.95, B: 0.05},
}


def seq_logprob(step, seq, banned=(0, 1)):
    lp = 0.0
    for i in range(1, len(seq)):
        row = step([seq[:i]])[0].copy()
        row[list(banned)] = -np.inf
        lp += row[seq[i]]
    return lp


def exhaustive_best(step, max_len, choices=(2, 3, 4)):
    best = None
    for n in range(1, max_len):
        for tail in itertools.product(choices, repeat=n):
            if EOS_ID in tail[:-1] or (tail[-1] != EOS_ID and n != max_len - 1):
                continue
            seq = (SOS_ID,) + tail
            b = Beam(seq, seq_logprob(step, list(seq)))
            key = (-b.normalized(), seq)
            if best is None or key < best[0]:
                best = (key, b)
    return best[1]


def random_toy(seed, sharp=1.5):
    def step(prefixes):
        rows = []
        for p in prefixes:
            h = int(hashlib.sha256(f"{seed}:{tuple(p)}".encode()).hexdigest()[:8], 16)
            z = np.random.default_rng(h).normal(0, sharp, size=5)
            rows.append(z - np.log(np.exp(z).sum()))
        return np.array(rows)
    return step


# -- beam search ---------------------------------------------------------------------

def test_greedy_is_suboptimal_on_toy_but_beam_recovers_optimum():
    step = table_step(TOY)
    assert greedy_decode(step, 5) == [SOS_ID, A, A, EOS_ID]
    best = exhaustive_best(step, 5)
    assert list(best.tokens) == [SOS_ID, B, A, EOS_ID]
    for width in (2, 3):
        assert beam_search(step, width, 5) == [SOS_ID, B, A, EOS_ID]


def test_width_one_is_greedy_on_toys():
    for seed in range(40):
        step = random_toy(seed)
        assert beam_search(step, 1, 6) == greedy_decode(step, 6)


def test_width_one_is_greedy_on_model():
    cfg = tiny_model_cfg(init_std=None)
    model = MicarVLMoE(cfg, seed=2)
    for k in range(3):
        img = np.random.default_rng(k).uniform(size=(3, 32, 32))
        stepper = ModelStepper(model, img)
        assert generate(model, img, width=1) == greedy_decode(stepper, cfg.max_len)


def test_eos_first_gives_empty_report():
    step = table_step({(SOS_ID,): {EOS_ID: 0.7, A: 0.3}})
    assert beam_search(step, 3, 10) == [SOS_ID, EOS_ID]
    assert greedy_decode(step, 10) == [SOS_ID, EOS_ID]


def test_max_len_cuts_unfinished_beams():
    step = table_step({(SOS_ID,) + (A,) * i: {A: 0.99} for i in range(10)})
    out = beam_search(step, 3, 4)
    assert out == [SOS_ID, A, A, A]


def test_banned_tokens_never_emitted():
    step = table_step({(SOS_ID,): {3: 0.9, 4: 0.1}, (SOS_ID, 4): {EOS_ID: 1.0}})
    assert beam_search(step, 2, 5, banned=(0, 1, 3)) == [SOS_ID, 4, EOS_ID]


def test_ties_are_deterministic():
    step = table_step({(SOS_ID,): {A: 0.5, B: 0.5}})
    assert beam_search(step, 2, 5) == [SOS_ID, A, EOS_ID]
    assert beam_search(step, 1, 5) == [SOS_ID, A, EOS_ID]


def test_bad_width():
    with pytest.raises(ValueError):
        beam_search(table_step(TOY), 0, 5)


def test_wider_beam_never_scores_lower_on_enumerable_toys():
    # compared on the length-normalised score the beam ranks by
    for seed in range(60):
        step = random_toy(seed)
        best = exhaustive_best(step, 5).normalized()
        scores = []
        for w in (1, 2, 3):
            seq = beam_search(step, w, 5)
            scores.append(Beam(tuple(seq), seq_logprob(step, seq)).normalized())
        assert scores[0] <= scores[1] + 1e-12 and scores[1] <= scores[2] + 1e-12, (seed, scores)
        assert scores[2] <= best + 1e-12


# -- BLEU ----------------------------------------------------------------------------

def test_bleu_hand_value():
    assert abs(bleu_n("the cat sat".split(), "the cat sat down".split(), 1) - math.exp(1 - 4 / 3)) < 1e-12
    assert abs(bleu_n("the cat sat".split(), "the cat sat down".split(), 1) - 0.7165) < 1e-3


def test_bleu_identity_and_zero():
    s = "a dim cross in the center".split()
    assert all(bleu_n(s, s, n) == 1.0 for n in range(1, 5))
    assert bleu_n("x y".split(), "a b c".split(), 1) == 0.0
    assert bleu_n([], s, 1) == 0.0


def test_bleu_clips_repeats():
    # "the the the" against "the cat": one clipped match of three, BP = 1
    assert abs(bleu_n(["the"] * 3, ["the", "cat"], 1) - 1 / 3) < 1e-12


def test_bleu_bad_order():
    with pytest.raises(ContractError):
        bleu_n(["a"], ["a"], 5)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=15),
       st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=15))
def test_metric_ranges_and_identity(x, y):
    for n in range(1, 5):
        assert 0.0 <= bleu_n(x, y, n) <= 1.0
        if len(x) >= n:
            assert bleu_n(x, x, n) == 1.0
    assert rouge_l(x, x) == 1.0
    assert 0.0 <= rouge_l(x, y) <= 1.0


# -- ROUGE-L -------------------------------------------------------------------------

def test_rouge_hand_values():
    assert abs(rouge_l("the cat".split(), "the dog".split()) - 0.5) < 1e-9
    assert rouge_l("a b".split(), "c d".split()) == 0.0
    assert rouge_l("a b c".split(), "a b c".split()) == 1.0
    # P = 2/2, R = 2/4, beta^2 = 1.44
    p, r = 1.0, 0.5
    assert abs(rouge_l("a b".split(), "a x b y".split()) - 2.44 * p * r / (r + 1.44 * p)) < 1e-12


def test_lcs():
    assert lcs_length("abcbdab", "bdcaba") == 4
    assert lcs_length("", "abc") == 0


def test_rouge_empty_reference():
    with pytest.raises(ContractError):
        rouge_l(["a"], [])


# -- corpus --------------------------------------------------------------------------

def test_identity_corpus():
    refs = {"1": "a dim circle".split(), "2": "a bright square in the center".split()}
    rep = evaluate_corpus(refs, refs)
    assert (rep.bleu_1, rep.bleu_2, rep.bleu_3, rep.bleu_4, rep.avg_bleu, rep.rouge_l) == (1, 1, 1, 1, 1, 1)


def test_single_example_corpus_equals_sentence():
    c, r = "the cat sat on a mat".split(), "the cat sat on the mat today".split()
    rep = evaluate_corpus({"x": c}, {"x": r})
    for n in range(1, 5):
        assert abs(getattr(rep, f"bleu_{n}") - bleu_n(c, r, n)) < 1e-15
    assert rep.rouge_l == rouge_l(c, r)
    assert rep.per_example["x"]["bleu_2"] == bleu_n(c, r, 2)


def test_corpus_bleu_pools_counts():
    preds = {"1": ["a", "b"], "2": ["c", "d", "e", "f"]}
    refs = {"1": ["a", "b"], "2": ["c", "x", "y", "z"]}
    rep = evaluate_corpus(preds, refs)
    assert abs(rep.bleu_1 - 3 / 6) < 1e-12
    assert rep.bleu_1 != (bleu_n(preds["1"], refs["1"], 1) + bleu_n(preds["2"], refs["2"], 1)) / 2


def test_average_bleu_arithmetic():
    # 0.6375 sits exactly on the edge of 0.638 +- 5e-4, so do the arithmetic in exact decimals
    avg = average_bleu([Decimal("0.744"), Decimal("0.662"), Decimal("0.599"), Decimal("0.545")])
    assert avg == Decimal("0.6375")
    assert abs(avg - Decimal("0.638")) <= Decimal("5e-4")
    preds = {"1": "a b c d e".split()}
    rep = evaluate_corpus(preds, {"1": "a b c d x".split()})
    assert abs(rep.avg_bleu - np.mean([rep.bleu_1, rep.bleu_2, rep.bleu_3, rep.bleu_4])) < 1e-15


def test_id_mismatch_lists_ids():
    with pytest.raises(ContractError, match="missing predictions for ids: 2, 3"):
        evaluate_corpus({"1": ["a"]}, {"1": ["a"], "2": ["b"], "3": ["c"]})
    with pytest.raises(ContractError, match="no reference"):
        evaluate_corpus({"1": ["a"], "9": ["b"]}, {"1": ["a"]})


def test_empty_corpus():
    with pytest.raises(ContractError):
        evaluate_corpus({}, {})
