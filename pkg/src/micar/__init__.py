"""Desk-scale vision-language mixture-of-experts report generator built on a small numpy autodiff core."""

from micar.data import Vocabulary, build_vocab, generate_synthetic, load_dataset
from micar.decoding import beam_search, generate, greedy_decode
from micar.metrics import bleu_n, evaluate_corpus, rouge_l
from micar.model import MicarVLMoE, ModelConfig, total_loss

__version__ = "0.1.0"

__all__ = [
    "MicarVLMoE", "ModelConfig", "Vocabulary", "beam_search", "bleu_n", "build_vocab", "evaluate_corpus",
    "generate", "generate_synthetic", "greedy_decode", "load_dataset", "rouge_l", "total_loss",
]
