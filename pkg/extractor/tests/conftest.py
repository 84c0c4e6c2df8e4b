"""Shared fixtures: a tiny OPT checkpoint built on the fly.

The tokenizer is a character-level BPE (no merges), so every multi-letter
word splits into several subwords and the mean-pooling path is exercised
on every sentence. Both artifacts are saved to a temp directory and
loaded back through the same auto classes real checkpoints use.
"""

import os

os.environ.setdefault("HF_HUB_OFFLINE", "1")
os.environ.setdefault("TRANSFORMERS_OFFLINE", "1")
os.environ.setdefault("TOKENIZERS_PARALLELISM", "false")

import pytest
import torch
from tokenizers import Tokenizer, models, pre_tokenizers
from transformers import OPTConfig, OPTModel, PreTrainedTokenizerFast

HIDDEN = 16

SENTENCES = [
    "the dog ran home",
    "a cat sat",
    "x",
    "birds can fly over the old wall",
    "numbers like 12 stay as they are",
    "every big tree fell",
]


def build_vocab() -> dict[str, int]:
    vocab = {"<pad>": 0, "</s>": 1, "<unk>": 2}
    for c in "abcdefghijklmnopqrstuvwxyz0123456789":
        vocab[c] = len(vocab)
    return vocab


@pytest.fixture(scope="session")
def model_dir(tmp_path_factory) -> str:
    path = tmp_path_factory.mktemp("tiny-opt")
    vocab = build_vocab()
    backend = Tokenizer(models.BPE(vocab=vocab, merges=[], unk_token="<unk>"))
    backend.pre_tokenizer = pre_tokenizers.Whitespace()
    tokenizer = PreTrainedTokenizerFast(
        tokenizer_object=backend,
        bos_token="</s>",
        pad_token="<pad>",
        unk_token="<unk>",
    )
    config = OPTConfig(
        vocab_size=len(vocab),
        hidden_size=HIDDEN,
        num_hidden_layers=2,
        num_attention_heads=2,
        ffn_dim=32,
        max_position_embeddings=64,
        word_embed_proj_dim=HIDDEN,
        bos_token_id=vocab["</s>"],
        pad_token_id=vocab["<pad>"],
        eos_token_id=vocab["</s>"],
    )
    torch.manual_seed(0)
    model = OPTModel(config)
    model.eval()
    model.save_pretrained(path)
    tokenizer.save_pretrained(path)
    return str(path)


@pytest.fixture()
def corpus_file(tmp_path) -> str:
    path = tmp_path / "corpus.tokens"
    path.write_text("\n".join(SENTENCES) + "\n", encoding="utf-8")
    return str(path)
