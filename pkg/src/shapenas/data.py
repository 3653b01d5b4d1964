"""Corpus and vocabulary handling.

File formats: a corpus is UTF-8 plain text with one document per line; a
vocab file holds one token per line where the line number is the id and the
first five ids are the fixed specials below.
"""

from dataclasses import dataclass
from collections import Counter

import numpy as np

from .errors import ConfigError, DataError

SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
NUM_SPECIALS = len(SPECIALS)


def build_vocab(corpus_path, vocab_size):
    """Most frequent tokens (ties broken lexicographically) after specials."""
    if vocab_size < NUM_SPECIALS + 1:
        raise ConfigError(
            f"vocab_size must be at least {NUM_SPECIALS + 1} "
            "(specials plus one token)"
        )
    counts = Counter()
    with open(corpus_path, encoding="utf-8") as f:
        for line in f:
            counts.update(line.split())
    if not counts:
        raise DataError(f"corpus {corpus_path} contains no tokens")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: vocab_size - NUM_SPECIALS]]
    return list(SPECIALS) + kept


def write_vocab(tokens, path):
    with open(path, "w", encoding="utf-8") as f:
        for tok in tokens:
            f.write(tok + "\n")


class Vocab:
    def __init__(self, tokens):
        if tuple(tokens[:NUM_SPECIALS]) != SPECIALS:
            raise DataError("vocab file does not start with the fixed specials")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("vocab file contains duplicate tokens")

    def __len__(self):
        return len(self.tokens)

    def encode(self, words):
        idx = self.index
        return [idx.get(w, UNK_ID) for w in words]

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        if not tokens:
            raise DataError(f"vocab file {path} is empty")
        return cls(tokens)


def encode_corpus(corpus_path, vocab):
    """Token id stream: every line becomes [CLS] ids... [SEP]."""
    ids = []
    with open(corpus_path, encoding="utf-8") as f:
        for line in f:
            words = line.split()
            if not words:
                continue
            ids.append(CLS_ID)
            ids.extend(vocab.encode(words))
            ids.append(SEP_ID)
    if not ids:
        raise DataError(f"corpus {corpus_path} contains no tokens")
    return np.asarray(ids, dtype=np.int64)


def rows_from_stream(stream, seq_len):
    """Chunk a token stream into full (n, seq_len) rows, dropping the tail."""
    n = len(stream) // seq_len
    if n == 0:
        raise DataError(
            f"stream of {len(stream)} tokens is shorter than one row "
            f"of {seq_len}"
        )
    return stream[: n * seq_len].reshape(n, seq_len)


@dataclass
class TokenizedCorpus:
    """Row-chunked token ids with a held-out tail reserved for evaluation."""

    train_rows: np.ndarray
    eval_rows: np.ndarray


def prepare_corpus(corpus_path, vocab, seq_len, eval_rows):
    stream = encode_corpus(corpus_path, vocab)
    rows = rows_from_stream(stream, seq_len)
    if len(rows) <= eval_rows:
        raise DataError(
            f"corpus yields only {len(rows)} rows; need more than "
            f"{eval_rows} to hold out an eval set"
        )
    return TokenizedCorpus(
        train_rows=rows[: len(rows) - eval_rows],
        eval_rows=rows[len(rows) - eval_rows:],
    )


_CONSONANTS = "bcdfglmnprstvz"
_VOWELS = "aeiou"


def _word_list(n_words):
    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    words = []
    i = 0
    while len(words) < n_words:
        a, b = divmod(i, len(syllables))
        word = syllables[a % len(syllables)] + syllables[b]
        if a >= len(syllables):
            word += syllables[(a + b) % len(syllables)]
        words.append(word)
        i += 1
    return words


def generate_corpus(path, target_bytes=1_000_000, seed=0, n_words=2400,
                    branching=24):
    """Write a synthetic corpus with first-order word structure.

    Words follow a Zipf marginal and a sparse random transition table, so
    masked tokens are genuinely predictable from context and larger models
    have something to gain. One document per line.
    """
    rng = np.random.default_rng(seed)
    words = _word_list(n_words)
    ranks = np.arange(1, n_words + 1, dtype=np.float64)
    marginal = 1.0 / ranks ** 1.05
    marginal /= marginal.sum()
    successors = rng.choice(n_words, size=(n_words, branching), p=marginal)
    weights = rng.random((n_words, branching)) + 0.1
    weights /= weights.sum(axis=1, keepdims=True)
    cumweights = np.cumsum(weights, axis=1)

    written = 0
    with open(path, "w", encoding="utf-8") as f:
        while written < target_bytes:
            length = int(rng.integers(30, 120))
            cur = int(rng.choice(n_words, p=marginal))
            doc = [words[cur]]
            for _ in range(length - 1):
                r = rng.random()
                j = int(np.searchsorted(cumweights[cur], r))
                cur = int(successors[cur, min(j, branching - 1)])
                doc.append(words[cur])
            line = " ".join(doc) + "\n"
            f.write(line)
            written += len(line.encode("utf-8"))
    return written
