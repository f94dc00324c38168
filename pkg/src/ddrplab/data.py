"""Word-level corpora: plain-text ingestion, synthetic directional corpora and
padded batch sampling."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
N_RESERVED = len(RESERVED)
MIN_DOC_LEN = 8

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_DOC_SPLIT_RE = re.compile(r"\n\s*\n")

SYNTH_PRESETS = ("copy-forward", "copy-backward", "copy-mixed", "bracket-match")
BRACKETS = (("(", ")"), ("[", "]"), ("{", "}"))


def tokenize(text: str) -> list[str]:
    """Lowercase, split into runs of word characters and single punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Corpus:
    documents: list[np.ndarray]
    word_ids: list[np.ndarray]
    vocab: list[str]
    meta: dict = field(default_factory=dict)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def token_to_id(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.vocab)}

    def decode(self, ids) -> list[str]:
        return [self.vocab[i] for i in ids]

    def to_text(self) -> str:
        return "\n\n".join(" ".join(self.decode(doc)) for doc in self.documents) + "\n"

    def unigram_entropy(self) -> float:
        """Entropy (nats) of the corpus token distribution."""
        counts = np.bincount(np.concatenate(self.documents), minlength=self.vocab_size)
        p = counts[counts > 0] / counts.sum()
        return float(-(p * np.log(p)).sum())

    def __len__(self) -> int:
        return len(self.documents)


def build_corpus(text: str, vocab_cap: int, min_doc_len: int = MIN_DOC_LEN, seed: int = 0) -> Corpus:
    """Blank-line separated documents -> word-level corpus.

    The vocabulary holds the reserved tokens followed by the most frequent
    words (ties broken alphabetically) up to ``vocab_cap`` entries; other
    words map to ``[UNK]``. Documents with fewer than ``min_doc_len`` tokens
    are dropped. ``seed`` is accepted for interface symmetry; construction is
    deterministic regardless.
    """
    del seed
    if vocab_cap < N_RESERVED:
        raise ConfigError(f"vocab_cap={vocab_cap} is smaller than the {N_RESERVED} reserved tokens")
    blocks = [b for b in _DOC_SPLIT_RE.split(text.strip()) if b.strip()]
    if not blocks:
        raise InputError("empty text source")
    docs = [toks for toks in (tokenize(b) for b in blocks) if len(toks) >= min_doc_len]
    if not docs:
        raise InputError(f"no document has at least {min_doc_len} tokens")
    counts = Counter(t for doc in docs for t in doc)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    vocab = list(RESERVED) + [w for w, _ in ranked[: vocab_cap - N_RESERVED]]
    lookup = {t: i for i, t in enumerate(vocab)}
    ids = [np.array([lookup.get(t, UNK) for t in doc], dtype=np.int64) for doc in docs]
    return Corpus(ids, [np.arange(len(d)) for d in ids], vocab, {"source": "text"})


# -- synthetic corpora -----------------------------------------------------------------------


def _copy_doc(rng, length: int, k: int, n_content: int, perm: np.ndarray, noise: float) -> np.ndarray:
    x = rng.integers(0, n_content, size=length)
    for i in range(k, length):
        if rng.random() >= noise:
            x[i] = perm[x[i - k]]
    return x


def _bracket_doc(rng, length: int, n_content: int, p_open: float = 0.45, p_filler: float = 0.3):
    """Balanced bracket sequence with filler tokens.

    Returns (symbols, pairs) where symbols are strings and ``pairs`` lists
    ``(open_pos, close_pos)``.
    """
    out: list[str] = []
    stack: list[tuple[int, int]] = []
    pairs = []
    while len(out) < length:
        remaining = length - len(out)
        if len(stack) >= remaining:
            kind, pos = stack.pop()
            pairs.append((pos, len(out)))
            out.append(BRACKETS[kind][1])
            continue
        u = rng.random()
        if u < p_filler:
            out.append(f"t{rng.integers(0, n_content)}")
        elif u < p_filler + (1 - p_filler) * p_open and len(stack) + 1 < remaining:
            kind = int(rng.integers(0, len(BRACKETS)))
            stack.append((kind, len(out)))
            out.append(BRACKETS[kind][0])
        elif stack:
            kind, pos = stack.pop()
            pairs.append((pos, len(out)))
            out.append(BRACKETS[kind][1])
        else:
            out.append(f"t{rng.integers(0, n_content)}")
    return out, pairs


def synth_directional_corpus(
    preset: str,
    size: int,
    seed: int,
    length: int = 32,
    n_content: int = 40,
    distances: tuple[int, ...] = (1, 2, 3, 4),
    noise: float = 0.1,
) -> Corpus:
    """Synthetic documents whose tokens are predictable from a fixed direction.

    ``copy-forward``: for ``i >= k`` token ``i`` is ``perm[token i-k]`` with
    probability ``1 - noise`` (else uniform); ``k`` is drawn per document from
    ``distances``. ``copy-backward`` reverses such documents so each token is
    determined by the one ``k`` positions later. ``copy-mixed`` draws either
    direction per document. ``bracket-match`` emits balanced typed brackets
    interleaved with filler; a closing bracket is determined by its opener.

    ``meta`` records per-document ``distance`` and ``direction`` (copy
    presets) or ``pairs`` (bracket preset), plus the permutation.
    """
    if preset not in SYNTH_PRESETS:
        raise ConfigError(f"unknown synthetic preset {preset!r}; expected one of {SYNTH_PRESETS}")
    if size < 1 or length < 2:
        raise ConfigError("size must be >= 1 and length >= 2")
    rng = np.random.default_rng(seed)
    content = [f"t{i}" for i in range(n_content)]
    vocab = list(RESERVED) + content
    meta: dict = {"preset": preset, "seed": seed, "length": length, "noise": noise}

    if preset == "bracket-match":
        vocab += [b for pair in BRACKETS for b in pair]
        lookup = {t: i for i, t in enumerate(vocab)}
        docs, all_pairs = [], []
        for _ in range(size):
            symbols, pairs = _bracket_doc(rng, length, n_content)
            docs.append(np.array([lookup[s] for s in symbols], dtype=np.int64))
            all_pairs.append(pairs)
        meta["pairs"] = all_pairs
        return Corpus(docs, [np.arange(length) for _ in docs], vocab, meta)

    perm = rng.permutation(n_content)
    meta["perm"] = perm.tolist()
    docs, dists, dirs = [], [], []
    for _ in range(size):
        k = int(rng.choice(distances))
        x = _copy_doc(rng, length, k, n_content, perm, noise)
        direction = preset
        if preset == "copy-mixed":
            direction = "copy-forward" if rng.random() < 0.5 else "copy-backward"
        if direction == "copy-backward":
            x = x[::-1].copy()
        docs.append(x + N_RESERVED)
        dists.append(k)
        dirs.append(direction)
    meta["distance"] = dists
    meta["direction"] = dirs
    return Corpus(docs, [np.arange(length) for _ in docs], vocab, meta)


# -- batching ----------------------------------------------------------------------------------


@dataclass
class Batch:
    ids: np.ndarray  # (B, S)
    word_ids: np.ndarray  # (B, S), -1 on padding
    valid: np.ndarray  # (B, S) bool


def make_batch(corpus: Corpus, rng: np.random.Generator, batch_size: int, seq_len: int) -> Batch:
    """Sample documents, crop each to a random window of ``seq_len`` and pad the tail."""
    ids = np.full((batch_size, seq_len), PAD, dtype=np.int64)
    words = np.full((batch_size, seq_len), -1, dtype=np.int64)
    picks = rng.integers(0, len(corpus), size=batch_size)
    for b, d in enumerate(picks):
        doc, wid = corpus.documents[d], corpus.word_ids[d]
        start = 0
        if len(doc) > seq_len:
            start = int(rng.integers(0, len(doc) - seq_len + 1))
        n = min(seq_len, len(doc))
        ids[b, :n] = doc[start : start + n]
        w = wid[start : start + n]
        words[b, :n] = w - w[0]
    return Batch(ids, words, words >= 0)


def eval_sentences(corpus: Corpus, seq_len: int) -> list[np.ndarray]:
    """Leading ``seq_len`` window of every document."""
    return [doc[:seq_len] for doc in corpus.documents]
