"""Similarity measurements and the up-down triangle statistic.

Everything here is read-only over parameters and runs with graph recording
off; the inputs are plain numpy arrays pulled from forward traces.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, InputError
from .model import ModelConfig, forward, load_checkpoint
from .tensor import COSINE_EPS, no_grad


@dataclass
class SimilarityReport:
    step: int
    token_similarity: float
    head_similarity: float
    sentences: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TriangleReport:
    sentences: int
    matched: int
    percentage: float
    t: float
    ms: int
    literal_ms: bool = False
    group1: int = 0  # model group reported as group 1 (the upper-triangle one)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _pair_mean(X: np.ndarray) -> float:
    norms = np.linalg.norm(X, axis=-1) + COSINE_EPS
    Xn = X / norms[..., None]
    G = Xn @ np.swapaxes(Xn, -1, -2)
    n = X.shape[-2]
    iu = np.triu_indices(n, 1)
    return float(G[..., iu[0], iu[1]].mean())


def token_self_similarity(last_hidden: np.ndarray) -> float | None:
    """Average pairwise cosine between rows; None with fewer than two rows."""
    h = np.asarray(last_hidden, dtype=float)
    if h.shape[0] < 2:
        return None
    return _pair_mean(h)


def head_self_similarity(attn_weights, valid_len: int | None = None) -> float | None:
    """Average pairwise cosine between heads' flattened maps, averaged over layers.

    ``attn_weights`` is a sequence of ``(m, S, S)`` arrays (one per layer) or
    an ``(L, m, S, S)`` array. ``valid_len`` crops every map to its leading
    valid block.
    """
    maps = np.stack([np.asarray(a, dtype=float) for a in attn_weights])
    L, m = maps.shape[:2]
    if m < 2:
        return None
    if valid_len is not None:
        maps = maps[:, :, :valid_len, :valid_len]
    return _pair_mean(maps.reshape(L, m, -1))


def group_attention_map(probs_batch, config: ModelConfig, group: int, ms: int = 64,
                        layer: int | None = None) -> np.ndarray:
    """Mean post-softmax map of one sharing group, cropped or zero-padded to ``ms x ms``.

    ``probs_batch`` is a list (one per sentence) of per-layer ``(N, S, S)``
    arrays. ``layer`` restricts the average to one layer instead of all.
    """
    if config.group_count != 2:
        raise ConfigError("group maps need a model with group_count=2")
    if group not in (0, 1):
        raise ValueError(f"group must be 0 or 1, got {group}")
    n_g = config.heads_per_group
    heads = slice(group * n_g, (group + 1) * n_g)
    acc = np.zeros((ms, ms))
    for layers in probs_batch:
        chosen = layers if layer is None else [layers[layer]]
        for probs in chosen:
            m = np.asarray(probs)[heads].mean(axis=0)
            k = min(ms, m.shape[-1])
            acc[:k, :k] += m[:k, :k] / len(chosen)
    return acc / len(probs_batch)


def triangle_masses(amp: np.ndarray, length: int, ms: int = 64, literal_ms: bool = False) -> tuple[float, float]:
    """(upper, lower) strict-triangle sums over the valid block, each divided by
    the valid length (or by ``ms`` when ``literal_ms``)."""
    n = min(length, ms)
    block = np.asarray(amp)[:n, :n]
    up = float(np.triu(block, 1).sum())
    down = float(np.tril(block, -1).sum())
    denom = ms if literal_ms else n
    return up / denom, down / denom


def count_triangles(map_pairs: Sequence[tuple[np.ndarray, np.ndarray]], lengths: Sequence[int],
                    t: float, ms: int = 64, literal_ms: bool = False,
                    orient: bool = True) -> TriangleReport:
    """Up-down triangle count over per-sentence ``(group0_map, group1_map)`` pairs.

    With ``orient`` the group whose mean upper-triangle mass over the whole
    set is larger is reported as group 1; otherwise model group 0 is group 1.
    """
    if len(map_pairs) == 0:
        raise InputError("triangle count needs at least one sentence")
    masses = np.array([
        [triangle_masses(m, n, ms, literal_ms) for m in pair]
        for pair, n in zip(map_pairs, lengths)
    ])  # (N, 2 groups, [up, down])
    first = 0
    if orient and masses[:, 1, 0].mean() > masses[:, 0, 0].mean():
        first = 1
    second = 1 - first
    hits = (masses[:, first, 0] >= t) & (masses[:, second, 1] >= t)
    matched = int(hits.sum())
    return TriangleReport(len(map_pairs), matched, matched / len(map_pairs), t, ms, literal_ms, first)


def sentence_group_maps(sentences: Iterable[np.ndarray], config: ModelConfig, params,
                        ms: int = 64, layer: int | None = None):
    """Per-sentence group maps and valid lengths from eval-mode forward passes."""
    pairs, lengths = [], []
    with no_grad():
        for ids in sentences:
            ids = np.asarray(ids)[: config.max_len]
            trace = forward(ids, config, params, "eval")
            probs = [p.data for p in trace.attn_probs]
            pairs.append(tuple(group_attention_map([probs], config, g, ms, layer) for g in (0, 1)))
            lengths.append(len(ids))
    return pairs, lengths


def triangle_percentage(sentences, config: ModelConfig, params, t: float = 0.4, ms: int = 64,
                        literal_ms: bool = False, layer: int | None = None) -> TriangleReport:
    sentences = list(sentences)
    if not sentences:
        raise InputError("triangle_percentage needs a non-empty dataset")
    if config.group_count != 2:
        raise ConfigError("triangle_percentage needs a model with group_count=2")
    pairs, lengths = sentence_group_maps(sentences, config, params, ms, layer)
    return count_triangles(pairs, lengths, t, ms, literal_ms)


def sentence_similarities(ids, config: ModelConfig, params, weight_space: str = "pre_softmax"):
    """(f(S), f(H)) for one sentence in eval mode."""
    ids = np.asarray(ids)[: config.max_len]
    with no_grad():
        trace = forward(ids, config, params, "eval")
    maps = trace.attn_weights if weight_space == "pre_softmax" else trace.attn_probs
    return (
        token_self_similarity(trace.last_hidden.data),
        head_self_similarity([a.data for a in maps]),
    )


def evaluate_similarity(sentences, config: ModelConfig, params, step: int = 0,
                        weight_space: str = "pre_softmax") -> SimilarityReport:
    fs, fh = [], []
    for ids in sentences:
        s, h = sentence_similarities(ids, config, params, weight_space)
        if s is not None:
            fs.append(s)
        if h is not None:
            fh.append(h)
    return SimilarityReport(
        step,
        float(np.mean(fs)) if fs else float("nan"),
        float(np.mean(fh)) if fh else float("nan"),
        len(fs),
    )


def sample_sentences(sentences: Sequence, sample_size: int = 5000, seed: int = 0) -> list:
    """Seeded subsample of at most ``sample_size`` sentences, kept in corpus order."""
    n = len(sentences)
    k = min(sample_size, n)
    picks = np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    return [sentences[i] for i in picks]


def similarity_curve(checkpoints: Sequence, sentences: Sequence, sample_size: int = 5000,
                     seed: int = 0, weight_space: str = "pre_softmax") -> list[SimilarityReport]:
    """Evaluate f(S), f(H) at each checkpoint path over one seeded sentence sample."""
    sample = sample_sentences(sentences, sample_size, seed)
    reports = []
    reference = None
    for path in checkpoints:
        ckpt = load_checkpoint(path)
        if reference is None:
            reference = ckpt.config
        elif ckpt.config != reference:
            raise ConfigError(f"checkpoint {path} has a different model config")
        step = int(ckpt.state.get("step", 0))
        reports.append(evaluate_similarity(sample, ckpt.config, ckpt.params, step, weight_space))
    return reports


def format_grid(amp: np.ndarray, precision: int = 6) -> str:
    """Plain-text numeric grid, one row per line, for external plotting."""
    return "\n".join(" ".join(f"{x:.{precision}f}" for x in row) for row in np.asarray(amp))
