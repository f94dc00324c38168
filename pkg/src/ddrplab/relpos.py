"""Attention logits for the five position encodings.

Kinds:

* ``absolute``: learned absolute embeddings added to the input, vanilla
  attention ``QK^T / sqrt(d)``.
* ``shaw``: a learned key-side vector per clipped offset (BERT-R).
* ``tupe``: untied content and position correlations plus a scalar bias per
  clipped offset, scaled by ``sqrt(2d)``.
* ``deberta``: content-to-position and position-to-content terms, scaled by
  ``sqrt(3d)``.
* ``ddrp``: the relative key vector is factored into a direction row (equal,
  before, after) times a distance row, followed by a shared projection.

All attention functions take per-head ``Q, K, V`` of shape ``(..., S, d)`` and
return pre-softmax logits, probabilities and the attended values. Relative
terms are computed as ``Q @ table^T`` followed by a gather on the offset
index, so the per-pair vectors are never materialised.

Two clip conventions are in play. Offsets index the ``2 r_s`` row tables
(shaw, tupe bias, deberta) after clipping into ``[-r_s, r_s - 1]``. Distances
index the ``r_s`` row DDRP table, so offsets are clipped symmetrically into
``[-(r_s - 1), r_s - 1]`` before taking the absolute value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, gather_last, matmul, softmax

KINDS = ("absolute", "shaw", "tupe", "deberta", "ddrp")
MASK_VALUE = -1e9

# direction rows of the DDRP direction table
DIR_EQUAL, DIR_BEFORE, DIR_AFTER = 0, 1, 2


def clip_offset(x, r_s: int):
    """Clip a relative offset into ``[-r_s, r_s - 1]``."""
    return np.clip(x, -r_s, r_s - 1)


def clip_distance(x, r_s: int):
    """Clip a relative offset into ``[-(r_s - 1), r_s - 1]``."""
    return np.clip(x, -(r_s - 1), r_s - 1)


def sigma_index(i: int, j: int, r_s: int) -> int:
    return int(clip_offset(i - j, r_s)) + r_s


def delta_rho(i: int, j: int, r_s: int) -> tuple[int, int]:
    diff = i - j
    rho = DIR_EQUAL if diff == 0 else (DIR_BEFORE if diff < 0 else DIR_AFTER)
    return abs(int(clip_distance(diff, r_s))), rho


@dataclass(frozen=True)
class RelPosIndexer:
    r_s: int = 64

    def __post_init__(self):
        if self.r_s < 1:
            raise ConfigError(f"r_s must be positive, got {self.r_s}")

    def sigma(self, i: int, j: int) -> int:
        return sigma_index(i, j, self.r_s)

    def delta_rho(self, i: int, j: int) -> tuple[int, int]:
        return delta_rho(i, j, self.r_s)

    def sigma_matrix(self, S: int) -> np.ndarray:
        return _sigma_matrix(S, self.r_s)

    def ddrp_matrix(self, S: int) -> np.ndarray:
        """Flat index ``3 * delta + rho`` into a ``(r_s * 3, d)`` table."""
        return _ddrp_matrix(S, self.r_s)


@lru_cache(maxsize=64)
def _sigma_matrix(S: int, r_s: int) -> np.ndarray:
    pos = np.arange(S)
    out = clip_offset(pos[:, None] - pos[None, :], r_s) + r_s
    out.setflags(write=False)
    return out


@lru_cache(maxsize=64)
def _ddrp_matrix(S: int, r_s: int) -> np.ndarray:
    pos = np.arange(S)
    diff = pos[:, None] - pos[None, :]
    delta = np.abs(clip_distance(diff, r_s))
    rho = np.where(diff == 0, DIR_EQUAL, np.where(diff < 0, DIR_BEFORE, DIR_AFTER))
    out = 3 * delta + rho
    out.setflags(write=False)
    return out


@dataclass
class EncodingParams:
    """Position parameters of one sharing group.

    ``tensors`` keys per kind: absolute ``P``; shaw ``Kr``; tupe ``P``,
    ``WPQ``, ``WPK``, ``b``; deberta ``Kr``, ``Qr``; ddrp ``Ddir``, ``Krd``,
    ``Wrd``.
    """

    kind: str
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]


PARAM_SHAPES = {
    "absolute": lambda d, D, r_s, r_a: {"P": (r_a, D)},
    "shaw": lambda d, D, r_s, r_a: {"Kr": (2 * r_s, d)},
    "tupe": lambda d, D, r_s, r_a: {
        "P": (r_a, D), "WPQ": (D, d), "WPK": (D, d), "b": (2 * r_s,)
    },
    "deberta": lambda d, D, r_s, r_a: {"Kr": (2 * r_s, d), "Qr": (2 * r_s, d)},
    "ddrp": lambda d, D, r_s, r_a: {"Ddir": (3, d), "Krd": (r_s, d), "Wrd": (d, d)},
}


def encoding_shapes(kind: str, d: int, D: int, r_s: int, r_a: int) -> dict[str, tuple]:
    if kind not in PARAM_SHAPES:
        raise ConfigError(f"unknown encoding kind {kind!r}; expected one of {KINDS}")
    return PARAM_SHAPES[kind](d, D, r_s, r_a)


def extra_param_count(kind: str, d: int, r_s: int, r_a: int = 512, D: int = 768) -> int:
    """Number of position parameters one sharing group adds for ``kind``."""
    shapes = encoding_shapes(kind, d, D, r_s, r_a)
    return int(sum(math.prod(s) for s in shapes.values()))


def ddrp_vector_count(r_s: int) -> int:
    """Stored relative vectors in a DDRP group: 3 direction rows plus ``r_s`` distance rows."""
    return 3 + r_s


@dataclass
class AttentionOutput:
    weights: Tensor  # pre-softmax logits A
    probs: Tensor
    output: Tensor


def ddrp_table(Ddir: Tensor, Krd: Tensor, Wrd: Tensor) -> Tensor:
    """``table[delta, rho] = (Ddir[rho] * Krd[delta]) @ Wrd``, shape ``(r_s, 3, d)``."""
    if Ddir.shape[0] != 3 or Ddir.shape[-1] != Krd.shape[-1] or Wrd.shape[0] != Krd.shape[-1]:
        raise ShapeError(f"bad DDRP shapes {Ddir.shape}, {Krd.shape}, {Wrd.shape}")
    r_s, d = Krd.shape
    prod = Ddir.reshape(1, 3, d) * Krd.reshape(r_s, 1, d)
    return matmul(prod, Wrd)


def _rel_scores(X: Tensor, table: Tensor, index: np.ndarray) -> Tensor:
    """``out[..., i, j] = X[..., i, :] . table[index[i, j], :]``.

    Only the table rows actually referenced are multiplied.
    """
    lo, hi = int(index.min()), int(index.max())
    if lo > 0 or hi < table.shape[0] - 1:
        table = table[lo : hi + 1]
        index = index - lo
    return gather_last(matmul(X, table.T), index)


def _finish(A: Tensor, V: Tensor, key_mask: np.ndarray | None) -> AttentionOutput:
    masked = A
    if key_mask is not None:
        masked = A + np.where(key_mask, 0.0, MASK_VALUE)
    probs = softmax(masked, axis=-1)
    return AttentionOutput(A, probs, matmul(probs, V))


def _check_qkv(Q: Tensor, K: Tensor, V: Tensor) -> None:
    if Q.shape != K.shape or Q.shape[:-1] != V.shape[:-1]:
        raise ShapeError(f"Q/K/V shapes disagree: {Q.shape}, {K.shape}, {V.shape}")


def _empty(Q: Tensor, V: Tensor) -> AttentionOutput:
    lead = Q.shape[:-2]
    A = Tensor(np.zeros(lead + (0, 0)))
    return AttentionOutput(A, Tensor(np.zeros(lead + (0, 0))), Tensor(np.zeros(V.shape)))


def attention_vanilla(Q, K, V, scale: float | None = None, key_mask=None) -> AttentionOutput:
    _check_qkv(Q, K, V)
    if Q.shape[-2] == 0:
        return _empty(Q, V)
    d = Q.shape[-1]
    scale = math.sqrt(d) if scale is None else scale
    return _finish(matmul(Q, K.T) * (1.0 / scale), V, key_mask)


def attention_shaw(Q, K, V, Kr: Tensor, indexer: RelPosIndexer, key_mask=None) -> AttentionOutput:
    _check_qkv(Q, K, V)
    S, d = Q.shape[-2:]
    if S == 0:
        return _empty(Q, V)
    rel = _rel_scores(Q, Kr, indexer.sigma_matrix(S))
    A = (matmul(Q, K.T) + rel) * (1.0 / math.sqrt(d))
    return _finish(A, V, key_mask)


def attention_tupe(
    Q, K, V, P: Tensor, WPQ: Tensor, WPK: Tensor, b: Tensor, indexer: RelPosIndexer, key_mask=None
) -> AttentionOutput:
    _check_qkv(Q, K, V)
    S, d = Q.shape[-2:]
    if S > P.shape[0]:
        raise ConfigError(f"sequence length {S} exceeds absolute table size {P.shape[0]}")
    if S == 0:
        return _empty(Q, V)
    Ps = P[:S]
    QP = matmul(Ps, WPQ)
    KP = matmul(Ps, WPK)
    bias = b[indexer.sigma_matrix(S)]
    A = (matmul(Q, K.T) + matmul(QP, KP.T)) * (1.0 / math.sqrt(2 * d)) + bias
    return _finish(A, V, key_mask)


def attention_deberta(
    Q, K, V, Kr: Tensor, Qr: Tensor, indexer: RelPosIndexer, key_mask=None
) -> AttentionOutput:
    _check_qkv(Q, K, V)
    S, d = Q.shape[-2:]
    if S == 0:
        return _empty(Q, V)
    sig = indexer.sigma_matrix(S)
    c2p = _rel_scores(Q, Kr, sig)
    # p2c[j, i] = K_j . Qr[sigma(j, i)], then transposed into [i, j]
    p2c = _rel_scores(K, Qr, sig).T
    A = (matmul(Q, K.T) + c2p + p2c) * (1.0 / math.sqrt(3 * d))
    return _finish(A, V, key_mask)


def attention_ddrp(Q, K, V, table: Tensor, indexer: RelPosIndexer, key_mask=None) -> AttentionOutput:
    """``table`` is the ``(r_s, 3, d)`` output of :func:`ddrp_table`."""
    _check_qkv(Q, K, V)
    S, d = Q.shape[-2:]
    if S == 0:
        return _empty(Q, V)
    r_s = table.shape[0]
    if r_s != indexer.r_s:
        raise ShapeError(f"table has {r_s} distance rows, indexer expects {indexer.r_s}")
    rel = _rel_scores(Q, table.reshape(3 * r_s, d), indexer.ddrp_matrix(S))
    A = (matmul(Q, K.T) + rel) * (1.0 / math.sqrt(d))
    return _finish(A, V, key_mask)


def attend(kind: str, Q, K, V, params: EncodingParams, indexer: RelPosIndexer,
           key_mask=None, table: Tensor | None = None) -> AttentionOutput:
    """Dispatch on encoding kind. ``table`` lets DDRP callers reuse a prebuilt table."""
    if kind == "absolute":
        return attention_vanilla(Q, K, V, key_mask=key_mask)
    if kind == "shaw":
        return attention_shaw(Q, K, V, params["Kr"], indexer, key_mask)
    if kind == "tupe":
        return attention_tupe(Q, K, V, params["P"], params["WPQ"], params["WPK"], params["b"],
                              indexer, key_mask)
    if kind == "deberta":
        return attention_deberta(Q, K, V, params["Kr"], params["Qr"], indexer, key_mask)
    if kind == "ddrp":
        if table is None:
            table = ddrp_table(params["Ddir"], params["Krd"], params["Wrd"])
        return attention_ddrp(Q, K, V, table, indexer, key_mask)
    raise ConfigError(f"unknown encoding kind {kind!r}")


def content_scale(kind: str, d: int) -> float:
    """Divisor applied to the content term ``QK^T`` for ``kind``."""
    return {"tupe": math.sqrt(2 * d), "deberta": math.sqrt(3 * d)}.get(kind, math.sqrt(d))
