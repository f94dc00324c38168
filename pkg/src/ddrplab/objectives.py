"""Masked-LM loss, the token/head cosine-differentiation losses and their
linearly decayed combination.

Degenerate inputs (empty masking plan, fewer than two sampled tokens or heads)
yield a zero loss and bump a counter in :data:`warning_counts` instead of
raising, so a training step can proceed on the remaining terms.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, log_softmax, matmul, normalize_rows, no_grad, where_const

warning_counts: Counter = Counter()

ACTION_MASK, ACTION_RANDOM, ACTION_KEEP = 0, 1, 2


@dataclass
class MaskingPlan:
    positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    actions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    replacements: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def empty(self) -> bool:
        return len(self.positions) == 0

    def apply(self, tokens: np.ndarray) -> np.ndarray:
        """Corrupted copy of ``tokens`` (flat positions index ``tokens.ravel()``)."""
        out = np.array(tokens, copy=True)
        out.reshape(-1)[self.positions] = self.replacements
        return out


def merge_plans(plans: list[MaskingPlan], seq_len: int) -> MaskingPlan:
    """Combine per-row plans into one plan over a flattened ``(B, seq_len)`` batch."""
    if not plans:
        return MaskingPlan()
    return MaskingPlan(
        positions=np.concatenate([p.positions + b * seq_len for b, p in enumerate(plans)]),
        actions=np.concatenate([p.actions for p in plans]),
        labels=np.concatenate([p.labels for p in plans]),
        replacements=np.concatenate([p.replacements for p in plans]),
    )


def apply_whole_word_masking(
    tokens,
    word_ids,
    mask_ratio: float,
    rng: np.random.Generator,
    mask_id: int,
    vocab_size: int,
    random_low: int = 0,
) -> MaskingPlan:
    """Select whole words until ``round(mask_ratio * n_tokens)`` tokens are covered.

    ``word_ids[i]`` names the word token ``i`` belongs to; negative ids mark
    padding. Words are visited in random order and skipped when they would
    overshoot the budget. Each selected token is replaced by ``mask_id``
    (80%), a random id in ``[random_low, vocab_size)`` (10%) or kept (10%).
    """
    tokens = np.asarray(tokens)
    word_ids = np.asarray(word_ids)
    valid = word_ids >= 0
    n_tokens = int(valid.sum())
    if mask_ratio <= 0 or n_tokens == 0:
        return MaskingPlan()
    target = max(1, int(round(mask_ratio * n_tokens)))
    token_pos = np.flatnonzero(valid)
    words, inverse = np.unique(word_ids[valid], return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    members = np.split(token_pos[order], np.cumsum(np.bincount(inverse))[:-1])

    chosen = []
    covered = 0
    for w in rng.permutation(len(words)):
        if covered >= target:
            break
        if covered + len(members[w]) > target:
            continue
        chosen.append(members[w])
        covered += len(members[w])
    if not chosen:
        return MaskingPlan()
    positions = np.sort(np.concatenate(chosen))
    u = rng.random(len(positions))
    random_ids = rng.integers(random_low, vocab_size, size=len(positions))
    actions = np.where(u < 0.8, ACTION_MASK, np.where(u < 0.9, ACTION_RANDOM, ACTION_KEEP))
    labels = tokens[positions]
    replacements = np.where(
        actions == ACTION_MASK, mask_id, np.where(actions == ACTION_RANDOM, random_ids, labels)
    )
    return MaskingPlan(positions, actions, labels, replacements.astype(np.int64))


def mlm_loss(logits: Tensor, plan: MaskingPlan) -> Tensor:
    """Mean cross-entropy over the plan's positions of ``logits.reshape(-1, V)``."""
    if plan.empty:
        warning_counts["mlm_empty_plan"] += 1
        return Tensor(0.0)
    V = logits.shape[-1]
    picked = logits.reshape(-1, V)[plan.positions]
    logp = log_softmax(picked, axis=-1)
    return -logp[np.arange(len(plan)), plan.labels].mean()


# -- sampling ----------------------------------------------------------------------------


def sample_tokens(n: int, n_prime: int, rng: np.random.Generator,
                  valid: np.ndarray | None = None, strided: bool = False) -> np.ndarray:
    """Ascending indices of ``n_prime`` distinct non-padding positions out of ``n``.

    With ``strided`` the positions are evenly spaced instead of random.
    """
    if n_prime < 1:
        raise ValueError(f"n_prime must be >= 1, got {n_prime}")
    candidates = np.arange(n) if valid is None else np.flatnonzero(np.asarray(valid)[:n])
    if n_prime >= len(candidates):
        return candidates.copy()
    if strided:
        picks = np.unique(np.round(np.linspace(0, len(candidates) - 1, n_prime)).astype(int))
        return candidates[picks]
    return np.sort(rng.choice(candidates, size=n_prime, replace=False))


def sample_heads(m: int, m_prime: int, L: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One independent draw of ``m_prime`` distinct heads per layer, each sorted."""
    if not 1 <= m_prime <= m:
        raise ValueError(f"need 1 <= m_prime <= m, got m_prime={m_prime}, m={m}")
    return [np.sort(rng.choice(m, size=m_prime, replace=False)) for _ in range(L)]


# -- cosine differentiation ---------------------------------------------------------------


def _mean_pair_cosine(X: Tensor, weights: np.ndarray) -> Tensor:
    """``X``: (B, k, F). Weighted mean over ``i < j`` of row cosines, then over B."""
    Xn = normalize_rows(X)
    G = matmul(Xn, Xn.T)
    per_row = (G * weights).sum(axis=(1, 2)) / weights.sum(axis=(1, 2))
    return per_row.mean()


def tcd_loss(last_hidden: Tensor, indices) -> Tensor:
    """Mean pairwise cosine of the sampled hidden states.

    ``last_hidden`` is ``(S, D)`` with one index array, or ``(B, S, D)`` with
    one index array per row; rows are averaged.
    """
    if last_hidden.ndim == 2:
        last_hidden = last_hidden.reshape(1, *last_hidden.shape)
        indices = [indices]
    indices = [np.asarray(ix, dtype=np.int64) for ix in indices]
    rows = [b for b, ix in enumerate(indices) if len(ix) >= 2]
    if not rows:
        warning_counts["tcd_too_few_tokens"] += 1
        return Tensor(0.0)
    k = max(len(indices[b]) for b in rows)
    tok = np.zeros((len(rows), k), dtype=np.int64)
    present = np.zeros((len(rows), k), dtype=bool)
    for r, b in enumerate(rows):
        tok[r, : len(indices[b])] = indices[b]
        present[r, : len(indices[b])] = True
    upper = np.triu(np.ones((k, k), dtype=bool), 1)
    weights = (present[:, :, None] & present[:, None, :] & upper).astype(float)
    X = last_hidden[np.array(rows)[:, None], tok]
    return _mean_pair_cosine(X, weights)


def hcd_loss(attn_weights: list[Tensor], heads: list[np.ndarray], valid: np.ndarray | None = None) -> Tensor:
    """Mean pairwise cosine between the sampled heads' flattened attention maps.

    ``attn_weights[l]`` is ``(N, S, S)`` or ``(B, N, S, S)``; ``heads[l]`` the
    sampled head indices for layer ``l``. Entries involving padded positions
    (``valid`` false) are zeroed before flattening, which restricts the cosine
    to the valid block.
    """
    if not attn_weights:
        warning_counts["hcd_too_few_heads"] += 1
        return Tensor(0.0)
    if len(heads) != len(attn_weights):
        raise ValueError("need one head sample per layer")
    if any(len(h) < 2 for h in heads):
        warning_counts["hcd_too_few_heads"] += 1
        return Tensor(0.0)
    per_layer = []
    for A, hs in zip(attn_weights, heads):
        if A.ndim == 3:
            A = A.reshape(1, *A.shape)
        B, _, S, _ = A.shape
        sel = A[:, np.asarray(hs)]
        if valid is not None:
            v = np.asarray(valid, dtype=bool).reshape(B, S)
            if not v.all():
                sel = where_const(v[:, None, :, None] & v[:, None, None, :], sel, 0.0)
        m = len(hs)
        flat = sel.reshape(B, m, S * S)
        weights = np.broadcast_to(np.triu(np.ones((m, m)), 1), (B, m, m))
        per_layer.append(_mean_pair_cosine(flat, weights))
    total = per_layer[0]
    for t in per_layer[1:]:
        total = total + t
    return total * (1.0 / len(per_layer))


# -- combined objective ------------------------------------------------------------------


def decay_factor(step_cur: int, step_max: int) -> float:
    if step_max <= 0:
        raise ConfigError(f"step_max must be positive, got {step_max}")
    return min(1.0, max(0.0, 1.0 - step_cur / step_max))


@dataclass
class LossBreakdown:
    mlm: float
    tcd: float
    hcd: float
    T: float
    total: float
    alpha1: float = 1.0
    alpha2: float = 0.01
    objective: Tensor | None = field(default=None, repr=False)


def _val(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def mth_loss(mlm, tcd, hcd, alpha1: float = 1.0, alpha2: float = 0.01,
             step_cur: int = 0, step_max: int = 1) -> LossBreakdown:
    """``total = mlm + alpha1 * T * tcd + alpha2 * T * hcd`` with ``T = 1 - step_cur / step_max``.

    Tensor inputs yield a differentiable ``objective``; the float ``total`` is
    evaluated with the same operation order, so both agree bit for bit.
    """
    T = decay_factor(step_cur, step_max)
    m, t, h = _val(mlm), _val(tcd), _val(hcd)
    total = m + alpha1 * T * t + alpha2 * T * h
    objective = None
    if any(isinstance(x, Tensor) for x in (mlm, tcd, hcd)):
        objective = (Tensor(0.0) + mlm) + (alpha1 * T) * tcd + (alpha2 * T) * hcd
    return LossBreakdown(m, t, h, T, total, alpha1, alpha2, objective)


def aux_values(last_hidden: Tensor, attn_weights: list[Tensor], token_idx, head_idx, valid) -> tuple[float, float]:
    """TCD and HCD values without recording a graph (for logging)."""
    with no_grad():
        return tcd_loss(last_hidden, token_idx).item(), hcd_loss(attn_weights, head_idx, valid).item()
