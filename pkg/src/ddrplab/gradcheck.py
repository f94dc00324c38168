"""Finite-difference checks of the full model and of isolated attention layers."""

from __future__ import annotations

import numpy as np

from . import objectives as obj
from .model import ModelConfig, forward, init_params
from .relpos import KINDS, RelPosIndexer, attend, encoding_shapes, EncodingParams
from .tensor import Tensor, grad_check_params, parameter

GRAD_CHECK_SIZES = dict(n_layers=2, n_heads=2, d_model=16, vocab_size=23, max_len=8, r_s=4, r_a=8)


def grad_check_config(kind: str, group_count: int = 1, **overrides) -> ModelConfig:
    return ModelConfig(**{**GRAD_CHECK_SIZES, "encoding": kind, "group_count": group_count,
                          "dropout": 0.0, "init_std": 0.3, **overrides})


def _fixed_batch(config: ModelConfig, rng: np.random.Generator):
    B, S = 2, config.max_len
    ids = rng.integers(5, config.vocab_size, size=(B, S))
    valid = np.ones((B, S), dtype=bool)
    valid[1, S - 2 :] = False  # exercise the padding paths
    ids[~valid] = 0
    plans = [
        obj.MaskingPlan(
            positions=np.array([1, 4]),
            actions=np.zeros(2, dtype=np.int64),
            labels=ids[b, [1, 4]],
            replacements=np.full(2, 4),
        )
        for b in range(B)
    ]
    plan = obj.merge_plans(plans, S)
    tokens = [obj.sample_tokens(S, 5, rng, valid=row) for row in valid]
    heads = obj.sample_heads(config.n_heads, 2, config.n_layers, rng)
    return plan.apply(ids), valid, plan, tokens, heads


def model_loss_fn(config: ModelConfig, params, objective: str, seed: int = 0,
                  alphas=(1.0, 1.0), step=(1, 2)):
    """Closure evaluating a deterministic MLM or MTH loss on a fixed toy batch."""
    rng = np.random.default_rng(seed)
    inputs, valid, plan, tokens, heads = _fixed_batch(config, rng)

    def loss():
        trace = forward(inputs, config, params, "eval", valid=valid)
        mlm = obj.mlm_loss(trace.logits, plan)
        if objective == "mlm":
            return mlm
        tcd = obj.tcd_loss(trace.last_hidden, tokens)
        hcd = obj.hcd_loss(trace.attn_weights, heads, valid)
        return obj.mth_loss(mlm, tcd, hcd, alphas[0], alphas[1], step[0], step[1]).objective

    return loss


def model_grad_check(kind: str, objective: str = "mth", seed: int = 0, group_count: int = 1,
                     max_coords: int | None = 6, h: float = 1e-4) -> dict[str, float]:
    """Worst relative error per parameter tensor for one encoding kind and objective."""
    config = grad_check_config(kind, group_count)
    params = init_params(config, seed)
    loss = model_loss_fn(config, params, objective, seed)
    checked = {k: p for k, p in params.items() if not (objective == "mlm" and k in shift_invariant(params))}
    return grad_check_params(loss, checked, h=h, max_coords=max_coords,
                             rng=np.random.default_rng(seed + 1))


def shift_invariant(params) -> list[str]:
    """Key biases add ``Q_i . b`` to a whole logit row, which softmax ignores.

    Under the MLM loss their gradient is exactly zero, so a relative
    finite-difference error there only measures rounding noise.
    """
    return [k for k in params if k.endswith("attn.k.bias")]


def attention_grad_check(kind: str, seed: int = 0, S: int = 5, d: int = 4, r_s: int = 3,
                         D: int = 6, h: float = 1e-4) -> float:
    """Worst relative error over Q, K, V and the position parameters of one attention layer."""
    rng = np.random.default_rng(seed)
    Q, K, V = (parameter(rng.normal(size=(2, S, d))) for _ in range(3))
    shapes = encoding_shapes(kind, d, D, r_s, r_a=S + 1)
    enc = EncodingParams(kind, {k: parameter(rng.normal(size=s)) for k, s in shapes.items()})
    indexer = RelPosIndexer(r_s)
    cw = Tensor(rng.normal(size=(2, S, S)))
    cz = Tensor(rng.normal(size=(2, S, d)))

    def loss():
        out = attend(kind, Q, K, V, enc, indexer)
        return (out.weights * cw).sum() + (out.output * cz).sum()

    leaves = {"Q": Q, "K": K, "V": V}
    if kind != "absolute":
        leaves.update(enc.tensors)
    return max(grad_check_params(loss, leaves, h=h).values())


def run_all(seed: int = 0, max_coords: int | None = 6) -> dict[str, float]:
    """Max relative error per ``kind/objective`` (full model) and ``kind/attention``."""
    report = {}
    for kind in KINDS:
        for objective in ("mlm", "mth"):
            errs = model_grad_check(kind, objective, seed, max_coords=max_coords)
            report[f"{kind}/{objective}"] = max(errs.values())
        report[f"{kind}/attention"] = attention_grad_check(kind, seed)
    return report
