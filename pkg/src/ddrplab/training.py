"""Experiment config, AdamW with a linear schedule, and the MLM/MTH training loop.

Config files are flat ``key = value`` text; ``#`` starts a comment. Unknown
keys are errors. A ``preset`` key supplies model sizes that explicit keys
override.

Three independent random streams are spawned from ``seed``: ``data`` (batch
sampling and masking), ``dropout`` and ``aux`` (TCD token and HCD head
sampling). Keeping the auxiliary sampling on its own stream makes an MLM run
and an MTH run with zero weights consume identical data. All stream states,
optimizer moments and counters go into every checkpoint, so resuming
reproduces an uninterrupted run bit for bit.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import objectives as obj
from .data import MASK, N_RESERVED, Corpus, make_batch
from .errors import ConfigError, DivergenceError, NonFiniteError
from .model import (
    PRESETS,
    ModelConfig,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

MODEL_KEYS = {
    "n_layers": "n_layers",
    "n_heads": "n_heads",
    "d_model": "d_model",
    "vocab_size": "vocab_size",
    "max_len": "max_len",
    "r_s": "r_s",
    "r_a": "r_a",
    "encoding_kind": "encoding",
    "group_count": "group_count",
    "dropout": "dropout",
    "tie_embeddings": "tie_embeddings",
    "share_across_layers": "share_across_layers",
    "init_std": "init_std",
    "ddrp_init": "ddrp_init",
}


@dataclass
class TrainConfig:
    # model
    preset: str = "tiny"
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 32
    vocab_size: int = 0  # 0: take from the corpus
    max_len: int = 32
    r_s: int = 64
    r_a: int = 512
    encoding_kind: str = "ddrp"
    group_count: int = 1
    dropout: float = 0.1
    tie_embeddings: bool = True
    share_across_layers: bool = True
    init_std: float = 0.02
    ddrp_init: str = "identity"
    # objective
    objective: str = "mlm"
    alpha1: float = 1.0
    alpha2: float = 0.01
    n_prime: int = 50
    m_prime: int = 2
    hcd_weight_space: str = "pre_softmax"
    tcd_sampling: str = "random"
    mask_ratio: float = 0.15
    triangle_t: float = 0.4
    # optimisation
    seed: int = 0
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-4
    warmup_ratio: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-6
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    # bookkeeping
    log_every: int = 100
    checkpoint_every: int = 0  # 0: every 10% of steps
    log_wall_time: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.objective not in ("mlm", "mth"):
            raise ConfigError(f"objective must be 'mlm' or 'mth', got {self.objective!r}")
        if self.hcd_weight_space not in ("pre_softmax", "post_softmax"):
            raise ConfigError(f"hcd_weight_space must be pre_softmax or post_softmax")
        if self.tcd_sampling not in ("random", "strided"):
            raise ConfigError("tcd_sampling must be 'random' or 'strided'")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.n_prime < 2 or self.m_prime < 2:
            raise ConfigError("n_prime and m_prime must be at least 2")
        if self.m_prime > self.n_heads:
            raise ConfigError(f"m_prime={self.m_prime} exceeds n_heads={self.n_heads}")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ConfigError("warmup_ratio must lie in [0, 1]")
        if self.log_every < 1 or self.checkpoint_every < 0:
            raise ConfigError("log_every must be >= 1 and checkpoint_every >= 0")

    @property
    def checkpoint_interval(self) -> int:
        return self.checkpoint_every or max(1, self.steps // 10)

    def model_config(self, vocab_size: int | None = None) -> ModelConfig:
        kwargs = {dst: getattr(self, src) for src, dst in MODEL_KEYS.items()}
        if kwargs["vocab_size"] == 0:
            if vocab_size is None:
                raise ConfigError("vocab_size=0 needs a corpus to take the size from")
            kwargs["vocab_size"] = vocab_size
        return ModelConfig(**kwargs)

    def effective_alphas(self) -> tuple[float, float]:
        return (self.alpha1, self.alpha2) if self.objective == "mth" else (0.0, 0.0)

    @classmethod
    def from_dict(cls, raw: dict) -> TrainConfig:
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(raw) - set(types)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values = {k: _coerce(k, v, types[k]) for k, v in raw.items()}
        preset = values.get("preset", cls.preset)
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        merged = {k: v for k, v in PRESETS[preset].items() if k in types}
        merged.update(values)
        return cls(**merged)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())


def _fmt(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def _coerce(key: str, value, typ: str):
    if not isinstance(value, str):
        return value
    value = value.strip()
    try:
        if typ == "bool":
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r} (expected {typ})") from None
    return value


def parse_config_text(text: str) -> dict:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    raw = parse_config_text(Path(path).read_text())
    raw.update(overrides or {})
    return TrainConfig.from_dict(raw)


# -- schedule and optimiser ---------------------------------------------------------------


def lr_at(step: int, step_max: int, peak: float, warmup_ratio: float) -> float:
    """Linear warmup to ``peak`` over ``warmup_ratio * step_max`` steps, then linear decay to 0."""
    warm = warmup_ratio * step_max
    if step < warm:
        return peak * step / warm
    if step >= step_max:
        return 0.0
    return peak * (step_max - step) / (step_max - warm)


def decays(name: str) -> bool:
    """Layernorm parameters and biases are exempt from weight decay."""
    return not (name.endswith(".bias") or name.endswith(".gain") or name == "mlm.bias")


class AdamW:
    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-6, weight_decay=0.01):
        self.params = params
        self.beta1, self.beta2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros(p.shape)
            m = self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd and decays(k):
                update = update + self.wd * p.data
            p.data = p.data - lr * update

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"optim/m/{k}": v for k, v in self.m.items()}
        out.update({f"optim/v/{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = arrays[f"optim/m/{k}"].astype(np.float64)
            self.v[k] = arrays[f"optim/v/{k}"].astype(np.float64)
        self.t = t


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    # Sum in name order so the result does not depend on dict insertion order
    # (checkpoint-loaded dicts are sorted, freshly initialised ones are not).
    total = math.sqrt(sum(
        float((params[k].grad * params[k].grad).sum()) for k in sorted(params) if params[k].grad is not None
    ))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# -- training ----------------------------------------------------------------------------


@dataclass
class TrainState:
    step_cur: int
    step_max: int
    rng_states: dict
    loss_ema: float | None = None
    skipped_steps: int = 0

    def to_dict(self) -> dict:
        return {
            "step": self.step_cur,
            "step_max": self.step_max,
            "rng": self.rng_states,
            "loss_ema": self.loss_ema,
            "skipped_steps": self.skipped_steps,
        }


@dataclass
class TrainResult:
    metrics: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    params: dict | None = None
    model_config: ModelConfig | None = None


def spawn_streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("data", "dropout", "aux")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.Generator(np.random.PCG64(c)) for n, c in zip(names, children)}


def _aux_samples(cfg: TrainConfig, mcfg: ModelConfig, valid: np.ndarray, rng):
    S = valid.shape[1]
    tokens = [
        obj.sample_tokens(S, cfg.n_prime, rng, valid=row, strided=cfg.tcd_sampling == "strided")
        for row in valid
    ]
    heads = obj.sample_heads(mcfg.n_heads, cfg.m_prime, mcfg.n_layers, rng)
    return tokens, heads


def train_step_loss(cfg: TrainConfig, mcfg: ModelConfig, params, corpus: Corpus, streams,
                    step_cur: int) -> obj.LossBreakdown:
    """Sample one batch, run forward, and assemble the (possibly differentiable) loss."""
    batch = make_batch(corpus, streams["data"], cfg.batch_size, mcfg.max_len)
    B, S = batch.ids.shape
    plans = [
        obj.apply_whole_word_masking(batch.ids[b], batch.word_ids[b], cfg.mask_ratio,
                                     streams["data"], MASK, mcfg.vocab_size, N_RESERVED)
        for b in range(B)
    ]
    plan = obj.merge_plans(plans, S)
    inputs = plan.apply(batch.ids)
    trace = forward(inputs, mcfg, params, "train", streams["dropout"], batch.valid)
    mlm = obj.mlm_loss(trace.logits, plan)

    a1, a2 = cfg.effective_alphas()
    T = obj.decay_factor(step_cur, cfg.steps)
    tokens, heads = _aux_samples(cfg, mcfg, batch.valid, streams["aux"])
    maps = trace.attn_weights if cfg.hcd_weight_space == "pre_softmax" else trace.attn_probs
    if a1 * T != 0.0:
        tcd = obj.tcd_loss(trace.last_hidden, tokens)
    else:
        with no_grad():
            tcd = obj.tcd_loss(trace.last_hidden, tokens).item()
    if a2 * T != 0.0:
        hcd = obj.hcd_loss(maps, heads, batch.valid)
    else:
        with no_grad():
            hcd = obj.hcd_loss(maps, heads, batch.valid).item()
    return obj.mth_loss(mlm, tcd, hcd, a1, a2, step_cur, cfg.steps)


def _write_jsonl(path: Path, record: dict) -> None:
    with path.open("a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def train(
    cfg: TrainConfig,
    corpus: Corpus,
    out_dir,
    resume_from=None,
    stop_at: int | None = None,
) -> TrainResult:
    """Run ``cfg.steps`` optimiser steps, logging ``metrics.jsonl`` and writing
    ``ckpt_<step>.npz`` checkpoints into ``out_dir``.

    ``resume_from`` continues from a checkpoint; ``stop_at`` halts early after
    that many total steps (a checkpoint is written there), which is how the
    resume path is exercised.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    mcfg = cfg.model_config(corpus.vocab_size)
    if mcfg.vocab_size < corpus.vocab_size:
        raise ConfigError(f"vocab_size={mcfg.vocab_size} is smaller than the corpus vocabulary")

    streams = spawn_streams(cfg.seed)
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.config != mcfg:
            raise ConfigError("checkpoint model config differs from the run config")
        if ckpt.state.get("train_config") != cfg.to_dict():
            raise ConfigError("checkpoint training config differs from the run config")
        params = ckpt.params
        opt = AdamW(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
        opt.load_state_arrays(ckpt.extra, int(ckpt.state.get("optim_t", ckpt.state["step"])))
        for name, g in streams.items():
            g.bit_generator.state = ckpt.state["rng"][name]
        state = TrainState(int(ckpt.state["step"]), cfg.steps, {}, ckpt.state.get("loss_ema"),
                           int(ckpt.state.get("skipped_steps", 0)))
    else:
        metrics_path.unlink(missing_ok=True)
        params = init_params(mcfg, cfg.seed)
        opt = AdamW(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
        state = TrainState(0, cfg.steps, {})

    result = TrainResult(params=params, model_config=mcfg)
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    while state.step_cur < end:
        t0 = time.perf_counter()
        step = state.step_cur
        lr = lr_at(step, cfg.steps, cfg.lr, cfg.warmup_ratio)
        try:
            br = train_step_loss(cfg, mcfg, params, corpus, streams, step)
            if br.objective is not None and br.objective.requires_grad:
                br.objective.backward()
                clip_grad_norm(params, cfg.clip_norm)
                opt.step(lr)
            else:
                state.skipped_steps += 1
            for p in params.values():
                p.grad = None
            if not all(np.isfinite(p.data).all() for p in params.values()):
                raise NonFiniteError("parameters became non-finite")
        except NonFiniteError as exc:
            _write_jsonl(metrics_path, {"step": step + 1, "error": "divergence"})
            raise DivergenceError(step + 1, str(exc)) from exc
        if not math.isfinite(br.total):
            _write_jsonl(metrics_path, {"step": step + 1, "error": "divergence"})
            raise DivergenceError(step + 1)

        state.step_cur = step + 1
        state.loss_ema = br.total if state.loss_ema is None else 0.98 * state.loss_ema + 0.02 * br.total
        if state.step_cur % cfg.log_every == 0 or state.step_cur == cfg.steps:
            record = {
                "step": state.step_cur,
                "lr": lr,
                "mlm": br.mlm,
                "tcd": br.tcd,
                "hcd": br.hcd,
                "T": br.T,
                "total": br.total,
                "wall_ms": (time.perf_counter() - t0) * 1e3 if cfg.log_wall_time else None,
            }
            _write_jsonl(metrics_path, record)
            result.metrics.append(record)
        if state.step_cur % cfg.checkpoint_interval == 0 or state.step_cur in (cfg.steps, end):
            path = out_dir / f"ckpt_{state.step_cur:07d}.npz"
            state.rng_states = {n: g.bit_generator.state for n, g in streams.items()}
            meta = state.to_dict()
            meta["train_config"] = cfg.to_dict()
            meta["optim_t"] = opt.t
            save_checkpoint(path, mcfg, params, meta, opt.state_arrays())
            result.checkpoints.append(path)
    return result


def read_metrics(path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]
