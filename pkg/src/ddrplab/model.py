"""Post-layernorm transformer encoder with a pluggable position encoding.

Parameters live in a flat ``dict[str, Tensor]`` whose keys are the public
checkpoint names:

``embeddings.word`` (V, D), ``embeddings.ln.{gain,bias}``,
``position.P`` (r_a, D; absolute kind only),
``relpos[.l{layer}].g{group}.{tensor}`` (per encoding kind, see
:data:`ddrplab.relpos.PARAM_SHAPES`; the layer part appears only when
``share_across_layers`` is off),
``layer{l}.attn.{q,k,v,out}.{weight,bias}``, ``layer{l}.attn.ln.{gain,bias}``,
``layer{l}.ffn.{in,out}.{weight,bias}``, ``layer{l}.ffn.ln.{gain,bias}``,
``mlm.transform.{weight,bias}``, ``mlm.ln.{gain,bias}``, ``mlm.bias`` and,
with untied embeddings, ``mlm.decoder.weight`` (V, D).
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, InputError
from .relpos import (
    KINDS,
    EncodingParams,
    RelPosIndexer,
    attend,
    ddrp_table,
    encoding_shapes,
)
from .tensor import Tensor, concat, embed, gelu, layer_norm, matmul, parameter

PRESETS = {
    "tiny": dict(n_layers=2, n_heads=2, d_model=32, max_len=32),
    "small": dict(n_layers=4, n_heads=4, d_model=128, max_len=64),
    "base": dict(n_layers=12, n_heads=12, d_model=768, max_len=512, vocab_size=30522),
}


@dataclass
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 32
    vocab_size: int = 1000
    max_len: int = 32
    r_s: int = 64
    r_a: int = 512
    encoding: str = "ddrp"
    group_count: int = 1
    dropout: float = 0.1
    tie_embeddings: bool = True
    share_across_layers: bool = True
    ffn_mult: int = 4
    init_std: float = 0.02
    ddrp_init: str = "identity"
    ln_eps: float = 1e-12

    def __post_init__(self):
        self.validate()

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def heads_per_group(self) -> int:
        return self.n_heads // self.group_count

    @classmethod
    def preset(cls, name: str, **overrides) -> ModelConfig:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    def validate(self) -> None:
        if self.encoding not in KINDS:
            raise ConfigError(f"unknown encoding kind {self.encoding!r}; expected one of {KINDS}")
        if min(self.n_layers, self.n_heads, self.d_model, self.vocab_size, self.max_len) < 1:
            raise ConfigError("layer/head/width/vocab/length sizes must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.group_count not in (1, 2) or self.n_heads % self.group_count:
            raise ConfigError(
                f"group_count must be 1 or 2 and divide n_heads, got {self.group_count}"
            )
        if self.encoding in ("absolute", "tupe") and self.max_len > self.r_a:
            raise ConfigError(f"max_len={self.max_len} exceeds r_a={self.r_a}")
        if self.r_s < 1:
            raise ConfigError("r_s must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.ddrp_init not in ("identity", "normal"):
            raise ConfigError(f"ddrp_init must be 'identity' or 'normal', got {self.ddrp_init!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> ModelConfig:
        raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class ForwardTrace:
    logits: Tensor
    last_hidden: Tensor
    attn_weights: list[Tensor] = field(default_factory=list)  # per layer, (B, N, S, S) pre-softmax
    attn_probs: list[Tensor] = field(default_factory=list)
    valid: np.ndarray | None = None  # (B, S) bool


# -- parameters ---------------------------------------------------------------------


# std of a unit normal truncated to [-2, 2]
_TRUNC2_STD = math.sqrt(1.0 - 4.0 * math.exp(-2.0) / math.sqrt(2.0 * math.pi) / math.erf(math.sqrt(2.0)))


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Zero-mean samples with standard deviation ``std``, truncated at two scale units.

    The underlying normal's scale is widened by the truncation factor so the
    resulting samples, not the parent distribution, have the requested std.
    """
    scale = std / _TRUNC2_STD
    out = rng.normal(0.0, scale, size=shape)
    bad = np.abs(out) > 2 * scale
    while bad.any():
        out[bad] = rng.normal(0.0, scale, size=int(bad.sum()))
        bad = np.abs(out) > 2 * scale
    return out


def relpos_prefix(layer: int, group: int, config: ModelConfig) -> str:
    if config.share_across_layers:
        return f"relpos.g{group}"
    return f"relpos.l{layer}.g{group}"


def init_params(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    D, V = config.d_model, config.vocab_size
    inner = config.ffn_mult * D
    std = config.init_std
    params: dict[str, np.ndarray] = {}

    def dense(name, n_in, n_out):
        params[f"{name}.weight"] = truncated_normal(rng, (n_in, n_out), std)
        params[f"{name}.bias"] = np.zeros(n_out)

    def norm(name, n):
        params[f"{name}.gain"] = np.ones(n)
        params[f"{name}.bias"] = np.zeros(n)

    params["embeddings.word"] = truncated_normal(rng, (V, D), std)
    norm("embeddings.ln", D)
    if config.encoding == "absolute":
        params["position.P"] = truncated_normal(rng, (config.r_a, D), std)
    else:
        shapes = encoding_shapes(config.encoding, config.head_dim, D, config.r_s, config.r_a)
        layer_ids = [0] if config.share_across_layers else range(config.n_layers)
        for layer in layer_ids:
            for g in range(config.group_count):
                prefix = relpos_prefix(layer, g, config)
                for key, shape in shapes.items():
                    params[f"{prefix}.{key}"] = _init_relpos(rng, config, key, shape)
    for layer in range(config.n_layers):
        for proj in ("q", "k", "v", "out"):
            dense(f"layer{layer}.attn.{proj}", D, D)
        norm(f"layer{layer}.attn.ln", D)
        dense(f"layer{layer}.ffn.in", D, inner)
        dense(f"layer{layer}.ffn.out", inner, D)
        norm(f"layer{layer}.ffn.ln", D)
    dense("mlm.transform", D, D)
    norm("mlm.ln", D)
    params["mlm.bias"] = np.zeros(V)
    if not config.tie_embeddings:
        params["mlm.decoder.weight"] = truncated_normal(rng, (V, D), std)
    return {k: parameter(v, name=k) for k, v in params.items()}


def _init_relpos(rng, config: ModelConfig, key: str, shape) -> np.ndarray:
    std = config.init_std
    if key == "b":
        return np.zeros(shape)
    if config.encoding == "ddrp" and config.ddrp_init == "identity":
        # start as a direction-blind table equal to the distance rows
        if key == "Ddir":
            return 1.0 + truncated_normal(rng, shape, std)
        if key == "Wrd":
            return np.eye(shape[0]) + truncated_normal(rng, shape, std)
    return truncated_normal(rng, shape, std)


def count_params(params: dict[str, Tensor]) -> int:
    return int(sum(p.size for p in params.values()))


def encoding_groups(params: dict[str, Tensor], config: ModelConfig, layer: int) -> list[EncodingParams]:
    groups = []
    for g in range(config.group_count):
        prefix = relpos_prefix(layer, g, config) + "."
        tensors = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
        groups.append(EncodingParams(config.encoding, tensors))
    return groups


# -- forward ---------------------------------------------------------------------------


def _dropout(x: Tensor, rate: float, train: bool, rng) -> Tensor:
    if not train or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return x * (keep / (1.0 - rate))


def _dense(x: Tensor, params, name: str) -> Tensor:
    return matmul(x, params[f"{name}.weight"]) + params[f"{name}.bias"]


def _ln(x: Tensor, params, name: str, eps: float) -> Tensor:
    return layer_norm(x, params[f"{name}.gain"], params[f"{name}.bias"], eps)


def forward(
    ids,
    config: ModelConfig,
    params: dict[str, Tensor],
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    valid: np.ndarray | None = None,
) -> ForwardTrace:
    """Run the encoder on ``ids`` of shape ``(S,)`` or ``(B, S)``.

    ``valid`` marks real (non-padding) tokens; padded keys are masked out of
    the softmax. For 1-D input the batch axis is dropped from the trace.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    if train and config.dropout > 0 and rng is None:
        raise ValueError("train mode with dropout needs an rng")
    ids = np.asarray(ids)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
        valid = None if valid is None else np.asarray(valid)[None, :]
    if ids.ndim != 2:
        raise InputError(f"token ids must be 1-D or 2-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise InputError(f"token id outside [0, {config.vocab_size})")
    B, S = ids.shape
    if S > config.max_len:
        raise InputError(f"sequence length {S} exceeds max_len={config.max_len}")
    valid = np.ones((B, S), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    key_mask = None if valid.all() else valid[:, None, None, :]

    D, N, d = config.d_model, config.n_heads, config.head_dim
    n_g = config.heads_per_group
    indexer = RelPosIndexer(config.r_s)

    h = embed(params["embeddings.word"], ids)
    if config.encoding == "absolute":
        h = h + params["position.P"][:S]
    h = _ln(h, params, "embeddings.ln", config.ln_eps)
    h = _dropout(h, config.dropout, train, rng)

    trace = ForwardTrace(None, None, [], [], valid)
    cached_groups = None
    for layer in range(config.n_layers):
        if config.share_across_layers and cached_groups is not None:
            groups = cached_groups
        else:
            groups = [(g, _ddrp_table_or_none(g)) for g in encoding_groups(params, config, layer)]
            cached_groups = groups

        def heads(name):
            x = _dense(h, params, f"layer{layer}.attn.{name}")
            return x.reshape(B, S, N, d).transpose(0, 2, 1, 3)

        Q, K, V = heads("q"), heads("k"), heads("v")
        outs = []
        for g, (enc, table) in enumerate(groups):
            if len(groups) == 1:
                q, k, v = Q, K, V
            else:
                sl = (slice(None), slice(g * n_g, (g + 1) * n_g))
                q, k, v = Q[sl], K[sl], V[sl]
            outs.append(attend(config.encoding, q, k, v, enc, indexer, key_mask, table))
        if len(outs) == 1:
            A, P, Z = outs[0].weights, outs[0].probs, outs[0].output
        else:
            A = concat([o.weights for o in outs], axis=1)
            P = concat([o.probs for o in outs], axis=1)
            Z = concat([o.output for o in outs], axis=1)
        trace.attn_weights.append(A)
        trace.attn_probs.append(P)

        z = Z.transpose(0, 2, 1, 3).reshape(B, S, D)
        z = _dropout(_dense(z, params, f"layer{layer}.attn.out"), config.dropout, train, rng)
        h = _ln(h + z, params, f"layer{layer}.attn.ln", config.ln_eps)
        f = gelu(_dense(h, params, f"layer{layer}.ffn.in"))
        f = _dropout(_dense(f, params, f"layer{layer}.ffn.out"), config.dropout, train, rng)
        h = _ln(h + f, params, f"layer{layer}.ffn.ln", config.ln_eps)

    t = gelu(_dense(h, params, "mlm.transform"))
    t = _ln(t, params, "mlm.ln", config.ln_eps)
    decoder = params["embeddings.word"] if config.tie_embeddings else params["mlm.decoder.weight"]
    logits = matmul(t, decoder.T) + params["mlm.bias"]

    trace.logits, trace.last_hidden = logits, h
    if squeeze:
        trace.logits = logits[0]
        trace.last_hidden = h[0]
        trace.attn_weights = [a[0] for a in trace.attn_weights]
        trace.attn_probs = [p[0] for p in trace.attn_probs]
        trace.valid = valid[0]
    return trace


def _ddrp_table_or_none(enc: EncodingParams) -> Tensor | None:
    if enc.kind != "ddrp":
        return None
    return ddrp_table(enc["Ddir"], enc["Krd"], enc["Wrd"])


# -- checkpoints -------------------------------------------------------------------------

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write an ``.npz``-compatible archive with fixed timestamps and sorted entries.

    Byte-identical for identical inputs, which plain ``np.savez`` does not
    guarantee.
    """
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def load_arrays(path) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as data:
        return {k: data[k] for k in data.files}


def _json_blob(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode(), dtype=np.uint8).copy()


def _from_blob(arr: np.ndarray):
    return json.loads(arr.tobytes().decode())


def save_checkpoint(path, config: ModelConfig, params: dict[str, Tensor],
                    state: dict | None = None, extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    """Checkpoint layout: ``param/<name>`` arrays, ``meta/config`` and
    ``meta/state`` JSON blobs, and any ``extra_arrays`` (optimizer moments)."""
    arrays = {f"param/{k}": v.data for k, v in params.items()}
    arrays["meta/config"] = _json_blob(json.loads(config.to_json()))
    arrays["meta/state"] = _json_blob(state or {})
    for k, v in (extra_arrays or {}).items():
        arrays[k] = v
    save_arrays(path, arrays)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, Tensor]
    state: dict
    extra: dict[str, np.ndarray]


def load_checkpoint(path) -> Checkpoint:
    arrays = load_arrays(path)
    config = ModelConfig.from_json(json.dumps(_from_blob(arrays.pop("meta/config"))))
    state = _from_blob(arrays.pop("meta/state"))
    params = {
        k[len("param/"):]: parameter(v.astype(np.float64), name=k[len("param/"):])
        for k, v in arrays.items()
        if k.startswith("param/")
    }
    extra = {k: v for k, v in arrays.items() if not k.startswith("param/")}
    return Checkpoint(config, params, state, extra)
