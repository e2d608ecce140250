"""Float32 CPU forward pass for a pre-LN GLU transformer with activation taps.

Layer ``l`` (0-based) computes::

    h1   = RMSNorm(z[l-1], gamma1)          z[-1] is the token embedding
    r    = z[l-1] + W_o . Attn(h1)          attn_out
    h2   = RMSNorm(r, gamma2)
    z    = r + W_down (silu(W_gate h2) * W_up h2)   down_out

and the logits are ``U . RMSNorm(z[L-1], gamma_f)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, MissingTapError, NumericError

PROJECTIONS = ("q", "k", "v", "o", "gate", "up", "down")
NORMS = ("gamma1", "gamma2")

# Everything a layer can expose. "h" is accepted as an alias of "h2", the
# post-RMSNorm input of the MLP.
TAPS = (
    "r", "z", "h1", "h2", "attn_out", "o_in",
    "gate_in", "up_in", "gate_out", "up_out", "down_in", "down_out",
)
TAP_ALIASES = {"h": "h2", "h_attn": "attn_out", "h_gate": "gate_out", "h_up": "up_out", "h_down": "down_out"}

ROPE_BASE = 10000.0
DTYPE = np.float32


def canonical_tap(tap: str) -> str:
    tap = TAP_ALIASES.get(tap, tap)
    if tap not in TAPS:
        raise ConfigError(f"unknown tap {tap!r}; expected one of {TAPS}")
    return tap


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq: int
    rms_eps: float = 1e-6

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head dimension must be even for rotary embeddings")
        if not self.rms_eps > 0:
            raise ConfigError("rms_eps must be > 0")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})

    def projection_shape(self, name: str) -> tuple[int, int]:
        d, f = self.d_model, self.d_ff
        return {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d),
                "gate": (f, d), "up": (f, d), "down": (d, f)}[name]


def _frozen(a) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=DTYPE)
    if a.flags.writeable:
        a = a.copy()
        a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LayerWeights:
    """Weights of one block. Projections are stored (out_features, in_features)."""

    gamma1: np.ndarray
    gamma2: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    o: np.ndarray
    gate: np.ndarray
    up: np.ndarray
    down: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, _frozen(getattr(self, f.name)))

    def with_(self, **kw) -> "LayerWeights":
        return replace(self, **kw)


@dataclass(frozen=True)
class ModelWeights:
    config: ModelConfig
    embed: np.ndarray
    layers: tuple[LayerWeights, ...]
    final_norm: np.ndarray
    unembed: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "embed", _frozen(self.embed))
        object.__setattr__(self, "final_norm", _frozen(self.final_norm))
        object.__setattr__(self, "unembed", _frozen(self.unembed))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self) -> None:
        from .errors import ShapeError

        c = self.config
        expect = {"embed": (c.vocab_size, c.d_model), "final_norm": (c.d_model,),
                  "unembed": (c.vocab_size, c.d_model)}
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {getattr(self, name).shape}")
        if len(self.layers) != c.n_layers:
            raise ShapeError(f"expected {c.n_layers} layers, got {len(self.layers)}")
        for l, lw in enumerate(self.layers):
            for g in NORMS:
                if getattr(lw, g).shape != (c.d_model,):
                    raise ShapeError(f"layers.{l}.{g}: expected ({c.d_model},)")
            for p in PROJECTIONS:
                if getattr(lw, p).shape != c.projection_shape(p):
                    raise ShapeError(
                        f"layers.{l}.{p}: expected {c.projection_shape(p)}, got {getattr(lw, p).shape}")
        for name, arr in self.named_tensors():
            if not np.isfinite(arr).all():
                raise NumericError(f"{name} contains non-finite values")

    def named_tensors(self) -> Iterable[tuple[str, np.ndarray]]:
        yield "embed", self.embed
        for l, lw in enumerate(self.layers):
            for g in NORMS:
                yield f"layers.{l}.{g}", getattr(lw, g)
            for p in PROJECTIONS:
                yield f"layers.{l}.{p}", getattr(lw, p)
        yield "final_norm", self.final_norm
        yield "unembed", self.unembed

    @cached_property
    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name, arr in self.named_tensors():
            h.update(name.encode())
            h.update(arr.astype("<f4").tobytes())
        return h.hexdigest()

    def replace_layer(self, l: int, lw: LayerWeights) -> "ModelWeights":
        layers = list(self.layers)
        layers[l] = lw
        return replace(self, layers=tuple(layers))

    @property
    def weights(self) -> "ModelWeights":
        return self


def resolve(model) -> ModelWeights:
    """Accept a ModelWeights or anything exposing one as ``.weights``."""
    w = model if isinstance(model, ModelWeights) else getattr(model, "weights", None)
    if not isinstance(w, ModelWeights):
        raise TypeError(f"expected a model, got {type(model).__name__}")
    return w


def rmsnorm(z, gamma, eps: float = 1e-6) -> np.ndarray:
    """Row-wise ``z / sqrt(mean(z**2) + eps) * gamma``; all-zero rows map to zero."""
    z = np.asarray(z, dtype=DTYPE)
    if not np.isfinite(z).all():
        bad = np.argwhere(~np.isfinite(z))
        raise NumericError(f"rmsnorm input has {len(bad)} non-finite entries, first at {tuple(bad[0])}")
    if eps < 0:
        raise ValueError("eps must be >= 0")
    ms = np.mean(z * z, axis=-1, keepdims=True) + DTYPE(eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = z / np.sqrt(ms)
    out = np.where(ms > 0, out, DTYPE(0))
    return (out * np.asarray(gamma, dtype=DTYPE)).astype(DTYPE, copy=False)


def silu(x: np.ndarray) -> np.ndarray:
    return x / (DTYPE(1) + np.exp(-x))


def rope_tables(T: int, head_dim: int, base: float = ROPE_BASE) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    ang = np.arange(T, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=-1).astype(DTYPE)
    sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=-1).astype(DTYPE)
    return cos, sin


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: (H, T, dh); rotate-half pairing of dim i with i + dh/2
    half = x.shape[-1] // 2
    rot = np.concatenate([-x[..., half:], x[..., :half]], axis=-1)
    return x * cos + rot * sin


def causal_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """q, k, v: (..., H, T, dh). Returns (context, probs (..., H, T, T))."""
    T, dh = q.shape[-2], q.shape[-1]
    scores = (q @ np.swapaxes(k, -1, -2)) * DTYPE(1.0 / np.sqrt(dh))
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    scores = np.where(mask, DTYPE(-np.inf), scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p = p / p.sum(axis=-1, keepdims=True)
    return (p @ v).astype(DTYPE, copy=False), p


@dataclass
class ActivationTrace:
    """Captured activations keyed by (tap, layer); each value is (T, width)."""

    length: int
    data: dict = field(default_factory=dict)

    def get(self, tap: str, layer: int) -> np.ndarray:
        key = (canonical_tap(tap), layer)
        if key not in self.data:
            raise MissingTapError(f"tap {key[0]!r} at layer {layer} was not captured")
        return self.data[key]

    def __contains__(self, key) -> bool:
        tap, layer = key
        return (canonical_tap(tap), layer) in self.data

    def keys(self):
        return self.data.keys()


@dataclass(frozen=True)
class TapSpec:
    """Which taps to record. ``layers=None`` means every layer."""

    taps: frozenset = frozenset()
    layers: frozenset | None = None

    @classmethod
    def of(cls, taps: Iterable[str] = (), layers: Iterable[int] | None = None) -> "TapSpec":
        return cls(frozenset(canonical_tap(t) for t in taps),
                   None if layers is None else frozenset(int(l) for l in layers))

    def wants(self, tap: str, layer: int) -> bool:
        return tap in self.taps and (self.layers is None or layer in self.layers)


NO_TAPS = TapSpec()


class Recorder:
    def __init__(self, layer: int, taps: TapSpec, patches: Mapping | None, trace: ActivationTrace):
        self.layer, self.taps, self.patches, self.trace = layer, taps, patches or {}, trace

    def __call__(self, tap: str, value: np.ndarray) -> np.ndarray:
        key = (tap, self.layer)
        if key in self.patches:
            patched = np.asarray(self.patches[key], dtype=DTYPE)
            if patched.shape != value.shape:
                raise ValueError(f"patch for {key} has shape {patched.shape}, expected {value.shape}")
            value = patched
        if self.taps.wants(tap, self.layer):
            self.trace.data[key] = value
        return value


def layer_forward(config: ModelConfig, lw: LayerWeights, z: np.ndarray, rope, record) -> np.ndarray:
    """One block on a (..., T, d) state. ``record(tap, value)`` may substitute the value."""
    lead = z.shape[:-1]
    T = z.shape[-2]
    H, dh = config.n_heads, config.head_dim
    eps = config.rms_eps
    cos, sin = rope[0][:T], rope[1][:T]

    def heads(x):
        return np.swapaxes(x.reshape(lead + (H, dh)), -2, -3)

    h1 = record("h1", rmsnorm(z, lw.gamma1, eps))
    q = apply_rope(heads(h1 @ lw.q.T), cos, sin)
    k = apply_rope(heads(h1 @ lw.k.T), cos, sin)
    v = heads(h1 @ lw.v.T)
    ctx, _ = causal_attention(q, k, v)
    o_in = record("o_in", np.swapaxes(ctx, -2, -3).reshape(lead + (H * dh,)))
    attn_out = record("attn_out", o_in @ lw.o.T)
    r = record("r", z + attn_out)

    h2 = record("h2", rmsnorm(r, lw.gamma2, eps))
    gate_in = record("gate_in", h2)
    up_in = record("up_in", h2)
    gate_out = record("gate_out", silu(gate_in @ lw.gate.T))
    up_out = record("up_out", up_in @ lw.up.T)
    down_in = record("down_in", gate_out * up_out)
    down_out = record("down_out", down_in @ lw.down.T)
    return record("z", r + down_out)


def batch_logits(model, docs: np.ndarray) -> np.ndarray:
    """Logits for a (B, T) batch of equal-length documents, no taps."""
    model = resolve(model)
    cfg = model.config
    docs = np.asarray(docs, dtype=np.int64)
    rope = rope_tables(docs.shape[-1], cfg.head_dim)
    z = model.embed[docs]
    trace = ActivationTrace(length=docs.shape[-1])
    for l, lw in enumerate(model.layers):
        z = layer_forward(cfg, lw, z, rope, Recorder(l, NO_TAPS, None, trace))
    return final_logits(model, z)


def check_doc(config: ModelConfig, doc) -> np.ndarray:
    doc = np.asarray(doc, dtype=np.int64)
    if doc.ndim != 1 or doc.size == 0:
        raise ValueError("document must be a non-empty 1-D token sequence")
    if doc.size > config.max_seq:
        raise ValueError(f"document length {doc.size} exceeds max_seq {config.max_seq}")
    if doc.min() < 0 or doc.max() >= config.vocab_size:
        raise ValueError(f"token id out of range [0, {config.vocab_size})")
    return doc


def final_logits(model: ModelWeights, state: np.ndarray) -> np.ndarray:
    return rmsnorm(state, model.final_norm, model.config.rms_eps) @ model.unembed.T


def forward(model, doc, taps: TapSpec = NO_TAPS, patches: Mapping | None = None,
            stop_after: int | None = None) -> tuple[np.ndarray, ActivationTrace]:
    """Run ``doc`` through the model.

    ``patches`` maps (tap, layer) to a replacement array that is substituted
    before any downstream consumer reads the tap. With ``stop_after`` the pass
    ends after that layer and no logits are computed (``None`` is returned).
    """
    model = resolve(model)
    cfg = model.config
    doc = check_doc(cfg, doc)
    if patches:
        patches = {(canonical_tap(t), l): v for (t, l), v in patches.items()}
    trace = ActivationTrace(length=doc.size)
    rope = rope_tables(doc.size, cfg.head_dim)
    z = model.embed[doc]
    last = cfg.n_layers - 1 if stop_after is None else stop_after
    for l in range(last + 1):
        z = layer_forward(cfg, model.layers[l], z, rope, Recorder(l, taps, patches, trace))
    if stop_after is not None:
        return None, trace
    return final_logits(model, z), trace


def log_softmax(logits: np.ndarray) -> np.ndarray:
    # reductions in float64; the network itself stays float32
    x = np.asarray(logits, dtype=np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def nll_from_logits(logits: np.ndarray, doc) -> float:
    doc = np.asarray(doc)
    if doc.size < 2:
        raise ValueError("NLL needs at least two tokens (BOS + one target)")
    lp = log_softmax(logits[:-1])
    return float(-lp[np.arange(doc.size - 1), doc[1:]].mean())


def nll(model, doc) -> float:
    """Mean next-token NLL over positions 1..T (natural log); BOS is never a target."""
    doc = np.asarray(doc)
    if doc.size < 2:
        raise ValueError("NLL needs at least two tokens (BOS + one target)")
    logits, _ = forward(model, doc)
    return nll_from_logits(logits, doc)


def zeros_like_model(config: ModelConfig, embed=None, unembed=None) -> ModelWeights:
    """A model whose sublayers all output zero (gammas one, projections zero)."""
    d = config.d_model
    layers = []
    for _ in range(config.n_layers):
        kw = {p: np.zeros(config.projection_shape(p), DTYPE) for p in PROJECTIONS}
        layers.append(LayerWeights(gamma1=np.ones(d), gamma2=np.ones(d), **kw))
    V = config.vocab_size
    return ModelWeights(
        config=config,
        embed=np.zeros((V, d)) if embed is None else embed,
        layers=tuple(layers),
        final_norm=np.ones(d),
        unembed=np.zeros((V, d)) if unembed is None else unembed,
    )


def stack_rows(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(a, dtype=np.float64) for a in arrays], axis=0)
