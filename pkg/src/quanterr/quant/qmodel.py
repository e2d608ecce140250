"""QuantSpec, QuantizedModel, whole-model quantization and mixed-precision restoration."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..errors import ConfigError, DataFormatError, QuantErrError
from ..io import TokenCorpus, atomic_write_bytes, decode_qwt, encode_qwt, model_from_tensors
from ..model import (DTYPE, PROJECTIONS, LayerWeights, ModelConfig, ModelWeights, TapSpec,
                     layer_forward, resolve, rope_tables, Recorder, ActivationTrace)
from .awq import awq_search_scales
from .gptq import gptq_quantize
from .grids import QuantizedLinear, codes_per_word, nf_codebook, nf_quantize, rtn_quantize

log = logging.getLogger(__name__)

METHODS = ("rtn", "nf", "gptq", "awq")
IDENTITY_BITS = 16

# projections sharing an input, in the order a block consumes them
INPUT_GROUPS = (("h1", ("q", "k", "v")), ("o_in", ("o",)), ("h2", ("gate", "up")), ("down_in", ("down",)))


@dataclass(frozen=True)
class QuantSpec:
    method: str = "rtn"
    bits: int = 3
    group_size: int | None = None
    gptq_damp: float = 0.01
    gptq_act_sort: bool = True
    awq_grid_steps: int = 20
    propagate_quantized: bool | None = None
    calib_docs: int | None = None
    disable_quant: bool = False
    name: str | None = None

    def __post_init__(self):
        method = str(self.method).lower()
        object.__setattr__(self, "method", method)
        if method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.bits not in (3, 4, IDENTITY_BITS):
            raise ConfigError(f"bits must be 3 or 4 (16 = identity test mode), got {self.bits}")
        if self.group_size is None:
            object.__setattr__(self, "group_size", 64 if self.bits == 3 else 128)
        if self.group_size < 1:
            raise ConfigError("group_size must be >= 1")
        if not self.gptq_damp >= 0:
            raise ConfigError("gptq_damp must be >= 0")
        if self.awq_grid_steps < 1:
            raise ConfigError("awq_grid_steps must be >= 1")

    @property
    def label(self) -> str:
        return self.name or f"{self.method.upper()}{self.bits}"

    @property
    def identity(self) -> bool:
        return self.bits == IDENTITY_BITS or self.disable_quant

    @property
    def propagates_quantized(self) -> bool:
        # GPTQ feeds each layer with outputs of the already-quantized prefix;
        # AWQ searches on full-precision activations like its reference code.
        if self.propagate_quantized is not None:
            return self.propagate_quantized
        return self.method == "gptq"

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "QuantSpec":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown quant spec keys: {sorted(extra)}")
        return cls(**dict(d))


@dataclass(frozen=True, eq=False)
class QuantizedModel:
    """Quantized projections over full-precision reference weights.

    ``aligned`` holds the full-precision weights the codes were derived from:
    the base model itself, or for AWQ the scale-folded base (same outputs,
    activations aligned with the quantized model). Projections mapped to
    ``None`` are kept at full precision.
    """

    config: ModelConfig
    aligned: ModelWeights
    layers: tuple[Mapping[str, QuantizedLinear | None], ...]
    spec: QuantSpec
    provenance: Mapping = field(default_factory=dict)

    @cached_property
    def weights(self) -> ModelWeights:
        out = []
        for lw, qs in zip(self.aligned.layers, self.layers):
            kw = {p: q.dequantize(DTYPE) for p, q in qs.items() if q is not None}
            out.append(lw.with_(**kw) if kw else lw)
        return replace(self.aligned, layers=tuple(out))

    @property
    def base_digest(self) -> str:
        return self.provenance.get("base_digest", "")

    def quantized_projections(self) -> list[tuple[int, str]]:
        return [(l, p) for l, qs in enumerate(self.layers) for p in PROJECTIONS if qs.get(p) is not None]

    @cached_property
    def digest(self) -> str:
        return hashlib.sha256(encode_qmodel(self)[0]).hexdigest()


# ---------------------------------------------------------------- quantization

def _capture(config: ModelConfig, lw: LayerWeights, states: Sequence[np.ndarray], taps: Iterable[str],
             layer: int) -> tuple[dict[str, np.ndarray], list[np.ndarray]]:
    spec = TapSpec.of(taps, [layer])
    caps: dict[str, list[np.ndarray]] = {t: [] for t in spec.taps}
    nxt = []
    for z in states:
        trace = ActivationTrace(length=z.shape[0])
        nxt.append(layer_forward(config, lw, z, rope_tables(z.shape[0], config.head_dim),
                                 Recorder(layer, spec, None, trace)))
        for t in spec.taps:
            caps[t].append(trace.data[(t, layer)])
    return {t: np.concatenate(v, axis=0).astype(np.float64) for t, v in caps.items()}, nxt


def _quantize_one(W: np.ndarray, spec: QuantSpec, X: np.ndarray | None) -> QuantizedLinear:
    if spec.method == "nf":
        return nf_quantize(W, spec.bits, spec.group_size)
    if spec.method == "gptq":
        return gptq_quantize(W, X, spec.bits, spec.group_size, spec.gptq_damp, spec.gptq_act_sort)
    return rtn_quantize(W, spec.bits, spec.group_size)


def _calib_states(model: ModelWeights, calib: TokenCorpus | None, spec: QuantSpec) -> list[np.ndarray]:
    if calib is None or len(calib) == 0:
        raise ConfigError(f"{spec.method} needs a non-empty calibration corpus")
    if calib.vocab_size > model.config.vocab_size:
        raise ConfigError("calibration corpus vocabulary exceeds the model's")
    docs = calib.docs if spec.calib_docs is None else calib.docs[: spec.calib_docs]
    for d in docs:
        if d.size > model.config.max_seq:
            raise ConfigError(f"calibration doc of length {d.size} exceeds max_seq")
    return [model.embed[d] for d in docs]


def quantize_model(model, calib_corpus: TokenCorpus | None, spec: QuantSpec) -> QuantizedModel:
    """Quantize every attention/MLP projection; embeddings, U and all gammas stay full precision."""
    base = resolve(model)
    cfg = base.config
    provenance = {"spec": spec.to_dict(), "base_digest": base.digest,
                  "calib_digest": calib_corpus.digest if calib_corpus is not None else None}
    if spec.bits == IDENTITY_BITS:
        layers = tuple({p: None for p in PROJECTIONS} for _ in range(cfg.n_layers))
        return QuantizedModel(cfg, base, layers, spec, provenance)

    if spec.method in ("rtn", "nf"):
        layers = []
        for l, lw in enumerate(base.layers):
            qs = {}
            for p in PROJECTIONS:
                qs[p] = None if spec.disable_quant else _safe(lambda: _quantize_one(getattr(lw, p), spec, None), l, p)
            layers.append(qs)
        return QuantizedModel(cfg, base, tuple(layers), spec, provenance)

    if spec.method == "gptq":
        return _quantize_gptq(base, calib_corpus, spec, provenance)
    return _quantize_awq(base, calib_corpus, spec, provenance)


def _safe(fn, layer: int, proj: str):
    try:
        return fn()
    except QuantErrError as exc:
        raise type(exc)(f"layer {layer} projection {proj}: {exc}") from exc


def _quantize_gptq(base: ModelWeights, calib: TokenCorpus, spec: QuantSpec, provenance: dict) -> QuantizedModel:
    cfg = base.config
    q_states = _calib_states(base, calib, spec)
    fp_states = list(q_states)
    layers = []
    for l, lw in enumerate(base.layers):
        work = lw
        qs: dict[str, QuantizedLinear | None] = {}
        for tap, projs in INPUT_GROUPS:
            if spec.propagates_quantized:
                caps, _ = _capture(cfg, work, q_states, [tap], l)
            else:
                caps, _ = _capture(cfg, lw, fp_states, [tap], l)
            X = caps[tap]
            for p in projs:
                if spec.disable_quant:
                    qs[p] = None
                    continue
                qs[p] = _safe(lambda: _quantize_one(getattr(lw, p), spec, X), l, p)
                work = work.with_(**{p: qs[p].dequantize(DTYPE)})
        _, q_states = _capture(cfg, work, q_states, [], l)
        if not spec.propagates_quantized:
            _, fp_states = _capture(cfg, lw, fp_states, [], l)
        layers.append(qs)
        log.debug("gptq layer %d done", l)
    return QuantizedModel(cfg, base, tuple(layers), spec, provenance)


def fold_awq_scales(lw: LayerWeights, group: str, s: np.ndarray) -> LayerWeights:
    """Fold input scales into the preceding full-precision op so outputs are unchanged."""
    s = np.asarray(s, dtype=np.float64)
    f = {n: np.asarray(getattr(lw, n), dtype=np.float64) for n in ("gamma1", "gamma2", *PROJECTIONS)}
    if group == "h1":
        kw = {"gamma1": f["gamma1"] / s, "q": f["q"] * s, "k": f["k"] * s, "v": f["v"] * s}
    elif group == "o_in":
        kw = {"v": f["v"] / s[:, None], "o": f["o"] * s}
    elif group == "h2":
        kw = {"gamma2": f["gamma2"] / s, "gate": f["gate"] * s, "up": f["up"] * s}
    elif group == "down_in":
        kw = {"up": f["up"] / s[:, None], "down": f["down"] * s}
    else:
        raise ValueError(f"unknown AWQ input group {group!r}")
    return lw.with_(**kw)


def _quantize_awq(base: ModelWeights, calib: TokenCorpus, spec: QuantSpec, provenance: dict) -> QuantizedModel:
    cfg = base.config
    states = _calib_states(base, calib, spec)
    aligned_layers, layers, alphas = [], [], {}
    q_prefix: list[LayerWeights] = []
    for l, lw in enumerate(base.layers):
        scales = {}
        for tap, projs in INPUT_GROUPS:
            caps, _ = _capture(cfg, lw, states, [tap], l)
            s, alpha, _ = awq_search_scales([getattr(lw, p) for p in projs], caps[tap],
                                            spec.bits, spec.group_size, spec.awq_grid_steps)
            lw = fold_awq_scales(lw, tap, s)
            alphas[f"{l}.{tap}"] = alpha
            for p in projs:
                scales[p] = s
        aligned_layers.append(lw)
        qs = {}
        for p in PROJECTIONS:
            if spec.disable_quant:
                qs[p] = None
            else:
                qs[p] = _safe(lambda: rtn_quantize(getattr(lw, p), spec.bits, spec.group_size), l, p)
                qs[p] = qs[p].with_awq_scale(scales[p])
        layers.append(qs)
        if spec.propagates_quantized:
            qlw = lw.with_(**{p: q.dequantize(DTYPE) for p, q in qs.items() if q is not None})
            _, states = _capture(cfg, qlw, states, [], l)
        else:
            _, states = _capture(cfg, lw, states, [], l)
    aligned = replace(base, layers=tuple(aligned_layers))
    provenance = dict(provenance, awq_alpha=alphas)
    return QuantizedModel(cfg, aligned, tuple(layers), spec, provenance)


# ---------------------------------------------------------------- restoration

def _check_base(qmodel: QuantizedModel, base) -> None:
    base = resolve(base)
    if base.config != qmodel.config:
        raise ConfigError("base and quantized model configs differ")
    if qmodel.base_digest and base.digest != qmodel.base_digest:
        raise ConfigError("base model is not the one this model was quantized from")


def restore_projection(qmodel: QuantizedModel, base, projections: str | Iterable[str],
                       layer_range: Iterable[int]) -> QuantizedModel:
    """Put the listed projections back to full precision in the given layers.

    For AWQ the restored weights are the scale-folded full-precision ones so
    they stay consistent with the folded RMSNorm weights.
    """
    _check_base(qmodel, base)
    projections = [projections] if isinstance(projections, str) else list(projections)
    for p in projections:
        if p not in PROJECTIONS:
            raise ConfigError(f"unknown projection {p!r}")
    L = qmodel.config.n_layers
    layer_set = sorted(set(int(l) for l in layer_range))
    for l in layer_set:
        if not 0 <= l < L:
            raise ConfigError(f"layer {l} out of range [0, {L})")
    layers = [dict(qs) for qs in qmodel.layers]
    for l in layer_set:
        for p in projections:
            layers[l][p] = None
    restored = list(qmodel.provenance.get("restored", [])) + [[p, layer_set] for p in projections]
    return replace(qmodel, layers=tuple(layers), provenance=dict(qmodel.provenance, restored=restored))


def restore_layers(qmodel: QuantizedModel, base, from_layer: int) -> QuantizedModel:
    L = qmodel.config.n_layers
    if not 0 <= from_layer <= L:
        raise ConfigError(f"from_layer must be in [0, {L}], got {from_layer}")
    return restore_projection(qmodel, base, PROJECTIONS, range(from_layer, L))


# ---------------------------------------------------------------- serialization

def encode_qmodel(qm: QuantizedModel) -> tuple[bytes, dict]:
    tensors = dict(qm.aligned.named_tensors())
    entries = {}
    for l, qs in enumerate(qm.layers):
        for p in PROJECTIONS:
            q = qs.get(p)
            key = f"layers.{l}.{p}"
            if q is None:
                entries[key] = {"grid": "full_precision"}
                continue
            tensors[f"{key}.codes"] = q.packed
            entries[key] = {"grid": q.grid, "bits": q.bits, "group_size": q.group_size,
                            "shape": list(q.shape), "codes_per_word": codes_per_word(q.bits),
                            "pad_bits": 32 - codes_per_word(q.bits) * q.bits}
            if q.grid == "uniform":
                tensors[f"{key}.scale"], tensors[f"{key}.offset"] = q.scale, q.offset
            else:
                tensors[f"{key}.absmax"] = q.absmax
            if q.awq_scale is not None:
                tensors[f"{key}.awq_scale"] = q.awq_scale
    meta = {"config": qm.config.to_dict(), "kind": "quantized", "spec": qm.spec.to_dict()}
    manifest = {
        "format": "quanterr-quantized/1",
        "spec": qm.spec.to_dict(),
        "config": qm.config.to_dict(),
        "packing": {"order": "row-major", "word": "u32 little-endian", "3bit": "10 codes + 2 pad bits",
                    "4bit": "8 codes"},
        "tensors": entries,
        "provenance": _jsonable(qm.provenance),
    }
    return encode_qwt(tensors, meta), manifest


def _jsonable(x):
    return json.loads(json.dumps(x, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))


def save_quantized(qm: QuantizedModel, out_dir) -> Path:
    out = Path(out_dir)
    blob, manifest = encode_qmodel(qm)
    manifest["provenance"]["qmodel_digest"] = hashlib.sha256(blob).hexdigest()
    atomic_write_bytes(out / "model.qwt", blob)
    atomic_write_bytes(out / "manifest.json",
                       (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return out


def load_quantized(path) -> QuantizedModel:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"cannot read quantized-model manifest: {exc}") from exc
    tensors, meta = decode_qwt((path / "model.qwt").read_bytes())
    config = ModelConfig.from_dict(meta["config"])
    base_t = {k: v for k, v in tensors.items() if k.count(".") <= 2 and not k.endswith(
        (".codes", ".scale", ".offset", ".absmax", ".awq_scale"))}
    aligned = model_from_tensors(config, base_t)
    spec = QuantSpec.from_dict(manifest["spec"])
    layers = []
    for l in range(config.n_layers):
        qs = {}
        for p in PROJECTIONS:
            key = f"layers.{l}.{p}"
            e = manifest["tensors"][key]
            if e["grid"] == "full_precision":
                qs[p] = None
                continue
            common = dict(grid=e["grid"], bits=e["bits"], group_size=e["group_size"],
                          shape=tuple(e["shape"]), packed=tensors[f"{key}.codes"],
                          awq_scale=tensors.get(f"{key}.awq_scale"))
            if e["grid"] == "uniform":
                qs[p] = QuantizedLinear(scale=tensors[f"{key}.scale"], offset=tensors[f"{key}.offset"], **common)
            else:
                qs[p] = QuantizedLinear(absmax=tensors[f"{key}.absmax"], codebook=nf_codebook(e["bits"]), **common)
        layers.append(qs)
    prov = dict(manifest.get("provenance", {}))
    prov.pop("qmodel_digest", None)
    return QuantizedModel(config, aligned, tuple(layers), spec, prov)


def load_any(path):
    """A .qwt model file or a quantized-model directory."""
    path = Path(path)
    if path.is_dir():
        return load_quantized(path)
    from ..io import load_weights

    return load_weights(path)
