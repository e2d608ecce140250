"""Early exiting (logit lens) and cross-model activation patching."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, NumericError
from .io import TokenCorpus
from .metrics import aligned_reference
from .model import (TapSpec, canonical_tap, final_logits, forward, nll_from_logits, resolve)
from .parallel import parallel_map

EXIT_TAPS = ("r", "z")
PATCH_TAPS = ("attn_out", "gate_out", "up_out", "down_out", "gate_in")
DEFAULT_THRESHOLD = 0.05


# ---------------------------------------------------------------- early exit

def _check_layers(model, layers: Iterable[int]) -> list[int]:
    L = resolve(model).config.n_layers
    layers = sorted(set(int(l) for l in layers))
    for l in layers:
        if not 0 <= l < L:
            raise ConfigError(f"layer {l} out of range [0, {L})")
    return layers


def decode_nll(model, state: np.ndarray, doc) -> float:
    """NLL of decoding a hidden state through the final RMSNorm and U."""
    return nll_from_logits(final_logits(resolve(model), state), doc)


def early_exit_nll(model, doc, layer: int, tap: str = "r") -> float:
    if tap not in EXIT_TAPS:
        raise ConfigError(f"early exit decodes r or z, not {tap!r}")
    _check_layers(model, [layer])
    _, tr = forward(model, doc, TapSpec.of([tap], [layer]), stop_after=layer)
    return decode_nll(model, tr.get(tap, layer), doc)


@dataclass(frozen=True)
class ExitProfile:
    """Mean early-exit NLL per (layer, tap) over a document set."""

    values: Mapping[tuple[int, str], float]
    final_nll: float
    n_docs: int

    @property
    def layers(self) -> list[int]:
        return sorted({l for l, _ in self.values})

    def curve(self, tap: str = "r") -> list[tuple[int, float]]:
        return [(l, self.values[(l, tap)]) for l in self.layers if (l, tap) in self.values]

    def rows(self) -> list[tuple[int, str, float]]:
        return [(l, t, self.values[(l, t)]) for l in self.layers for t in EXIT_TAPS if (l, t) in self.values]


def exit_profile(model, doc_ids: Sequence[int], corpus: TokenCorpus, layer_range: Iterable[int],
                 consistency_tol: float = 1e-5) -> ExitProfile:
    m = resolve(model)
    layers = _check_layers(m, layer_range)
    docs = [corpus.doc(i) for i in doc_ids]
    if not docs:
        raise ConfigError("exit profile needs at least one document")
    L = m.config.n_layers
    spec = TapSpec.of(EXIT_TAPS, layers)

    def one(doc):
        logits, tr = forward(m, doc, spec)
        out = {(l, t): decode_nll(m, tr.get(t, l), doc) for l in layers for t in EXIT_TAPS}
        return out, nll_from_logits(logits, doc)

    rows = parallel_map(one, docs)
    values = {k: float(np.mean([r[0][k] for r in rows])) for k in rows[0][0]}
    final = float(np.mean([r[1] for r in rows]))
    if (L - 1, "z") in values and abs(values[(L - 1, "z")] - final) > consistency_tol:
        raise NumericError(f"exit profile at the last layer ({values[(L - 1, 'z')]}) "
                           f"disagrees with the model NLL ({final})")
    return ExitProfile(values, final, len(docs))


def divergence_layer(profile_base: ExitProfile, profile_q: ExitProfile, threshold: float = DEFAULT_THRESHOLD,
                     tap: str = "r") -> int | None:
    """Smallest layer where the two exit curves differ by more than ``threshold`` nats."""
    if profile_base.layers != profile_q.layers:
        raise ConfigError("profiles cover different layers")
    for l in profile_base.layers:
        if abs(profile_q.values[(l, tap)] - profile_base.values[(l, tap)]) > threshold:
            return l
    return None


# ---------------------------------------------------------------- patching

@dataclass(frozen=True)
class PatchTarget:
    """Taps to overwrite with cached full-precision activations at the given layers.

    For ``gate_in`` only W_gate's input is replaced; set ``include_up_input``
    to also restore W_up's input.
    """

    taps: tuple[str, ...]
    layers: tuple[int, ...]
    name: str | None = None
    include_up_input: bool = False

    def __post_init__(self):
        taps = (self.taps,) if isinstance(self.taps, str) else tuple(self.taps)
        taps = tuple(canonical_tap(t) for t in taps)
        for t in taps:
            if t not in PATCH_TAPS:
                raise ConfigError(f"cannot patch {t!r}; expected one of {PATCH_TAPS}")
        object.__setattr__(self, "taps", taps)
        object.__setattr__(self, "layers", tuple(sorted(set(int(l) for l in self.layers))))

    @property
    def label(self) -> str:
        return self.name or "+".join(self.taps)

    def cached_taps(self) -> tuple[str, ...]:
        extra = ("up_in",) if self.include_up_input and "gate_in" in self.taps else ()
        return self.taps + extra


class TraceCache:
    """LRU cache of base activations keyed by (model digest, doc_id, tap)."""

    def __init__(self, max_entries: int = 4096):
        self.max_entries = max_entries
        self._d: OrderedDict = OrderedDict()

    def get_or_compute(self, model, doc_id, doc, taps: Sequence[str]) -> dict[tuple[str, int], np.ndarray]:
        m = resolve(model)
        missing = [t for t in taps if (m.digest, doc_id, t) not in self._d]
        if missing:
            _, tr = forward(m, doc, TapSpec.of(missing))
            for t in missing:
                self._d[(m.digest, doc_id, t)] = {l: tr.get(t, l) for l in range(m.config.n_layers)}
                if len(self._d) > self.max_entries:
                    self._d.popitem(last=False)
        out = {}
        for t in taps:
            self._d.move_to_end((m.digest, doc_id, t))
            for l, v in self._d[(m.digest, doc_id, t)].items():
                out[(t, l)] = v
        return out


def _check_pair(base, qmodel) -> None:
    if resolve(base).config != resolve(qmodel).config:
        raise ConfigError("base and quantized models have different configs")


def patch_run(base, qmodel, doc, target: PatchTarget, doc_id=None, cache: TraceCache | None = None) -> float:
    """NLL of ``qmodel`` on ``doc`` with the target taps overwritten by base activations."""
    _check_pair(base, qmodel)
    L = resolve(qmodel).config.n_layers
    _check_layers(qmodel, target.layers)
    if not target.layers:
        logits, _ = forward(qmodel, doc)
        return nll_from_logits(logits, doc)
    ref = aligned_reference(base, qmodel)
    cache = cache or TraceCache()
    key = doc_id if doc_id is not None else hash(np.asarray(doc).tobytes())
    cached = cache.get_or_compute(ref, key, doc, target.cached_taps())
    patches = {}
    for t in target.cached_taps():
        for l in target.layers:
            if cached[(t, l)].shape[0] != len(doc):
                raise ConfigError("cached trace does not match the document")
            patches[(t, l)] = cached[(t, l)]
    logits, _ = forward(qmodel, doc, patches=patches)
    return nll_from_logits(logits, doc)


@dataclass(frozen=True)
class PatchTable:
    rows: tuple[tuple[str, float], ...]

    def as_dict(self) -> dict[str, float]:
        return dict(self.rows)


def _ppl(nlls: Sequence[float]) -> float:
    return float(math.exp(float(np.mean(nlls))))


def patch_report(base, qmodel, doc_ids: Sequence[int], corpus: TokenCorpus, targets: Sequence[PatchTarget],
                 extra_models: Mapping[str, object] | None = None) -> PatchTable:
    """exp(mean NLL) over the docs for the full-precision base, the unpatched
    quantized model, each patch target, and any ``extra_models`` (e.g.
    weight-restored variants)."""
    _check_pair(base, qmodel)
    docs = [(i, corpus.doc(i)) for i in doc_ids]
    if not docs:
        raise ConfigError("patch report needs at least one document")
    b, q = resolve(base), resolve(qmodel)
    cache = TraceCache()
    rows = [("full_precision", _ppl([nll_from_logits(forward(b, d)[0], d) for _, d in docs])),
            ("quantized", _ppl([nll_from_logits(forward(q, d)[0], d) for _, d in docs]))]
    for t in targets:
        rows.append((t.label, _ppl([patch_run(base, qmodel, d, t, doc_id=i, cache=cache) for i, d in docs])))
    for name, m in (extra_models or {}).items():
        rows.append((name, _ppl([nll_from_logits(forward(m, d)[0], d) for _, d in docs])))
    return PatchTable(tuple(rows))


def upper_half(n_layers: int) -> tuple[int, ...]:
    return tuple(range(n_layers // 2, n_layers))


def standard_targets(n_layers: int) -> list[PatchTarget]:
    """The four module patches over the upper half plus the gate-input patch."""
    up = upper_half(n_layers)
    return [PatchTarget(("down_out",), up, "patch_h_down"),
            PatchTarget(("gate_out",), up, "patch_h_gate"),
            PatchTarget(("up_out",), up, "patch_h_up"),
            PatchTarget(("attn_out",), up, "patch_h_attn"),
            PatchTarget(("gate_in",), up, "patch_gate_input")]
