"""Per-example errors, correlations, magnitudes, kurtosis and set construction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, CorrelationUndefinedError, NumericError
from .io import TokenCorpus
from .model import (TapSpec, canonical_tap, forward, log_softmax, nll, nll_from_logits, resolve)
from .parallel import parallel_map

log = logging.getLogger(__name__)


def aligned_reference(base, qmodel):
    """The full-precision model whose activations line up with ``qmodel``'s.

    For AWQ this is the scale-folded base (identical outputs, aligned
    activations); for every other quantizer it is ``base`` itself.
    """
    aligned = getattr(qmodel, "aligned", None)
    return aligned if aligned is not None else resolve(base)


def _same_config(a, b) -> None:
    if resolve(a).config != resolve(b).config:
        raise ConfigError("models have different configs")


# ---------------------------------------------------------------- vectors

@dataclass(frozen=True)
class DocVector:
    doc_ids: tuple[int, ...]
    values: np.ndarray
    provenance: Mapping = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (len(self.doc_ids),):
            raise ValueError("one value per doc_id required")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "doc_ids", tuple(int(i) for i in self.doc_ids))

    def __len__(self) -> int:
        return len(self.doc_ids)

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.doc_ids, self.values.tolist()))

    def aligned_with(self, other: "DocVector") -> tuple[np.ndarray, np.ndarray]:
        if set(self.doc_ids) != set(other.doc_ids):
            raise ConfigError("vectors cover different documents")
        o = other.as_dict()
        return self.values, np.array([o[i] for i in self.doc_ids])

    def subset(self, doc_ids: Iterable[int]) -> np.ndarray:
        d = self.as_dict()
        return np.array([d[i] for i in doc_ids])


class ErrorVector(DocVector):
    pass


@dataclass(frozen=True)
class MagnitudeVector(DocVector):
    layer: int = -1
    tap: str = "r"


# ---------------------------------------------------------------- errors

def quant_error(base, qmodel, doc) -> float:
    _same_config(base, qmodel)
    return nll(qmodel, doc) - nll(base, doc)


def error_vector(base, qmodel, corpus: TokenCorpus) -> ErrorVector:
    if len(corpus) == 0:
        raise ConfigError("empty corpus")
    _same_config(base, qmodel)
    b, q = resolve(base), resolve(qmodel)
    vals = parallel_map(lambda d: nll(q, d) - nll(b, d), corpus.docs)
    return ErrorVector(corpus.doc_ids, np.array(vals),
                       {"base_digest": b.digest, "quant_digest": getattr(qmodel, "digest", q.digest)})


def nll_vector(model, corpus: TokenCorpus) -> DocVector:
    m = resolve(model)
    return DocVector(corpus.doc_ids, np.array(parallel_map(lambda d: nll(m, d), corpus.docs)),
                     {"model_digest": m.digest})


def kl_error(base, qmodel, doc) -> float:
    """Mean over predicted positions of KL(p_base || p_quant)."""
    _same_config(base, qmodel)
    lb, _ = forward(base, doc)
    lq, _ = forward(qmodel, doc)
    pb, pq = log_softmax(lb[:-1]), log_softmax(lq[:-1])
    kl = np.sum(np.exp(pb) * (pb - pq), axis=-1)
    return float(max(kl.mean(), 0.0))


def kl_vector(base, qmodel, corpus: TokenCorpus) -> DocVector:
    b, q = resolve(base), resolve(qmodel)
    return DocVector(corpus.doc_ids, np.array(parallel_map(lambda d: kl_error(b, q, d), corpus.docs)))


# ---------------------------------------------------------------- statistics

def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("pearson needs two equal-length 1-D vectors")
    if a.size < 2:
        raise ValueError("pearson needs at least two values")
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = float(da @ da), float(db @ db)
    if saa == 0.0 or sbb == 0.0:
        raise CorrelationUndefinedError("correlation undefined: zero variance input")
    r = float(da @ db) / math.sqrt(saa * sbb)
    return min(1.0, max(-1.0, r))


def pearson_vectors(a: DocVector, b: DocVector) -> float:
    return pearson(*a.aligned_with(b))


def top_ids(vec: DocVector, frac: float) -> list[int]:
    """Top ``ceil(frac * N)`` doc ids by value, ties broken by ascending doc_id."""
    if not 0 < frac <= 1:
        raise ValueError("frac must be in (0, 1]")
    k = math.ceil(frac * len(vec))
    order = sorted(zip(vec.doc_ids, vec.values.tolist()), key=lambda t: (-t[1], t[0]))
    return [i for i, _ in order[:k]]


def jaccard(a: Iterable, b: Iterable) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def jaccard_top_fraction(e1: DocVector, e2: DocVector, frac: float) -> float:
    if set(e1.doc_ids) != set(e2.doc_ids):
        raise ConfigError("error vectors cover different corpora")
    return jaccard(top_ids(e1, frac), top_ids(e2, frac))


def kurtosis(values) -> float:
    """Pearson (non-excess) kurtosis with population moments."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        raise ValueError("kurtosis needs at least two values")
    d = v - v.mean()
    m2 = float(np.mean(d * d))
    if m2 == 0.0:
        raise NumericError("kurtosis undefined: zero variance")
    return float(np.mean(d ** 4) / (m2 * m2))


# ---------------------------------------------------------------- magnitudes

def residual_magnitude(trace, layer: int, tap: str = "r") -> float:
    rows = trace.get(tap, layer)
    return float(np.mean(np.linalg.norm(np.asarray(rows, dtype=np.float64), axis=-1)))


def _check_layer(model, layer: int) -> None:
    L = resolve(model).config.n_layers
    if not 0 <= layer < L:
        raise ConfigError(f"layer {layer} out of range [0, {L})")


def magnitude_vector(model, corpus: TokenCorpus, layer: int, tap: str = "r") -> MagnitudeVector:
    _check_layer(model, layer)
    tap = canonical_tap(tap)
    m = resolve(model)
    spec = TapSpec.of([tap], [layer])

    def one(doc):
        _, tr = forward(m, doc, spec, stop_after=layer)
        return residual_magnitude(tr, layer, tap)

    return MagnitudeVector(corpus.doc_ids, np.array(parallel_map(one, corpus.docs)), {}, layer, tap)


def magnitude_table(model, corpus: TokenCorpus, layers: Sequence[int], taps: Sequence[str] = ("r",)
                    ) -> dict[tuple[str, int], MagnitudeVector]:
    """All (tap, layer) magnitude vectors from one forward per document."""
    m = resolve(model)
    taps = [canonical_tap(t) for t in taps]
    for l in layers:
        _check_layer(m, l)
    spec = TapSpec.of(taps, layers)

    def one(doc):
        _, tr = forward(m, doc, spec, stop_after=max(layers))
        return {(t, l): residual_magnitude(tr, l, t) for t in taps for l in layers}

    rows = parallel_map(one, corpus.docs)
    return {(t, l): MagnitudeVector(corpus.doc_ids, np.array([r[(t, l)] for r in rows]), {}, l, t)
            for t in taps for l in layers}


def corr_magnitude_error(S: DocVector, E: DocVector) -> float:
    return pearson_vectors(S, E)


def layer_kurtosis(model, corpus: TokenCorpus, layer: int, tap: str = "r") -> tuple[DocVector, float]:
    _check_layer(model, layer)
    tap = canonical_tap(tap)
    m = resolve(model)
    spec = TapSpec.of([tap], [layer])

    def one(doc):
        _, tr = forward(m, doc, spec, stop_after=layer)
        return kurtosis(tr.get(tap, layer))

    vec = DocVector(corpus.doc_ids, np.array(parallel_map(one, corpus.docs)), {"layer": layer, "tap": tap})
    return vec, float(vec.values.mean())


def layer_mse(base, qmodel, doc, layer: int) -> float:
    """MSE between the MLP outputs of the (aligned) base and quantized models at ``layer``.

    Each model runs on its own upstream states.
    """
    _same_config(base, qmodel)
    _check_layer(base, layer)
    ref = aligned_reference(base, qmodel)
    spec = TapSpec.of(["down_out"], [layer])
    _, tb = forward(ref, doc, spec, stop_after=layer)
    _, tq = forward(qmodel, doc, spec, stop_after=layer)
    d = np.asarray(tb.get("down_out", layer), np.float64) - np.asarray(tq.get("down_out", layer), np.float64)
    return float(np.mean(d * d))


# ---------------------------------------------------------------- dedup / sets

def ngrams(doc, n: int = 5) -> set[tuple[int, ...]]:
    doc = [int(t) for t in doc]
    return {tuple(doc[i:i + n]) for i in range(len(doc) - n + 1)}


def five_gram_jaccard(doc_a, doc_b) -> float:
    if len(doc_a) < 5 or len(doc_b) < 5:
        log.warning("five_gram_jaccard: document shorter than 5 tokens, similarity set to 0")
        return 0.0
    return jaccard(ngrams(doc_a), ngrams(doc_b))


@dataclass(frozen=True)
class SplitSets:
    large: tuple[int, ...]
    ctrl: tuple[int, ...]
    dedup_log: tuple[tuple[int, int, float], ...] = ()
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"large": list(self.large), "ctrl": list(self.ctrl),
                "dedup_log": [{"dropped": a, "kept": b, "similarity": s} for a, b, s in self.dedup_log],
                "warnings": list(self.warnings)}


def build_sets(E: DocVector, corpus: TokenCorpus, ctrl_n: int, top_frac: float = 0.10,
               ctrl_frac_pool: float = 0.50, dedup_thresh: float = 0.1, seed: int = 0) -> SplitSets:
    """Large-error set (deduplicated top fraction) and a seeded control sample from the bottom pool."""
    if set(E.doc_ids) != set(corpus.doc_ids):
        raise ConfigError("error vector and corpus cover different documents")
    N = len(E)
    ranked = sorted(zip(E.doc_ids, E.values.tolist()), key=lambda t: (-t[1], t[0]))
    top = [i for i, _ in ranked[: math.ceil(top_frac * N)]]
    grams = {i: ngrams(corpus.doc(i)) for i in top}
    kept: list[int] = []
    dropped = []
    for i in top:
        clash = None
        for j in kept:
            if len(corpus.doc(i)) < 5 or len(corpus.doc(j)) < 5:
                continue
            s = jaccard(grams[i], grams[j])
            if s > dedup_thresh:
                clash = (i, j, s)
                break
        if clash:
            dropped.append(clash)
        else:
            kept.append(i)
    warnings = []
    if dropped:
        warnings.append(f"dedup removed {len(dropped)} of {len(top)} large-error docs")

    pool_n = math.ceil(ctrl_frac_pool * N)
    pool = sorted(i for i, _ in ranked[N - pool_n:])
    n = ctrl_n
    if n > len(pool):
        warnings.append(f"requested {ctrl_n} control docs, pool has {len(pool)}")
        n = len(pool)
    rng = np.random.default_rng(seed)
    ctrl = sorted(int(pool[k]) for k in rng.choice(len(pool), size=n, replace=False))
    return SplitSets(tuple(kept), tuple(ctrl), tuple(dropped), tuple(warnings))


# ---------------------------------------------------------------- RMSNorm analyses

@dataclass(frozen=True)
class OutlierRank:
    dimension: int
    mean_abs: float
    rank: int
    gamma_abs: float
    gamma_median: float


def mean_abs_activation(model, corpus: TokenCorpus, layer: int, tap: str = "r") -> np.ndarray:
    """Per-channel mean |activation| pooled over all tokens of all documents."""
    _check_layer(model, layer)
    m = resolve(model)
    tap = canonical_tap(tap)
    spec = TapSpec.of([tap], [layer])

    def one(doc):
        _, tr = forward(m, doc, spec, stop_after=layer)
        a = np.abs(np.asarray(tr.get(tap, layer), np.float64))
        return a.sum(axis=0), a.shape[0]

    parts = parallel_map(one, corpus.docs)
    return sum(p[0] for p in parts) / sum(p[1] for p in parts)


def gamma_outlier_ranks(model, corpus: TokenCorpus, layer: int, k: int) -> list[OutlierRank]:
    """The k most-activated residual channels with the rank of their |gamma2| (1 = smallest)."""
    m = resolve(model)
    d = m.config.d_model
    if not 1 <= k <= d:
        raise ConfigError(f"k must be in [1, {d}]")
    act = mean_abs_activation(m, corpus, layer, "r")
    outliers = sorted(range(d), key=lambda j: (-act[j], j))[:k]
    g = np.abs(np.asarray(m.layers[layer].gamma2, np.float64))
    order = sorted(range(d), key=lambda j: (g[j], j))
    rank = {j: i + 1 for i, j in enumerate(order)}
    med = float(np.median(g))
    return [OutlierRank(j, float(act[j]), rank[j], float(g[j]), med) for j in outliers]


@dataclass(frozen=True)
class ReversalRow:
    layer: int
    r_a: float
    r_b: float
    h_a: float
    h_b: float

    @property
    def flagged(self) -> bool:
        return self.r_a < self.r_b and self.h_a > self.h_b

    @property
    def opposite(self) -> bool:
        return (self.r_a - self.r_b) * (self.h_a - self.h_b) < 0


def reversal_report(model, set_a: Sequence[int], set_b: Sequence[int], corpus: TokenCorpus,
                    layer_range: Sequence[int]) -> list[ReversalRow]:
    """Mean pre-norm (r) and post-norm (h) magnitudes per layer for two document sets.

    A row is flagged when set A has the smaller residual magnitude but the
    larger post-RMSNorm magnitude.
    """
    layers = list(layer_range)
    for i in list(set_a) + list(set_b):
        corpus.doc(i)
    table_a = magnitude_table(model, corpus.subset(list(set_a)), layers, ("r", "h2"))
    table_b = magnitude_table(model, corpus.subset(list(set_b)), layers, ("r", "h2"))
    return [ReversalRow(l, float(table_a[("r", l)].values.mean()), float(table_b[("r", l)].values.mean()),
                        float(table_a[("h2", l)].values.mean()), float(table_b[("h2", l)].values.mean()))
            for l in layers]


def base_nll_and_error(base, qmodel, corpus: TokenCorpus) -> tuple[DocVector, ErrorVector]:
    b, q = resolve(base), resolve(qmodel)

    def one(doc):
        nb = nll_from_logits(forward(b, doc)[0], doc)
        return nb, nll_from_logits(forward(q, doc)[0], doc) - nb

    rows = parallel_map(one, corpus.docs)
    return (DocVector(corpus.doc_ids, np.array([r[0] for r in rows])),
            ErrorVector(corpus.doc_ids, np.array([r[1] for r in rows])))
