"""Seeded synthetic models and corpora for desk-scale experiments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .io import BOS_ID, TokenCorpus
from .model import NORMS, PROJECTIONS, LayerWeights, ModelConfig, ModelWeights, batch_logits, log_softmax

DEFAULT_CONFIG = ModelConfig(n_layers=6, d_model=64, n_heads=4, d_ff=256,
                             vocab_size=256, max_seq=128)


@dataclass(frozen=True)
class OutlierPlan:
    """Plant ``k`` massive residual channels.

    The output rows of W_o and W_down feeding the chosen channels are scaled by
    ``boost`` and the RMSNorm weights listed in ``suppress`` are set to
    ``gamma_value`` on those channels.
    """

    k: int = 2
    boost: float = 50.0
    gamma_value: float = 0.02
    suppress: tuple[str, ...] = ("gamma2",)
    layers: tuple[int, ...] | None = None


# Settings used by the bundled study: massive channels suppressed at every norm
# so they never dominate the logits.
STUDY_PLAN = OutlierPlan(k=2, boost=20.0, suppress=("gamma1", "gamma2", "final_norm"))
STUDY_TIE = 0.1
STUDY_SUBLAYER_SCALE = 1.0


def outlier_channels(config: ModelConfig, seed: int, plan: OutlierPlan) -> np.ndarray:
    rng = np.random.default_rng([seed, 7])
    return np.sort(rng.choice(config.d_model, size=plan.k, replace=False))


def gen_fixture(config: ModelConfig = DEFAULT_CONFIG, seed: int = 0,
                outlier_plan: OutlierPlan | None = None,
                tie: float = 0.15, sublayer_scale: float = 0.6) -> ModelWeights:
    """Deterministic random weights.

    The unembedding is a noisy copy of the embedding scaled by ``tie`` so that
    the residual stream carries a "repeat the current token" prediction; this
    gives low-entropy documents visibly lower NLL than random ones.
    """
    rng = np.random.default_rng(seed)
    d, V = config.d_model, config.vocab_size
    embed = rng.standard_normal((V, d))
    unembed = tie * embed + 0.3 * tie * rng.standard_normal((V, d))
    layers = []
    for _ in range(config.n_layers):
        kw = {}
        for p in PROJECTIONS:
            out, inp = config.projection_shape(p)
            kw[p] = sublayer_scale * rng.standard_normal((out, inp)) / np.sqrt(inp)
        for g in NORMS:
            kw[g] = 1.0 + 0.1 * rng.standard_normal(d)
        layers.append(kw)
    final_norm = np.ones(d)

    if outlier_plan is not None and outlier_plan.k > 0:
        chans = outlier_channels(config, seed, outlier_plan)
        targets = range(config.n_layers) if outlier_plan.layers is None else outlier_plan.layers
        for l in targets:
            layers[l]["o"][chans, :] *= outlier_plan.boost
            layers[l]["down"][chans, :] *= outlier_plan.boost
        for l in range(config.n_layers):
            for g in outlier_plan.suppress:
                if g in NORMS:
                    layers[l][g][chans] = outlier_plan.gamma_value
        if "final_norm" in outlier_plan.suppress:
            final_norm[chans] = outlier_plan.gamma_value

    return ModelWeights(config=config, embed=embed,
                        layers=tuple(LayerWeights(**kw) for kw in layers),
                        final_norm=final_norm, unembed=unembed)


def _low_entropy_body(rng, vocab_size: int, doc_len: int, alphabet: int) -> np.ndarray:
    letters = rng.choice(np.arange(1, vocab_size), size=alphabet, replace=False)
    toks: list[int] = []
    while len(toks) < doc_len:
        toks.extend([int(rng.choice(letters))] * int(rng.integers(2, 6)))
    return np.asarray(toks[:doc_len])


def gen_corpus(vocab_size: int = 256, n_docs: int = 100, doc_len: int = 64, seed: int = 0,
               low_entropy_frac: float = 0.3, alphabet: int = 4, first_id: int = 0,
               truncation: int = 512) -> TokenCorpus:
    """Uniform-random documents plus a planted low-entropy subset.

    Low-entropy documents draw from a small per-document alphabet in runs of
    repeated tokens. Every document is ``[BOS] + doc_len`` tokens; id 0 is
    never emitted as content. Doc ids are ``first_id, first_id + 1, ...``.
    """
    rng = np.random.default_rng(seed)
    n_low = int(round(low_entropy_frac * n_docs))
    low = set(rng.choice(n_docs, size=n_low, replace=False).tolist()) if n_low else set()
    docs = []
    for i in range(n_docs):
        if i in low:
            body = _low_entropy_body(rng, vocab_size, doc_len, alphabet)
        else:
            body = rng.integers(1, vocab_size, size=doc_len)
        docs.append(np.concatenate([[BOS_ID], body]))
    ids = tuple(range(first_id, first_id + n_docs))
    return TokenCorpus(ids, tuple(docs), vocab_size, truncation)


def sample_docs(model: ModelWeights, n_docs: int, doc_len: int, seed: int,
                temperature: float = 1.0) -> np.ndarray:
    """Ancestral samples from ``model`` after BOS, shape (n_docs, doc_len + 1).

    BOS is masked out of every step's distribution.
    """
    if doc_len + 1 > model.config.max_seq:
        raise ValueError(f"doc_len {doc_len} exceeds max_seq - 1")
    rng = np.random.default_rng([seed, 11])
    docs = np.full((n_docs, 1), BOS_ID, dtype=np.int64)
    for _ in range(doc_len):
        logits = batch_logits(model, docs)[:, -1].astype(np.float64) / temperature
        logits[:, BOS_ID] = -np.inf
        cdf = np.exp(log_softmax(logits)).cumsum(axis=1)
        u = rng.random(n_docs)[:, None] * cdf[:, -1:]
        tok = np.minimum((cdf < u).sum(axis=1), cdf.shape[1] - 1)
        docs = np.concatenate([docs, tok[:, None]], axis=1)
    return docs


def planted_positions(n_docs: int, seed: int, frac: float) -> list[int]:
    """Indices of the planted low-entropy documents of a sampled corpus."""
    n_low = int(round(frac * n_docs))
    rng = np.random.default_rng(seed)
    return sorted(rng.choice(n_docs, size=n_low, replace=False).tolist()) if n_low else []


def sample_corpus(model: ModelWeights, n_docs: int = 100, doc_len: int = 64, seed: int = 0,
                  low_entropy_frac: float = 0.3, low_temperature: float = 0.5, first_id: int = 0,
                  truncation: int = 512) -> TokenCorpus:
    """Documents sampled from ``model`` with a planted low-entropy subset.

    Sampling from the model makes it the true distribution of the corpus, so
    expected quantization error is non-negative. The planted subset is sampled
    at ``low_temperature``; its ids are ``first_id + planted_positions(...)``.
    """
    low = set(planted_positions(n_docs, seed, low_entropy_frac))
    normal = sample_docs(model, n_docs, doc_len, seed)
    cold = sample_docs(model, n_docs, doc_len, seed + 1, temperature=low_temperature) if low else normal
    docs = tuple(cold[i] if i in low else normal[i] for i in range(n_docs))
    ids = tuple(range(first_id, first_id + n_docs))
    return TokenCorpus(ids, docs, model.config.vocab_size, truncation)


def study_fixture(seed: int = 42, outliers: bool = True) -> ModelWeights:
    return gen_fixture(DEFAULT_CONFIG, seed, STUDY_PLAN if outliers else None,
                       tie=STUDY_TIE, sublayer_scale=STUDY_SUBLAYER_SCALE)


def low_entropy_ids(corpus: TokenCorpus, max_distinct: int = 8) -> list[int]:
    return [i for i, d in corpus if np.unique(d[1:]).size <= max_distinct]
