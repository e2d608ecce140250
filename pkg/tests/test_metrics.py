import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from conftest import TINY
from quanterr.errors import ConfigError, CorrelationUndefinedError, NumericError, UnknownDocError
from quanterr.io import TokenCorpus
from quanterr.metrics import (DocVector, ErrorVector, build_sets, corr_magnitude_error, error_vector,
                              five_gram_jaccard, gamma_outlier_ranks, jaccard_top_fraction, kl_error,
                              kl_vector, kurtosis, layer_kurtosis, layer_mse, magnitude_vector, nll_vector,
                              pearson, quant_error, residual_magnitude, reversal_report)
from quanterr.model import ActivationTrace, ModelConfig, TapSpec, forward, nll, zeros_like_model
from quanterr.quant import QuantSpec, quantize_model, restore_layers

vec = arrays(np.float64, st.integers(3, 30), elements=st.floats(-1e3, 1e3, allow_nan=False))


def ev(values, ids=None):
    ids = tuple(range(len(values))) if ids is None else ids
    return ErrorVector(ids, np.asarray(values, float))


# ---------------------------------------------------------------- errors

def test_quant_error_of_base_is_zero(tiny_model, tiny_corpus):
    assert quant_error(tiny_model, tiny_model, tiny_corpus.docs[0]) == 0.0


def test_error_vector_matches_two_nll_calls(fixture_model, fixture_corpus, qmodels):
    q = qmodels("RTN3")
    E = error_vector(fixture_model, q, fixture_corpus.subset(fixture_corpus.doc_ids[:5]))
    for i, e in E.as_dict().items():
        d = fixture_corpus.doc(i)
        assert abs(e - (nll(q, d) - nll(fixture_model, d))) < 1e-6
    assert E.provenance["base_digest"] == fixture_model.digest


def test_error_vector_rejects_mismatch(tiny_model, fixture_model, tiny_corpus):
    with pytest.raises(ConfigError):
        error_vector(tiny_model, fixture_model, tiny_corpus)
    with pytest.raises(ConfigError):
        error_vector(tiny_model, tiny_model, TokenCorpus((), (), TINY.vocab_size))


def test_kl_error_properties(tiny_model, tiny_calib, tiny_corpus):
    q = quantize_model(tiny_model, tiny_calib, QuantSpec("rtn", 3, 8))
    doc = tiny_corpus.docs[0]
    assert kl_error(tiny_model, tiny_model, doc) < 1e-9
    assert kl_error(tiny_model, q, doc) > 0
    assert np.all(kl_vector(tiny_model, q, tiny_corpus).values >= 0)


# ---------------------------------------------------------------- pearson

def test_pearson_hand_values():
    assert pearson([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert abs(pearson([1, 2, 3], [1, 2, 4]) - 0.981981) < 1e-6


def test_pearson_zero_variance_is_an_error():
    with pytest.raises(CorrelationUndefinedError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1, 2], [1, 2, 3])


@given(vec, st.integers(0, 2 ** 31))
def test_pearson_properties(a, seed):
    b = np.random.default_rng(seed).standard_normal(a.size)
    assume(np.std(a) > 1e-6)
    r = pearson(a, b)
    assert -1 <= r <= 1
    assert r == pytest.approx(pearson(b, a), abs=1e-12)
    assert r == pytest.approx(pearson(3.5 * a + 2, b), abs=1e-9)
    assert r == pytest.approx(oracles.pearson(list(a), list(b)), abs=1e-9)


def test_corr_magnitude_error_cases():
    S = DocVector((1, 2, 3), [1.0, 2.0, 5.0])
    assert corr_magnitude_error(S, DocVector((3, 1, 2), [-5.0, -1.0, -2.0])) == pytest.approx(-1.0)
    with pytest.raises(CorrelationUndefinedError):
        corr_magnitude_error(DocVector((1, 2, 3), [2.0] * 3), S)


def test_corr_magnitude_error_composition(fixture_model, fixture_corpus, qmodels):
    sub = fixture_corpus.subset(fixture_corpus.doc_ids[:20])
    S = magnitude_vector(fixture_model, sub, 5)
    E = error_vector(fixture_model, qmodels("RTN3"), sub)
    assert corr_magnitude_error(S, E) == pytest.approx(oracles.pearson(list(S.values), list(E.values)), abs=1e-9)


# ---------------------------------------------------------------- jaccard

def test_jaccard_top_fraction_cases():
    e = ev(np.arange(10.0))
    assert jaccard_top_fraction(e, e, 0.2) == 1.0
    assert jaccard_top_fraction(e, ev(-np.arange(10.0)), 0.2) == 0.0
    mixed = ev([9, 0, 0, 0, 0, 0, 0, 0, 8, 0.5])  # top-2 {0, 8} vs {9, 8}
    assert jaccard_top_fraction(mixed, ev(np.arange(10.0)), 0.2) == pytest.approx(1 / 3)
    with pytest.raises(ConfigError):
        jaccard_top_fraction(e, ev(np.arange(10.0), tuple(range(1, 11))), 0.2)


@given(arrays(np.float64, st.integers(2, 40), elements=st.floats(-10, 10), unique=True),
       st.floats(0.01, 1.0))
def test_jaccard_self_is_one(values, frac):
    e = ev(values)
    assert jaccard_top_fraction(e, e, frac) == 1.0


def test_five_gram_hand_values():
    assert five_gram_jaccard([1, 2, 3, 4, 5, 6], [1, 2, 3, 4, 5, 9]) == pytest.approx(1 / 3)
    assert five_gram_jaccard(list(range(8)), list(range(8))) == 1.0
    assert five_gram_jaccard(list(range(8)), list(range(10, 18))) == 0.0
    assert five_gram_jaccard([1, 2], [1, 2, 3, 4, 5]) == 0.0


@given(st.lists(st.integers(0, 3), min_size=5, max_size=25), st.lists(st.integers(0, 3), min_size=5, max_size=25))
def test_five_gram_matches_enumeration(a, b):
    assert five_gram_jaccard(a, b) == pytest.approx(oracles.five_gram_jaccard(a, b), abs=1e-12)


# ---------------------------------------------------------------- magnitudes and kurtosis

def _trace(rows):
    tr = ActivationTrace(length=len(rows))
    tr.data[("r", 0)] = np.asarray(rows, float)
    return tr


def test_residual_magnitude_hand_values():
    assert residual_magnitude(_trace([[3, 4]]), 0) == 5.0
    assert residual_magnitude(_trace([[3, 4], [0, 0]]), 0) == 2.5
    assert residual_magnitude(_trace([[0, 0], [0, 0]]), 0) == 0.0


def test_magnitude_vector_validates_layer(tiny_model, tiny_corpus):
    with pytest.raises(ConfigError):
        magnitude_vector(tiny_model, tiny_corpus, TINY.n_layers)
    v = magnitude_vector(tiny_model, tiny_corpus, 0)
    assert np.all(v.values >= 0) and v.layer == 0


def test_kurtosis_hand_values(rng):
    assert kurtosis([1, -1, 1, -1]) == pytest.approx(1.0)
    spike = [0.0] * 99 + [100.0]
    assert abs(kurtosis(spike) - oracles.kurtosis(spike)) < 1e-9
    assert abs(kurtosis(rng.standard_normal(10 ** 6)) - 3.0) < 0.05
    with pytest.raises(NumericError):
        kurtosis([2, 2, 2])


@given(arrays(np.float64, st.integers(4, 50), elements=st.floats(-100, 100)), st.floats(0.1, 10), st.floats(-5, 5))
def test_kurtosis_affine_invariant_and_oracle(v, a, b):
    assume(np.std(v) > 1e-3)
    k = kurtosis(v)
    assert k == pytest.approx(oracles.kurtosis(list(v)), rel=1e-9)
    assert k == pytest.approx(kurtosis(a * v + b), rel=1e-6)
    assert k == pytest.approx(kurtosis(-v), rel=1e-9)


def test_layer_kurtosis_is_per_doc_over_all_entries(tiny_model, tiny_corpus):
    vec, mean = layer_kurtosis(tiny_model, tiny_corpus, 1, "h")
    doc = tiny_corpus.docs[0]
    _, tr = forward(tiny_model, doc, TapSpec.of(["h2"], [1]))
    assert vec.values[0] == pytest.approx(oracles.kurtosis(list(tr.get("h2", 1).ravel().astype(float))), rel=1e-9)
    assert mean == pytest.approx(vec.values.mean())


# ---------------------------------------------------------------- layer MSE

def test_layer_mse(tiny_model, tiny_calib, tiny_corpus):
    doc = tiny_corpus.docs[0]
    assert layer_mse(tiny_model, tiny_model, doc, 1) == 0.0
    q = quantize_model(tiny_model, tiny_calib, QuantSpec("rtn", 3, 8))
    # layer 0 left full precision, layer 1 quantized
    q0 = restore_layers(q, tiny_model, 0)
    assert layer_mse(tiny_model, q0, doc, 0) == 0.0
    _, a = forward(tiny_model, doc, TapSpec.of(["down_out"], [1]))
    _, b = forward(q, doc, TapSpec.of(["down_out"], [1]))
    naive = np.mean((a.get("down_out", 1).astype(float) - b.get("down_out", 1).astype(float)) ** 2)
    assert abs(layer_mse(tiny_model, q, doc, 1) - naive) < 1e-9


def test_layer_mse_awq_uses_aligned_base(tiny_model, tiny_calib, tiny_corpus):
    q = quantize_model(tiny_model, tiny_calib, QuantSpec("awq", 3, 8, disable_quant=True))
    assert layer_mse(tiny_model, q, tiny_corpus.docs[0], 1) < 1e-10


# ---------------------------------------------------------------- sets

def _distinct_corpus(n, length=12):
    rng = np.random.default_rng(n)
    docs = [[0] + rng.integers(1, 256, length).tolist() for _ in range(n)]
    return TokenCorpus(tuple(range(n)), tuple(docs), 256)


def test_build_sets_sizes_and_disjoint():
    c = _distinct_corpus(100)
    E = ev(np.random.default_rng(1).permutation(100).astype(float))
    s = build_sets(E, c, ctrl_n=10, seed=3)
    assert len(s.large) == 10 and len(s.ctrl) == 10
    assert not set(s.large) & set(s.ctrl)
    ranked = sorted(range(100), key=lambda i: -E.values[i])
    assert set(s.large) == set(ranked[:10])
    assert set(s.ctrl) <= set(ranked[50:])
    assert build_sets(E, c, ctrl_n=10, seed=3) == s


def test_build_sets_drops_duplicate_top_doc():
    c = _distinct_corpus(20)
    docs = list(c.docs)
    docs[1] = docs[0]
    c = TokenCorpus(c.doc_ids, tuple(docs), 256)
    E = ev([10.0, 9.0] + [0.0] * 18)
    s = build_sets(E, c, ctrl_n=2, top_frac=0.1, seed=0)
    assert s.large == (0,)
    assert s.dedup_log[0][:2] == (1, 0) and s.warnings


def test_build_sets_short_pool_warns():
    c = _distinct_corpus(10)
    s = build_sets(ev(np.arange(10.0)), c, ctrl_n=8, seed=0)
    assert len(s.ctrl) == 5 and any("pool" in w for w in s.warnings)


def test_build_sets_tie_at_boundary_broken_by_id():
    c = _distinct_corpus(20)
    s = build_sets(ev([1.0] * 20), c, ctrl_n=1, top_frac=0.1, seed=0)
    assert s.large == (0, 1)


# ---------------------------------------------------------------- RMSNorm analyses

def _gamma_model(gamma):
    cfg = ModelConfig(n_layers=1, d_model=4, n_heads=2, d_ff=4, vocab_size=6, max_seq=8)
    E = np.array([[0, 0, 0, 0], [9, 1, 1, 1], [8, 2, 1, 1], [7, 1, 2, 1], [9, 1, 1, 2], [8, 1, 1, 1]], float)
    m = zeros_like_model(cfg, E, np.zeros((6, 4)))
    return m.replace_layer(0, m.layers[0].with_(gamma2=np.asarray(gamma, float)))


def test_gamma_outlier_rank_hand_case():
    m = _gamma_model([0.1, 0.2, 0.3, 0.4])
    c = TokenCorpus((0, 1), ([0, 1, 2], [0, 3, 4, 5]), 6)
    (top,) = gamma_outlier_ranks(m, c, 0, 1)
    assert top.dimension == 0 and top.rank == 1
    assert top.gamma_abs == pytest.approx(0.1) and top.gamma_median == pytest.approx(0.25)


def test_gamma_outlier_rank_constant_gamma():
    m = _gamma_model([1.0] * 4)
    c = TokenCorpus((0,), ([0, 1, 2],), 6)
    ranks = gamma_outlier_ranks(m, c, 0, 2)
    assert [r.rank for r in ranks] == [1, 2] and ranks[0].gamma_median == 1.0


def test_fixture_planted_channels_get_top_gamma_ranks(fixture_model, fixture_corpus):
    ranks = gamma_outlier_ranks(fixture_model, fixture_corpus, 5, 2)
    assert all(r.rank <= 2 for r in ranks)


def test_reversal_same_sets_no_flags(tiny_model, tiny_corpus):
    ids = list(tiny_corpus.doc_ids[:4])
    rows = reversal_report(tiny_model, ids, ids, tiny_corpus, range(TINY.n_layers))
    assert not any(r.flagged for r in rows)


def test_reversal_unknown_ids(tiny_model, tiny_corpus):
    with pytest.raises(UnknownDocError):
        reversal_report(tiny_model, [999], [0], tiny_corpus, [0])


@pytest.fixture(scope="module")
def kl_and_error(fixture_model, fixture_corpus, qmodels):
    q = qmodels("RTN3")
    return error_vector(fixture_model, q, fixture_corpus), kl_vector(fixture_model, q, fixture_corpus)


def test_kl_error_correlation_frozen(kl_and_error):
    E, K = kl_and_error
    # frozen at seed 42; per-doc error is a one-sample estimate of per-doc KL over 64 tokens
    assert abs(pearson(E.values, K.values) - 0.6894135136470367) < 1e-6


@pytest.mark.xfail(strict=True, reason="measured 0.689 on the 64-token fixture, see decisions ledger")
def test_kl_tracks_nll_error(kl_and_error):
    E, K = kl_and_error
    assert pearson(E.values, K.values) >= 0.9


def test_outlier_rich_docs_reverse_at_last_layer(fixture_model, fixture_corpus):
    from quanterr.fixture import DEFAULT_CONFIG, STUDY_PLAN, outlier_channels
    L = fixture_model.config.n_layers
    channels = outlier_channels(DEFAULT_CONFIG, 42, STUDY_PLAN)
    score = [np.abs(forward(fixture_model, d, TapSpec.of(["r"], [L - 1]))[1].get("r", L - 1)[:, channels]).mean()
             for d in fixture_corpus.docs]
    order = np.argsort(score, kind="stable")
    rich = [fixture_corpus.doc_ids[i] for i in order[-10:]]
    poor = [fixture_corpus.doc_ids[i] for i in order[:10]]
    last = reversal_report(fixture_model, rich, poor, fixture_corpus, [L - 1])[0]
    assert last.r_a > last.r_b and last.h_a < last.h_b
    # frozen at seed 42
    assert abs(last.r_a - 27.690386979665174) < 1e-6 and abs(last.h_a - 3.3870920383830216) < 1e-6
