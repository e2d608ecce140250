import numpy as np

from quanterr.fixture import (DEFAULT_CONFIG, OutlierPlan, STUDY_PLAN, gen_corpus, gen_fixture, outlier_channels,
                              planted_positions, sample_corpus)
from quanterr.metrics import mean_abs_activation, nll_vector


def test_same_seed_same_weights():
    a = gen_fixture(seed=9)
    b = gen_fixture(seed=9)
    assert a.digest == b.digest
    assert gen_fixture(seed=10).digest != a.digest


def test_corpus_is_deterministic(tiny_model):
    assert gen_corpus(64, 10, 8, seed=2).digest == gen_corpus(64, 10, 8, seed=2).digest
    assert sample_corpus(tiny_model, 5, 8, seed=2).digest == sample_corpus(tiny_model, 5, 8, seed=2).digest


def test_corpus_shape_and_bos():
    c = gen_corpus(256, 100, 64, seed=0)
    assert len(c) == 100 and c.vocab_size == 256
    assert all(d[0] == 0 and len(d) == 65 and d[1:].min() >= 1 for d in c.docs)


def test_boosted_channels_have_highest_mean_abs_r():
    # default plan (boost 50, gamma2 only) on the uniform corpus
    plan = OutlierPlan(k=2, boost=50.0)
    m = gen_fixture(seed=42, outlier_plan=plan)
    c = gen_corpus(256, 30, 32, seed=1)
    act = mean_abs_activation(m, c, DEFAULT_CONFIG.n_layers - 1)
    top = set(np.argsort(-act)[:2].tolist())
    assert top == set(outlier_channels(DEFAULT_CONFIG, 42, plan).tolist())


def test_study_fixture_outliers_rank_top(fixture_model, fixture_corpus):
    act = mean_abs_activation(fixture_model, fixture_corpus, DEFAULT_CONFIG.n_layers - 1)
    top = set(np.argsort(-act)[:2].tolist())
    assert top == set(outlier_channels(DEFAULT_CONFIG, 42, STUDY_PLAN).tolist())


def test_no_outlier_model_has_no_massive_channel(plain_model, fixture_corpus):
    act = mean_abs_activation(plain_model, fixture_corpus, DEFAULT_CONFIG.n_layers - 1)
    ratio = act.max() / np.median(act)
    # frozen at seed 42
    assert ratio < 10
    assert abs(ratio - 1.3606327538256098) < 1e-6


def test_planted_low_entropy_docs_have_below_median_nll(fixture_model, fixture_corpus):
    v = nll_vector(fixture_model, fixture_corpus)
    low = planted_positions(100, 42, 0.3)
    assert len(low) == 30
    assert np.all(v.values[low] < np.median(v.values))


def test_uniform_corpus_low_entropy_subset_below_median(fixture_model):
    from quanterr.fixture import low_entropy_ids
    c = gen_corpus(256, 100, 64, seed=42)
    v = nll_vector(fixture_model, c)
    low = low_entropy_ids(c)
    assert len(low) == 30
    assert np.mean(v.subset(low) < np.median(v.values)) == 1.0
