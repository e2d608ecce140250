import numpy as np
import pytest
import yaml
from hypothesis import HealthCheck, settings

from quanterr.fixture import DEFAULT_CONFIG, gen_fixture, sample_corpus, study_fixture
from quanterr.io import save_corpus, save_weights
from quanterr.model import ModelConfig
from quanterr.quant import QuantSpec, quantize_model

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SEED = 42
TINY = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=32, max_seq=24)


@pytest.fixture(scope="session")
def tiny_model():
    return gen_fixture(TINY, seed=3)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_model):
    return sample_corpus(tiny_model, n_docs=12, doc_len=16, seed=5)


@pytest.fixture(scope="session")
def tiny_calib(tiny_model):
    return sample_corpus(tiny_model, n_docs=4, doc_len=16, seed=6, low_entropy_frac=0.0, first_id=100)


@pytest.fixture(scope="session")
def fixture_model():
    return study_fixture(SEED)


@pytest.fixture(scope="session")
def plain_model():
    return study_fixture(SEED, outliers=False)


@pytest.fixture(scope="session")
def fixture_corpus(fixture_model):
    return sample_corpus(fixture_model, 100, 64, SEED)


@pytest.fixture(scope="session")
def fixture_calib(fixture_model):
    return sample_corpus(fixture_model, 16, 64, SEED + 1000, 0.0, first_id=100)


STUDY_SPECS = {
    "RTN3": QuantSpec("rtn", 3), "RTN4": QuantSpec("rtn", 4), "NF3": QuantSpec("nf", 3),
    "GPTQ3": QuantSpec("gptq", 3), "AWQ3": QuantSpec("awq", 3),
}


@pytest.fixture(scope="session")
def qmodels(fixture_model, fixture_calib):
    """Lazily quantized fixture models keyed by spec label."""
    cache = {}

    def get(label):
        if label not in cache:
            cache[label] = quantize_model(fixture_model, fixture_calib, STUDY_SPECS[label])
        return cache[label]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def write_study_dir(path, model, corpus, calib, specs, **extra):
    """Lay out model.qwt, corpus.qcorp, calib.qcorp and study.yaml under ``path``."""
    path.mkdir(parents=True, exist_ok=True)
    save_weights(model, path / "model.qwt")
    save_corpus(corpus, path / "corpus.qcorp")
    save_corpus(calib, path / "calib.qcorp")
    cfg = {"model": "model.qwt", "corpus": "corpus.qcorp", "calibration": "calib.qcorp", "seed": SEED,
           "specs": [s.to_dict() if isinstance(s, QuantSpec) else s for s in specs], **extra}
    (path / "study.yaml").write_text(yaml.safe_dump(cfg, sort_keys=False))
    return path / "study.yaml"


@pytest.fixture(scope="session")
def tiny_study(tmp_path_factory, tiny_model, tiny_corpus, tiny_calib):
    """Config path for a two-spec study on the tiny model."""
    return write_study_dir(tmp_path_factory.mktemp("tiny"), tiny_model, tiny_corpus, tiny_calib,
                           [QuantSpec("rtn", 3, 8), QuantSpec("nf", 3, 8)],
                           sets={"ctrl_n": 2, "top_frac": 0.25})


@pytest.fixture(scope="session")
def fixture_study(tmp_path_factory, fixture_model, fixture_corpus, fixture_calib):
    """Config path for the five-spec study on the seed-42 fixture."""
    return write_study_dir(tmp_path_factory.mktemp("fixture"), fixture_model, fixture_corpus, fixture_calib,
                           list(STUDY_SPECS.values()))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
