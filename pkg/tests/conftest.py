import numpy as np
import pytest

from quads.corpus import SyntheticCorpusSpec, generate_synthetic_corpus, load_corpus
from quads.models import EncoderConfig, initialize
from quads.trainer import train_supervised

# half-second clips keep the shared fixtures fast
SMALL_SPEC = SyntheticCorpusSpec(samples_per_class=12, duration=0.5, snr_db=10.0, seed=3)
TEACHER_CFG = EncoderConfig(conv_layers=((3, 48, 2), (3, 48, 2)), ff_layers=(96,), latent_dim=16)
STUDENT_CFG = EncoderConfig(conv_layers=((3, 16, 2), (3, 16, 2)), ff_layers=(32,), latent_dim=16)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus") / "c"
    generate_synthetic_corpus(SMALL_SPEC, root)
    return root


@pytest.fixture(scope="session")
def small_data(small_corpus):
    return load_corpus(small_corpus)


@pytest.fixture(scope="session")
def small_teacher(small_data):
    model = initialize(TEACHER_CFG, seed=0, n_classes=small_data.n_classes)
    best, _ = train_supervised(model, small_data, epochs=6, seed=0)
    return best.as_teacher()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
