import numpy as np
import pytest

from tempmerge.corpuslab import CorpusConfig, build_world
from tempmerge.encoder import EncoderParams

SMALL = dict(entity_count=30, facts_per_entity=12, queries_per_specifier=20,
             nontemporal_query_count=30, train_scale=0.02, seed=3)


@pytest.fixture(scope="session")
def small_config():
    return CorpusConfig(**SMALL)


@pytest.fixture(scope="session")
def small_world(small_config):
    return build_world(small_config)


@pytest.fixture(scope="session")
def default_world():
    return build_world(CorpusConfig())


def random_params(V=12, d=4, seed=0, vocab_hash=""):
    rng = np.random.default_rng(seed)
    return EncoderParams(rng.standard_normal((V, d)), rng.standard_normal((d, d)),
                         rng.standard_normal(d), vocab_hash)


@pytest.fixture
def toy_params():
    return random_params()


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, in criterion order."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call":
                continue
            props = dict(rep.user_properties)
            if "criterion" in props:
                lines.append((props["criterion"], outcome.upper()[:4], props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for num, status, detail in sorted(lines):
            terminalreporter.write_line(f"criterion {num:>2}: {status}  {detail}")
