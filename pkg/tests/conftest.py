import pytest

from excel.dataset import load_dataset
from excel.encoder import load_weights
from excel.fixtures import FixtureSpec, generate_fixtures
from excel.numerics import Rng
from excel.text_enrichment import build_text_bank, ingest_knowledge

FIXTURE_SEED = 42


@pytest.fixture(scope="session")
def fixture_paths(tmp_path_factory):
    root = tmp_path_factory.mktemp("fixtures")
    return generate_fixtures(FIXTURE_SEED, FixtureSpec(), root)


@pytest.fixture(scope="session")
def fixture_weights(fixture_paths):
    return load_weights(fixture_paths["weights"])


@pytest.fixture(scope="session")
def fixture_dataset(fixture_paths, fixture_weights):
    return load_dataset(fixture_paths["dataset"], patch_size=fixture_weights.patch_size)


@pytest.fixture(scope="session")
def fixture_kb(fixture_paths):
    return ingest_knowledge(fixture_paths["knowledge"])


@pytest.fixture(scope="session")
def fixture_bank(fixture_kb):
    return build_text_bank(
        fixture_kb, clusters=16, topk=8, lam=0.5, rng=Rng(7).child("attributes")
    )
