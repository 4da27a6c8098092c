import pytest

from config import settings
from src.api_graph import build_graph
from src.context_sampler import load_personas
from src.domain_pack import load_domain_pack


@pytest.fixture
def pack():
    return load_domain_pack(settings.DATA_DIR / "retail")


@pytest.fixture
def graph(pack):
    return build_graph(pack.specs(), pack.forbidden_pairs, pack.declared_edges)


@pytest.fixture
def personas():
    return load_personas()
