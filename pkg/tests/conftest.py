import pytest

from spurfinder.core import LabelHierarchy
from spurfinder.gateway import Gateway, ServiceEndpoint, WorldBackend
from spurfinder.store import BlobStore
from spurfinder.synthworld import default_world


@pytest.fixture(scope="session")
def world():
    return default_world()


@pytest.fixture(scope="session")
def hierarchy(world):
    return world.hierarchy


@pytest.fixture
def toy_hierarchy():
    # insect/barrier/plant forest used throughout the failure-predicate tests
    return LabelHierarchy.from_records(
        [
            ("insect", "insect", None),
            ("barrier", "barrier", None),
            ("plant", "plant", None),
            ("fly", "fly", "insect"),
            ("bee", "bee", "insect"),
            ("wasp", "wasp", "insect"),
            ("fence", "chainlink fence", "barrier"),
            ("net", "net", "barrier"),
            ("flower", "flower", "plant"),
        ]
    )


@pytest.fixture
def blobs(tmp_path):
    return BlobStore(tmp_path / "blobs")


@pytest.fixture
def world_gateway(world, hierarchy, blobs):
    gw = Gateway(
        WorldBackend(world), blobs, ServiceEndpoint(base_url="inprocess://world"), hierarchy
    )
    yield gw
    gw.close()
