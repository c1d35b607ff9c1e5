import numpy as np
import pytest
from sqlmodel import Session, SQLModel, create_engine
from sqlmodel.pool import StaticPool

from ravenforge.db import models  # noqa: F401  registers the tables
from ravenforge.db.database import get_engine
from ravenforge.pgm.dataset import build_dataset, load_dataset
from ravenforge.pgm.splits import Regime


@pytest.fixture(name="session")
def session_fixture():
    """Create an in-memory database session for testing."""
    engine = create_engine(
        "sqlite:///:memory:",
        connect_args={"check_same_thread": False},
        poolclass=StaticPool,
    )
    SQLModel.metadata.create_all(engine)
    with Session(engine) as session:
        yield session


@pytest.fixture(autouse=True)
def registry_home(tmp_path, monkeypatch):
    """Point the run registry at a throwaway directory."""
    monkeypatch.setenv("RAVENFORGE_HOME", str(tmp_path / "registry"))
    get_engine.cache_clear()
    yield tmp_path / "registry"
    get_engine.cache_clear()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    """A small neutral dataset at 40x40, shared by every test that only reads it."""
    out = tmp_path_factory.mktemp("tiny")
    build_dataset(Regime.NEUTRAL, {"train": 12, "val": 4, "test": 6}, 40, seed=3, out_dir=out)
    return out


@pytest.fixture
def tiny_train(tiny_data_dir):
    return load_dataset(tiny_data_dir, "train")
