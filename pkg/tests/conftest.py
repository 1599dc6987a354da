import numpy as np
import pytest

from ircount import synth


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_sessions():
    """Three short synthetic sessions (anchor session largest)."""
    return synth.make_dataset(n_sessions=3, frames_per_session=80, seed=11)


@pytest.fixture(scope="session")
def tiny_dataset_csv(tmp_path_factory, tiny_sessions):
    from ircount.data import write_sessions_csv

    path = tmp_path_factory.mktemp("data") / "tiny.csv"
    write_sessions_csv(path, tiny_sessions)
    return str(path)
