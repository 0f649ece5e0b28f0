import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable

from petseg.phantom import PhantomSpec, generate_patient


@pytest.fixture(scope="session")
def small_patient():
    """One deterministic 48x64x64 phantom with two lesions."""
    spec = PhantomSpec(grid=(48, 64, 64), n_lesions=2, seed=7)
    record, truth = generate_patient(spec, "p007")
    return record, truth


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Six tiny patients on disk (one negative), for IO and CLI tests."""
    from petseg.phantom import generate_dataset

    root = tmp_path_factory.mktemp("tinydata")
    spec = PhantomSpec(grid=(24, 32, 32), n_lesions=1, seed=0)
    manifest = generate_dataset(6, spec, seed=5, out_dir=root, n_negative=1)
    return root, manifest
