import pytest

from dataset_io import write_track
from pipeline import TrackJob, build_track
from pipeline_config import load_config


def small_config(root, **generation):
    """Desk-test settings: short Gibbs runs and few tracks."""
    overrides = {
        "generation": {"num_tracks": 1, "ensembles": ["string"], "output_root": str(root), "workers": 1,
                       **generation},
        "gibbs": {"num_steps": 48},
    }
    return load_config(overrides=overrides)


@pytest.fixture(scope="session")
def built_track():
    """One generated track held in memory, shared across tests."""
    cfg = small_config("unused", seed=5)
    bundle, dither_seed = build_track(cfg, TrackJob("string", 0, 0))
    return cfg, bundle, dither_seed


@pytest.fixture
def written_track(built_track, tmp_path):
    cfg, bundle, dither_seed = built_track
    entry = write_track(bundle, tmp_path, dither_seed=dither_seed)
    return tmp_path, tmp_path / entry["path"], bundle, entry


@pytest.fixture
def make_config(tmp_path):
    def make(root=None, **generation):
        return small_config(root if root is not None else tmp_path / "data", **generation)
    return make
