import math

import pytest

from robot_geometry import get_preset
from sim_core import SurfaceSpec
from perch_config import reload_settings


@pytest.fixture
def geom():
    return get_preset("source_one_semi_narrow_short")


@pytest.fixture
def ceiling():
    return SurfaceSpec(0.0)


@pytest.fixture
def wall():
    return SurfaceSpec(math.pi / 2)


@pytest.fixture
def isolated_settings(tmp_path, monkeypatch):
    """Registry and output root inside the test's temp directory"""
    monkeypatch.setenv("PERCH_REGISTRY_URL", f"sqlite:///{tmp_path / 'registry.db'}")
    monkeypatch.setenv("PERCH_OUTPUT_ROOT", str(tmp_path / "outputs"))
    settings = reload_settings()
    yield settings
    monkeypatch.undo()
    reload_settings()
