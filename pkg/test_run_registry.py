import hashlib
import os

import pytest

from run_registry import RunRegistry, file_sha256


@pytest.fixture
def registry(tmp_path):
    return RunRegistry(f"sqlite:///{tmp_path / 'nested' / 'runs.db'}")


def test_database_directory_is_created(tmp_path, registry):
    assert os.path.exists(tmp_path / "nested" / "runs.db")


def test_run_lifecycle(tmp_path, registry):
    run_id = registry.start_run("threshold", "d" * 64, 3, str(tmp_path))
    run = registry.get_run(run_id)
    assert run.status == "running"
    assert run.finished_at is None

    registry.finish_run(run_id, "failed", "ConfigError: training.discount")
    run = registry.get_run(run_id)
    assert run.status == "failed"
    assert run.message == "ConfigError: training.discount"
    assert run.finished_at is not None
    assert registry.get_run(run_id + 100) is None


def test_artifacts_carry_their_hash(tmp_path, registry):
    path = tmp_path / "threshold_0deg.csv"
    path.write_bytes(b"alpha_max_rad_s2,v_perp_min_m_s\n90.000,1.2500\n")
    run_id = registry.start_run("threshold", "abc", 0, str(tmp_path))
    sha = registry.add_artifact(run_id, str(path), "threshold")
    assert sha == hashlib.sha256(path.read_bytes()).hexdigest()
    assert sha == file_sha256(str(path))
    artifacts = registry.artifacts(run_id)
    assert [(a.path, a.kind, a.sha256) for a in artifacts] == [(str(path), "threshold", sha)]


def test_runs_are_found_by_digest(tmp_path, registry):
    first = registry.start_run("map", "abc", 0, str(tmp_path))
    registry.start_run("map", "other", 0, str(tmp_path))
    second = registry.start_run("train", "abc", 1, str(tmp_path))
    runs = registry.runs_with_digest("abc")
    assert [r.id for r in runs] == [first, second]
    assert [r.command for r in runs] == ["map", "train"]
    assert registry.runs_with_digest("missing") == []
