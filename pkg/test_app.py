import json
import os

import numpy as np
import pytest

import app
from perch_config import config_digest
from policy_network import ACTOR_LAYERS, init_mlp, save_checkpoint
from run_registry import RunRegistry, file_sha256

PRESET = "source_one_semi_narrow_short"


def write_config(tmp_path, **blocks):
    raw = {"seed": 3, "robot": {"preset": PRESET}, "surfaces": {"angles_deg": [0.0]}}
    raw.update(blocks)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(raw))
    return str(path), raw


def write_checkpoint(tmp_path):
    actor = init_mlp(ACTOR_LAYERS, np.random.default_rng(0), output_scale=0.5)
    return save_checkpoint(str(tmp_path / "policy.npz"), {"actor": actor}, {"rot_scale": 90.0})


TINY_EVALUATION = {"speed_range_m_s": [1.5, 2.5], "n_speeds": 2, "flight_angle_range_deg": [70.0, 90.0],
                   "n_flight_angles": 2, "trials": 1}


def test_missing_config_exits_with_2(isolated_settings, tmp_path):
    assert app.main(["threshold", "--out", str(tmp_path / "out")]) == 2
    assert app.main(["threshold", "--config", str(tmp_path / "nope.json")]) == 2


def test_invalid_config_exits_with_2(isolated_settings, tmp_path):
    path, _ = write_config(tmp_path, training={"discount": 1.5})
    assert app.main(["train", "--config", path, "--out", str(tmp_path / "out")]) == 2


def test_unknown_subcommand_is_rejected(isolated_settings):
    with pytest.raises(SystemExit) as info:
        app.main(["fly"])
    assert info.value.code == 2


def test_threshold_output_is_reproducible(isolated_settings, tmp_path):
    path, raw = write_config(tmp_path, sweeps={"alpha_max_rad_s2": [60.0, 90.0]})
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert app.main(["threshold", "--config", path, "--out", str(out)]) == 0
        outputs.append((out / "threshold_0deg.csv").read_bytes())
    assert outputs[0] == outputs[1]
    lines = outputs[0].decode().splitlines()
    assert lines[0] == f"# config_digest={config_digest(raw)} seed=3"
    assert len(lines) == 4

    runs = RunRegistry(isolated_settings.registry_url).runs_with_digest(config_digest(raw))
    assert [r.status for r in runs] == ["success", "success"]
    artifacts = RunRegistry(isolated_settings.registry_url).artifacts(runs[0].id)
    assert artifacts[0].sha256 == file_sha256(str(tmp_path / "a" / "threshold_0deg.csv"))


def test_seed_flag_overrides_config(isolated_settings, tmp_path):
    path, _ = write_config(tmp_path, sweeps={"alpha_max_rad_s2": [90.0]})
    assert app.main(["threshold", "--config", path, "--out", str(tmp_path / "o"), "--seed", "11"]) == 0
    assert (tmp_path / "o" / "threshold_0deg.csv").read_text().splitlines()[0].endswith("seed=11")


def test_map_then_compare_with_itself(isolated_settings, tmp_path):
    path, _ = write_config(tmp_path, evaluation=TINY_EVALUATION)
    checkpoint = write_checkpoint(tmp_path)
    out = tmp_path / "map"
    assert app.main(["map", "--config", path, "--checkpoint", checkpoint, "--out", str(out), "--workers", "1",
                     "--episode-log"]) == 0
    map_csv = out / "success_map_0deg.csv"
    assert map_csv.exists()
    assert json.loads((out / "success_map_0deg.json").read_text())["criterion"] == "four_leg"
    assert len((out / "episodes_0deg.jsonl").read_text().splitlines()) == 4

    diff_dir = tmp_path / "diff"
    assert app.main(["compare", str(map_csv), str(map_csv), "--out", str(diff_dir)]) == 0
    lines = (diff_dir / "map_diff.csv").read_text().splitlines()
    assert "mean_abs_diff=0.000000" in lines[0]
    assert all(line.endswith(",0.000000") for line in lines[2:])
    assert len(lines) == 2 + 4


def test_compare_needs_two_maps(isolated_settings, tmp_path):
    assert app.main(["compare", "--out", str(tmp_path / "diff")]) == 2


def test_map_requires_a_checkpoint(isolated_settings, tmp_path):
    path, _ = write_config(tmp_path, evaluation=TINY_EVALUATION)
    assert app.main(["map", "--config", path, "--out", str(tmp_path / "map")]) == 2


def test_episode_writes_trajectory_and_log(isolated_settings, tmp_path):
    path, _ = write_config(tmp_path)
    checkpoint = write_checkpoint(tmp_path)
    out = tmp_path / "episode"
    assert app.main(["episode", "--config", path, "--checkpoint", checkpoint, "--out", str(out),
                     "--speed", "2.0", "--angle-deg", "80"]) == 0
    trajectory = (out / "trajectory.csv").read_text().splitlines()
    assert trajectory[0].startswith("# config_digest=")
    assert len(trajectory) > 3
    record = json.loads((out / "episode.jsonl").read_text())
    assert record["condition"]["speed"] == 2.0
    assert 0 <= record["n_legs"] <= 4


def test_short_training_run(isolated_settings, tmp_path):
    path, raw = write_config(tmp_path, training={"episodes": 3, "warmup_episodes": 1, "batch_size": 2,
                                                 "log_every": 0})
    out = tmp_path / "train"
    assert app.main(["train", "--config", path, "--out", str(out)]) == 0
    assert os.path.exists(out / "policy_final.npz")
    assert len((out / "learning_curve.csv").read_text().splitlines()) == 2 + 3
    summary = json.loads((out / "training_summary.json").read_text())
    assert summary["config_digest"] == config_digest(raw)
    assert summary["episodes"] == 3


def test_unreadable_checkpoint_exits_with_1(isolated_settings, tmp_path):
    path, raw = write_config(tmp_path, evaluation=TINY_EVALUATION)
    broken = tmp_path / "broken.npz"
    broken.write_bytes(b"junk")
    assert app.main(["map", "--config", path, "--checkpoint", str(broken), "--out", str(tmp_path / "m")]) == 1
    # the checkpoint is read before a run is opened
    assert RunRegistry(isolated_settings.registry_url).runs_with_digest(config_digest(raw)) == []


def test_failed_run_is_recorded(isolated_settings, tmp_path):
    path, raw = write_config(tmp_path)
    checkpoint = write_checkpoint(tmp_path)
    # a descending flight has no collision course with a ceiling
    code = app.main(["episode", "--config", path, "--checkpoint", checkpoint, "--out", str(tmp_path / "e"),
                     "--angle-deg", "-30"])
    assert code == 1
    runs = RunRegistry(isolated_settings.registry_url).runs_with_digest(config_digest(raw))
    assert [r.status for r in runs] == ["failed"]
    assert runs[0].message.startswith("NoCollisionCourse")
