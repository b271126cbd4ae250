import json
import logging

import numpy as np
import pytest

from ctvis_engine.cli import main
from ctvis_engine.pseudo_video import read_dataset, rle_encode


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert run("--out", out, "--seed", 3, "generate", "--set", "count=3", "--set", "num_frames=5") == 0
    return out


def test_generate_zero_videos(tmp_path):
    assert run("--out", tmp_path / "d", "generate", "--set", "count=0") == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["count"] == 0 and manifest["videos"] == []


def test_generate_is_byte_identical(tmp_path, dataset):
    assert run("--out", tmp_path / "again", "--seed", 3, "generate", "--set", "count=3", "--set", "num_frames=5") == 0
    for f in sorted(dataset.iterdir()):
        assert (tmp_path / "again" / f.name).read_bytes() == f.read_bytes()


def test_manifest_counts_match_recount(dataset):
    manifest, videos = read_dataset(dataset)
    assert manifest["totals"]["frames"] == sum(len(v) for v in videos)
    assert manifest["totals"]["masks"] == sum(len(fr.instances) for v in videos for fr in v.frames)
    assert manifest["totals"]["instances"] == sum(len(v.track_ids()) for v in videos)
    for entry, v in zip(manifest["videos"], videos):
        assert entry["masks"] == sum(len(fr.instances) for fr in v.frames)


def test_train_track_eval(tmp_path, dataset, capsys):
    assert run("--out", tmp_path / "run", "train", "--data", dataset, "--set", "iterations=10") == 0
    assert {p.name for p in (tmp_path / "run").iterdir()} >= {"config.json", "loss.csv", "head.json"}
    assert run("--out", tmp_path / "tr", "track", "--run", tmp_path / "run", "--data", dataset) == 0
    capsys.readouterr()
    assert run("--out", tmp_path / "ev", "eval", "--tracks", tmp_path / "tr") == 0
    printed = json.loads(capsys.readouterr().out)
    saved = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert printed == saved
    assert 0.0 <= saved["ap"] <= 1.0 and 0.0 <= saved["assoc_accuracy"] <= 1.0
    assert run("--out", tmp_path / "rep", "report", "--eval", tmp_path / "ev") == 0
    assert "assoc_accuracy" in (tmp_path / "rep" / "report.md").read_text()


def test_eval_perfect_fixture(tmp_path, dataset):
    manifest, videos = read_dataset(dataset)
    tracks = tmp_path / "tracks"
    tracks.mkdir()
    (tracks / "tracking.json").write_text(json.dumps({"data": str(dataset)}))
    for entry, video in zip(manifest["videos"], videos):
        stem = entry["file"].rsplit(".", 1)[0]
        payload = []
        for g in video.track_ids():
            masks = {str(t): rle_encode(video.mask(t, g)) for t in range(len(video)) if video.frames[t].get(g)}
            payload.append({"track_id": g, "scores": np.eye(4)[video.classes()[g]].tolist(), "masks": masks})
        (tracks / f"{stem}.tracks.json").write_text(json.dumps(payload))
    assert run("--out", tmp_path / "ev", "eval", "--tracks", tracks) == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert report["ap"] == 1.0 and report["ap50"] == 1.0


def test_ablate_single_cell_and_recompute(tmp_path):
    out = tmp_path / "ab"
    assert run("--out", out, "ablate", "--set", "seeds=1", "--set", 'cells=["+noise"]',
               "--set", "iterations=5", "--set", "num_videos=2") == 0
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["cells"]) == 1
    assert len((out / "summary.csv").read_text().strip().splitlines()) == 2

    out2 = tmp_path / "ab2"
    assert run("--out", out2, "--seed", 5, "ablate", "--set", "seeds=3", "--set", 'cells=["baseline","major_only"]',
               "--set", "iterations=5", "--set", "num_videos=2") == 0
    rows = {r["cell"]: r for r in json.loads((out2 / "summary.json").read_text())["cells"]}
    for cell, row in rows.items():
        runs = [json.loads(p.read_text()) for p in (out2 / "runs").glob(f"{cell}__seed*.json")]
        assert len(runs) == 3 and sorted(r["seed"] for r in runs) == [5, 6, 7]
        vals = [r["assoc_accuracy"] for r in runs]
        assert row["assoc_accuracy_mean"] == pytest.approx(np.mean(vals), abs=1e-12)
        assert row["assoc_accuracy_std"] == pytest.approx(np.std(vals, ddof=1), abs=1e-12)
    assert run("--out", tmp_path / "rep", "report", "--ablation", out2) == 0


def test_exit_codes(tmp_path, dataset):
    assert run("--out", tmp_path / "a", "train", "--set", "bogus=1") == 2
    assert run("--out", tmp_path / "a", "train", "--set", "lr=fast") == 2
    assert run("--out", tmp_path / "b", "track", "--run", tmp_path / "missing", "--data", dataset) == 3
    assert run("--config", tmp_path / "nope.json", "--out", tmp_path / "c", "generate") == 3
    assert run("--out", tmp_path / "d", "ablate", "--set", 'cells=["nonsense"]') == 2
    # diverging training is a runtime failure
    assert run("--out", tmp_path / "e", "train", "--set", "lr=1e6", "--set", "iterations=200") == 1


def test_refuses_overwrite_without_force(tmp_path):
    out = tmp_path / "d"
    assert run("--out", out, "generate", "--set", "count=1") == 0
    assert run("--out", out, "generate", "--set", "count=1") == 2
    assert run("--out", out, "--force", "generate", "--set", "count=2") == 0
    assert json.loads((out / "manifest.json").read_text())["count"] == 2


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"count": 2, "num_frames": 3}))
    assert run("--config", cfg, "--out", tmp_path / "d", "generate", "--set", "count=1") == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["count"] == 1 and manifest["totals"]["frames"] == 3
    cfg.write_text("[1, 2]")
    assert run("--config", cfg, "--out", tmp_path / "e", "generate") == 2


def test_log_level_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("CTVIS_ENGINE_LOG", "debug")
    root = logging.getLogger()
    old = root.level
    try:
        root.handlers.clear()
        assert run("--out", tmp_path / "d", "generate", "--set", "count=0") == 0
        assert root.level == logging.DEBUG
    finally:
        root.setLevel(old)
