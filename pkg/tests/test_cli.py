from __future__ import annotations

import hashlib
import json
import shutil

import pytest

from pacerag.cli import main
from pacerag.runs import EFFECTIVE_CONFIG, LOCK, MANIFEST, read_manifest

# Regression golden: the synthetic cohort for seed 42 with 40 patients.
COHORT_SHA256 = "8b3a9c5152454d84c5f01b74389898888ea0e872ba2f5dd09bbe05b30af71b10"


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    out = tmp_path_factory.mktemp("world") / "synth"
    assert main(["synth", "--out", str(out), "--seed", "42", "--n-patients", "40"]) == 0
    return out


@pytest.fixture
def workdir(world, tmp_path):
    dst = tmp_path / "w"
    shutil.copytree(world, dst)
    return dst


def _manifest(root, method="pace", seed=42):
    return root / "runs" / method / "scripted" / str(seed) / MANIFEST


def test_synth_outputs_are_frozen(world):
    assert _sha(world / "cohort.jsonl") == COHORT_SHA256
    assert {p.name for p in world.iterdir()} == {
        "cohort.jsonl", "oracle.json", "synth_config.json", "guidelines.txt", "script.json", "run.ini"}


def test_synth_refuses_non_empty_dir(world, capsys):
    assert main(["synth", "--out", str(world)]) == 2
    assert "--force" in capsys.readouterr().err


def test_run_resume_and_byte_stability(workdir):
    cfg = str(workdir / "run.ini")
    assert main(["run", "--config", cfg, "--seed", "42"]) == 0
    manifest = _manifest(workdir)
    first = manifest.read_bytes()
    rows = read_manifest(manifest)
    assert rows and all(r["seed"] == 42 and r["method"] == "pace" for r in rows)
    metrics = json.loads((manifest.parent / "metrics.json").read_text())
    assert metrics["n_visits"] == len(rows) and "stage3_divergence" in metrics
    assert metrics["repairs"] == sum(r["trace"]["repairs"] for r in rows)
    assert (manifest.parent / "timings.jsonl").exists()
    eff = (manifest.parent / EFFECTIVE_CONFIG).read_text()
    assert "seeds = 42\n" in eff and str(workdir) in eff

    # A half-written last line is dropped and the visit recomputed.
    lines = first.splitlines(keepends=True)
    manifest.write_bytes(b"".join(lines[:-2]) + lines[-2][:25])
    assert main(["run", "--config", cfg, "--seed", "42"]) == 0
    assert manifest.read_bytes() == first

    # --force reruns from scratch with identical bytes.
    assert main(["run", "--config", cfg, "--seed", "42", "--force"]) == 0
    assert manifest.read_bytes() == first


def test_seeds_differ_and_parallelism_is_invisible(workdir):
    cfg = str(workdir / "run.ini")
    assert main(["run", "--config", cfg, "--seed", "137", "--method", "zero_shot", "--parallelism", "1"]) == 0
    serial = _manifest(workdir, "zero_shot", 137).read_bytes()
    assert main(["run", "--config", cfg, "--seed", "137", "--method", "zero_shot", "--parallelism", "6",
                 "--force"]) == 0
    assert _manifest(workdir, "zero_shot", 137).read_bytes() == serial
    assert main(["run", "--config", cfg, "--seed", "42", "--method", "zero_shot"]) == 0
    assert _manifest(workdir, "zero_shot", 42).read_bytes() != serial


def test_lock_blocks_second_writer(workdir, capsys):
    d = _manifest(workdir).parent
    d.mkdir(parents=True)
    (d / LOCK).write_text("123")
    assert main(["run", "--config", str(workdir / "run.ini"), "--seed", "42"]) == 3
    assert "locked" in capsys.readouterr().err


def test_replay_reproduces_manifest(workdir, capsys):
    cfg = str(workdir / "run.ini")
    assert main(["run", "--config", cfg, "--seed", "42", "--method", "medreflect"]) == 0
    manifest = _manifest(workdir, "medreflect")
    assert main(["replay", "--manifest", str(manifest)]) == 0
    assert "0 differ" in capsys.readouterr().out
    key = read_manifest(manifest)[0]["key"]
    assert main(["replay", "--manifest", str(manifest), "--key", key, "--stage", "medreflect_r"]) == 0
    assert "<Answer>" in capsys.readouterr().out
    assert main(["replay", "--manifest", str(manifest), "--key", "nobody:1"]) == 3


def test_replay_detects_tampering(workdir):
    cfg = str(workdir / "run.ini")
    assert main(["run", "--config", cfg, "--seed", "42", "--method", "zero_shot"]) == 0
    manifest = _manifest(workdir, "zero_shot")
    rows = read_manifest(manifest)
    rows[0]["prediction"] = ["made up"]
    manifest.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    assert main(["replay", "--manifest", str(manifest)]) == 3


def test_eval_gold_as_prediction_scores_one(workdir, tmp_path, capsys):
    assert main(["run", "--config", str(workdir / "run.ini"), "--seed", "42", "--method", "zero_shot"]) == 0
    src = _manifest(workdir, "zero_shot")
    root = tmp_path / "runs"
    dst = root / "oracle" / "scripted" / "42" / MANIFEST
    dst.parent.mkdir(parents=True)
    rows = read_manifest(src)
    dst.write_text("".join(json.dumps({**r, "prediction": r["gold"]}, sort_keys=True) + "\n" for r in rows))
    assert main(["eval", "--runs", str(root), "--any-seeds"]) == 0
    report = json.loads((root / "report.json").read_text())
    mean = report["reports"][0]["mean"]
    assert mean == {"f1": 1.0, "accuracy": 1.0, "precision": 1.0, "recall": 1.0}
    assert report["reports"][0]["flags"] == ["single-seed"]


def test_eval_requires_configured_seeds(workdir):
    cfg = str(workdir / "run.ini")
    assert main(["run", "--config", cfg, "--seed", "42", "--method", "zero_shot"]) == 0
    # The config lists five seeds but only one has been run.
    assert main(["eval", "--runs", str(workdir / "runs"), "--config", cfg]) == 3
    assert main(["eval", "--runs", str(workdir / "nothing")]) == 3


def test_sweep_refuses_without_force(workdir, tmp_path):
    out = tmp_path / "sweep"
    out.mkdir()
    (out / "old.txt").write_text("keep me")
    args = ["sweep", "--config", str(workdir / "run.ini"), "--seed", "42", "--axis", "k", "--values", "1,3",
            "--out", str(out)]
    assert main(args) == 2
    assert (out / "old.txt").read_text() == "keep me"
    assert main(args + ["--force"]) == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("axis,value,method") and len(lines) == 3


def test_exit_codes(workdir, tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[retrieval]\nk = 0\n")
    assert main(["run", "--config", str(bad)]) == 2
    missing = tmp_path / "missing.ini"
    missing.write_text("[paths]\ncohort = nowhere.jsonl\n")
    assert main(["run", "--config", str(missing), "--seed", "1"]) == 3
    down = workdir / "down.ini"
    text = (workdir / "run.ini").read_text()
    text = text.replace("kind = scripted", "kind = http").replace("url = \n", "url = http://127.0.0.1:9\n")
    text = text.replace("retries = 3", "retries = 1").replace("limit = 0", "limit = 1")
    down.write_text(text)
    assert main(["run", "--config", str(down), "--seed", "42"]) == 4
    with pytest.raises(SystemExit) as info:
        main(["run", "--bogus"])
    assert info.value.code == 2


def test_index_and_judge(workdir, capsys):
    cfg = str(workdir / "run.ini")
    for kind in ("dense", "sparse", "guideline"):
        assert main(["index", "--config", cfg, "--kind", kind, "--out", str(workdir / "index")]) == 0
        assert (workdir / "index" / kind / "manifest.json").exists()
    assert main(["index", "--config", cfg, "--kind", "dense", "--out", str(workdir / "index")]) == 2
    assert main(["run", "--config", cfg, "--seed", "42", "--method", "pace"]) == 0
    manifest = _manifest(workdir)
    assert main(["judge", "--config", cfg, "--manifest", str(manifest), "--limit", "5"]) == 0
    judged = json.loads((manifest.parent / "judge.json").read_text())
    assert judged["n"] == 5 and all(1 <= s <= 5 for s in judged["scores"].values())


def test_ingest_soap_directory(tmp_path, capsys):
    root = tmp_path / "notes" / "A"
    root.mkdir(parents=True)
    (root / "1.txt").write_text("S: tremor\nA: PD\nP: Levodopa")
    (root / "2.txt").write_text("S: sleep\nA: PD\nP: Levodopa, Trazodone HCl")
    out = tmp_path / "cohort.jsonl"
    assert main(["ingest", "--source", str(tmp_path / "notes"), "--out", str(out)]) == 0
    report = json.loads(out.with_suffix(".report.json").read_text())
    assert report["patients"] == 1 and report["visits"] == 2
    assert main(["ingest", "--source", str(tmp_path / "notes"), "--flavor", "diagnosis", "--out", str(out)]) == 2
