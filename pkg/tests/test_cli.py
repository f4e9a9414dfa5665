import json

import pytest

from dse.cli import main

SMALL = ["--layers", "2", "--hidden", "16", "--heads", "2", "--ffn", "32", "--max-len", "16", "--vocab-size", "64"]
V = ["--vocab-size", "64"]


def run(*argv):
    return main([str(a) for a in argv])


def pipeline(epochs=2):
    assert run("gen-data", "--size", 160, "--seed", 1, "--vocab-size", 64, "--topic-size", 8, "--out", "data.tsv") == 0
    assert run("train-teacher", "--data", "data.tsv", "--epochs", 8, "--batch", 16, *SMALL, "--out", "teacher.ckpt", "--trace", "t.csv") == 0
    assert run("cache-scores", "--data", "data.tsv", "--teacher", "teacher.ckpt", *V, "--out", "scored.tsv") == 0
    assert run("distill", "--data", "scored.tsv", "--epochs", epochs, "--batch", 16, *SMALL, "--head-hidden", 16, "--out", "student.ckpt") == 0


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    import os

    path = tmp_path_factory.mktemp("pipe")
    old = os.getcwd()
    os.chdir(path)
    pipeline()
    yield path
    os.chdir(old)


def test_full_pipeline_artifacts(workdir, monkeypatch):
    monkeypatch.chdir(workdir)
    assert run("eval", "--data", "scored.tsv", "--model", "student.ckpt", *V, "--out", "m.json") == 0
    assert run("build-index", "--student", "student.ckpt", "--n", 40, *V, "--out", "idx.bin") == 0
    assert run("query", "--index", "idx.bin", "--student", "student.ckpt", "--q", "w5 w6 w7", "--k", 5, *V,
               "--catalog", "idx.bin.catalog.txt", "--out", "q.json") == 0
    assert run("benchmark", "--n", 30, "--teacher", "teacher.ckpt", "--student", "student.ckpt", "--out", "b.json") == 0
    rows = json.loads((workdir / "q.json").read_text())
    assert [r["rank"] for r in rows] == [1, 2, 3, 4, 5] and all("sentence" in r for r in rows)
    bench = json.loads((workdir / "b.json").read_text())
    assert bench["teacher_encoder_passes"] == 30 and bench["dse_encoder_passes"] == 1
    for name in ("data.tsv", "teacher.ckpt", "scored.tsv", "student.ckpt", "m.json", "idx.bin", "q.json", "b.json"):
        manifest = json.loads((workdir / f"{name}.manifest.json").read_text())
        assert set(manifest) == {"command", "argv", "args", "seed", "versions", "config", "metrics", "artifacts"}
        assert name in manifest["artifacts"]
    assert (workdir / "t.csv").read_text().startswith("epoch,train_loss,dev_loss,dev_metric\n")


def test_query_rejects_foreign_index(workdir, monkeypatch, capsys):
    monkeypatch.chdir(workdir)
    assert run("distill", "--data", "scored.tsv", "--epochs", 0, *SMALL, "--seed", 9, "--out", "other.ckpt") == 0
    assert run("build-index", "--student", "other.ckpt", "--n", 5, *V, "--out", "other.idx") == 0
    assert run("query", "--index", "other.idx", "--student", "student.ckpt", "--q", "w5", *V, "--k", 2) == 1
    assert "different student" in capsys.readouterr().err


def test_trained_student_beats_untrained(workdir, monkeypatch):
    monkeypatch.chdir(workdir)
    assert run("distill", "--data", "scored.tsv", "--epochs", 0, *SMALL, "--head-hidden", 16, "--out", "untrained.ckpt") == 0
    assert run("distill", "--data", "scored.tsv", "--epochs", 6, "--batch", 16, "--alpha", 1.0, *SMALL, "--head-hidden", 16,
               "--out", "trained.ckpt") == 0
    results = {}
    for name in ("untrained", "trained"):
        assert run("eval", "--data", "scored.tsv", "--model", f"{name}.ckpt", *V, "--out", f"{name}.json") == 0
        results[name] = json.loads((workdir / f"{name}.json").read_text())["teacher_logit_mse"]
    assert results["trained"] < results["untrained"]


def test_bad_alpha_exits_nonzero(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as exc:
        run("distill", "--data", "x.tsv", "--alpha", 1.5)
    assert exc.value.code != 0


def test_unknown_subcommand_exits_nonzero():
    with pytest.raises(SystemExit) as exc:
        run("frobnicate")
    assert exc.value.code != 0


def test_missing_file_is_a_clean_error(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert run("eval", "--data", "nope.tsv", "--model", "nope.ckpt") == 1
    assert "dse eval: error:" in capsys.readouterr().err


def test_runs_are_reproducible(tmp_path, monkeypatch):
    outputs = []
    for sub in ("a", "b"):
        (tmp_path / sub).mkdir()
        monkeypatch.chdir(tmp_path / sub)
        assert run("gen-data", "--size", 60, "--seed", 3, "--vocab-size", 64, "--topic-size", 8, "--out", "data.tsv") == 0
        assert run("distill", "--data", "data.tsv", "--alpha", 0, "--epochs", 1, "--batch", 16, *SMALL, "--head-hidden", 8,
                   "--out", "student.ckpt") == 0
        outputs.append({p.name: p.read_bytes() for p in (tmp_path / sub).iterdir()})
    assert outputs[0] == outputs[1]


def test_replay_reproduces_artifacts_and_metrics(workdir, monkeypatch):
    monkeypatch.chdir(workdir)
    before = (workdir / "student.ckpt").read_bytes()
    manifest = json.loads((workdir / "student.ckpt.manifest.json").read_text())
    (workdir / "student.ckpt").unlink()
    assert run("replay", "student.ckpt.manifest.json") == 0
    assert (workdir / "student.ckpt").read_bytes() == before
    assert json.loads((workdir / "student.ckpt.manifest.json").read_text()) == manifest
