import json
import os

import pytest

from trajsim.cli import main

FAST = ["--config", "sample", "--set", "train.epochs=1", "--set", "node2vec.walks_per_node=2"]
STAGES = ["clean", "grid", "features", "distances", "graph", "node2vec", "visual-synth", "train", "embed", "evaluate"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipeline")
    old = os.getcwd()
    os.chdir(d)
    try:
        for stage in STAGES:
            assert main([stage, *FAST]) == 0, stage
        yield d
    finally:
        os.chdir(old)


@pytest.fixture
def in_workdir(workdir, monkeypatch):
    monkeypatch.chdir(workdir)
    return workdir / "artifacts"


@pytest.mark.parametrize("argv", [[], ["bogus"], ["train", "--no-such-flag"], ["search", *FAST],
                                  ["distances", "--measure", "lcss"]])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("stage", STAGES[1:] + ["search", "export-geojson"])
def test_missing_artifacts_exit_1(stage, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    extra = ["--query-id", "0"] if stage in ("search", "export-geojson") else []
    assert main([stage, *FAST, *extra]) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("error: ") and "\n" not in err


def test_bad_config_exit_1(tmp_path, capsys):
    assert main(["grid", "--config", str(tmp_path / "missing.json")]) == 1
    assert main(["grid", "--config", "sample", "--set", "model.nope=1"]) == 1
    assert "ConfigError" in capsys.readouterr().err


def test_gen_writes_csv(tmp_path, capsys):
    out = tmp_path / "g.csv"
    assert main(["gen", "--count", "5", "--out", str(out)]) == 0
    assert out.read_text().startswith("traj_id,point_idx,lon,lat\n")
    assert "wrote 5" in capsys.readouterr().out


def test_pipeline_artifacts(in_workdir):
    for name in ["clean.csv", "grid.json", "features.npz", "distances_dtw.tdm", "graph.npz", "structural.tvis",
                 "visual.tvis", "model.tckp", "embeddings.temb", "metrics.txt", "metrics.json"]:
        assert (in_workdir / name).is_file(), name
    assert (in_workdir / "metrics.txt").read_text().startswith("HR@1 = ")


def test_search_and_geojson(in_workdir, capsys):
    assert main(["search", *FAST, "--query-id", "0", "-k", "3"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [int(line.split("\t")[0]) for line in lines] == [1, 2, 3]
    sims = [float(line.split("\t")[2]) for line in lines]
    assert sims == sorted(sims, reverse=True)
    assert main(["export-geojson", *FAST, "--query-id", "0"]) == 0
    fc = json.loads((in_workdir / "query_0.geojson").read_text())
    assert len(fc["features"]) == 3


def test_search_bad_query(in_workdir):
    assert main(["search", *FAST, "--query-id", "999999"]) == 1
    assert main(["search", *FAST, "--query-id", "0", "-k", "0"]) == 1


def test_evaluate_baselines(in_workdir):
    assert main(["evaluate", *FAST, "--baselines"]) == 0
    assert (in_workdir / "metrics_random.txt").is_file() and (in_workdir / "metrics_jaccard.txt").is_file()


@pytest.mark.parametrize("stage, files", [
    ("distances", ["distances_dtw.tdm"]),
    ("node2vec", ["structural.tvis"]),
    ("train", ["model.tckp", "train_log.json"]),
    ("embed", ["embeddings.temb"]),
    ("evaluate", ["metrics.txt", "metrics.json"]),
])
def test_rerun_is_byte_identical(in_workdir, stage, files):
    before = {f: (in_workdir / f).read_bytes() for f in files}
    assert main([stage, *FAST]) == 0
    assert all((in_workdir / f).read_bytes() == b for f, b in before.items())


def test_other_measures(in_workdir):
    assert main(["distances", *FAST, "--measure", "dfd"]) == 0
    assert (in_workdir / "distances_dfd.tdm").is_file()


def test_gradcheck_single_block(capsys):
    assert main(["gradcheck", "--block", "point_project"]) == 0
    assert "point_project" in capsys.readouterr().out
    assert main(["gradcheck", "--block", "nope"]) == 1
