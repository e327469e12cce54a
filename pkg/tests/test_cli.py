"""End-to-end runs of the command line."""

import json

import pandas as pd
import pytest

from hyperplace.cli import build_parser, main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["-q", "synth", "--panoramas", "12", "--levels", "3", "--dim", "4", "--grid", "2x2", "--seed", "7", "--out", str(data)]) == 0
    index = root / "db.hvpr"
    assert main(["-q", "build", "--features", str(data / "panoramas"), "--levels", "3", "--out", str(index)]) == 0
    return root, data, index


class TestParser:
    def test_unknown_flag_is_a_one_line_error(self, capsys):
        with pytest.raises(SystemExit) as exit_info:
            build_parser().parse_args(["query", "--bogus"])
        assert exit_info.value.code == 2
        err = capsys.readouterr().err
        assert err.startswith("hyperplace: error:")
        assert len(err.strip().splitlines()) == 1

    def test_bad_weights(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["query", "--index", "a", "--query", "b", "--weights", "1=0.5"])

    def test_grid_and_levels_types(self):
        args = build_parser().parse_args(["synth", "--panoramas", "2", "--grid", "3x8", "--out", "x"])
        assert args.grid == (3, 8)
        args = build_parser().parse_args(["query", "--index", "a", "--query", "b", "--levels", "4,5", "--weights", "1:0.2,4:0.3,5:0.5"])
        assert args.levels == (4, 5)
        assert args.weights == {1: 0.2, 4: 0.3, 5: 0.5}


class TestPipeline:
    def test_synth_layout(self, workspace):
        _, data, _ = workspace
        assert (data / "scene.json").exists()
        assert len(list((data / "panoramas").glob("panorama_*.hfgr"))) == 12
        assert (data / "queries" / "ground_truth.csv").exists()

    def test_synth_is_deterministic(self, workspace, tmp_path):
        _, data, _ = workspace
        again = tmp_path / "again"
        assert main(["-q", "synth", "--panoramas", "12", "--levels", "3", "--dim", "4", "--grid", "2x2", "--seed", "7", "--out", str(again)]) == 0
        for path in data.rglob("*.hfgr"):
            assert (again / path.relative_to(data)).read_bytes() == path.read_bytes()

    def test_build_writes_sidecar(self, workspace):
        _, _, index = workspace
        assert index.exists()
        assert index.with_name("db.hvpr.pooling.json").exists()

    def test_query_json(self, workspace, capsys):
        _, data, index = workspace
        code = main(["-q", "query", "--index", str(index), "--query", str(data / "queries" / "query_0.hfgr"), "--kprime", "8", "--levels", "3", "--topk", "5", "--json"])
        assert code == 0
        results = json.loads(capsys.readouterr().out)
        assert [r["rank"] for r in results] == [1, 2, 3, 4, 5]
        assert set(results[0]["distances"]) == {"1", "3"}

    def test_query_text(self, workspace, capsys):
        _, data, index = workspace
        assert main(["-q", "query", "--index", str(index), "--query", str(data / "queries" / "query_1.hfgr"), "--exhaustive", "--topk", "3"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 3
        assert lines[0].split("\t")[0] == "1"

    def test_viz(self, workspace):
        root, _, index = workspace
        out = root / "coords.csv"
        assert main(["-q", "viz", "--index", str(index), "--out", str(out), "--figure", str(root / "coords.html")]) == 0
        frame = pd.read_csv(out)
        assert list(frame.columns) == ["id", "level", "k", "norm", "angle"]
        assert len(frame) == 12 * 7

    @pytest.mark.parametrize("mode", ["hier", "exhaustive"])
    def test_bench_report(self, workspace, mode):
        root, data, index = workspace
        report_path = root / f"bench_{mode}.json"
        table_path = root / f"bench_{mode}.csv"
        code = main(["-q", "bench", "--index", str(index), "--queries", str(data / "queries"), "--mode", mode, "--kprime", "10", "--levels", "3", "--report", str(report_path), "--table", str(table_path)])
        assert code == 0
        report = json.loads(report_path.read_text())
        assert report["n_records"] == 12
        assert report["config"]["mode"] == mode
        expected = 12 * 4 if mode == "exhaustive" else 12 + 10 * 4
        assert report["mean_eval_count"] == expected
        assert len(pd.read_csv(table_path)) == report["n_queries"]

    def test_bench_preset_with_grid_search(self, workspace, capsys):
        _, data, index = workspace
        assert main(["-q", "bench", "--index", str(index), "--queries", str(data / "queries"), "--preset", "L", "--kprime", "10", "--grid-search"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["config"]["preset"] == "L"
        assert sum(report["config"]["weights"].values()) == pytest.approx(1.0)

    def test_ablate(self, workspace, capsys):
        _, data, index = workspace
        assert main(["-q", "ablate", "--features", str(data / "panoramas"), "--queries", str(data / "queries"), "--index", str(index)]) == 0
        report = json.loads(capsys.readouterr().out)
        assert set(report) == {"n_records", "n_queries", "euclidean", "hyperbolic"}

    def test_verify_selected_checks(self, capsys):
        assert main(["-q", "verify", "--check", "midpoint", "--check", "storage-ratio"]) == 0
        out = capsys.readouterr().out
        assert "PASS  midpoint" in out


class TestErrors:
    def test_missing_index_file(self, tmp_path, capsys):
        code = main(["query", "--index", str(tmp_path / "none.hvpr"), "--query", str(tmp_path / "q.hfgr")])
        assert code == 2
        err = capsys.readouterr().err.strip().splitlines()
        assert err[-1].startswith("hyperplace: error:")

    def test_corrupt_index(self, workspace, tmp_path, capsys):
        _, data, index = workspace
        broken = tmp_path / "broken.hvpr"
        broken.write_bytes(b"NOPE" + index.read_bytes()[4:])
        code = main(["-q", "query", "--index", str(broken), "--query", str(data / "queries" / "query_0.hfgr")])
        assert code == 2
        assert "byte offset 0" in capsys.readouterr().err

    def test_invalid_retrieval_config(self, workspace, capsys):
        _, data, index = workspace
        code = main(["-q", "query", "--index", str(index), "--query", str(data / "queries" / "query_0.hfgr"), "--kprime", "5", "--topk", "10"])
        assert code == 2
        assert "top_k" in capsys.readouterr().err

    def test_unstored_level(self, workspace, tmp_path, capsys):
        _, data, _ = workspace
        partial = tmp_path / "partial.hvpr"
        assert main(["-q", "build", "--features", str(data / "panoramas"), "--levels", "3", "--preset", "O", "--out", str(partial)]) == 0
        code = main(["-q", "query", "--index", str(partial), "--query", str(data / "queries" / "query_0.hfgr"), "--levels", "3"])
        assert code == 2
        assert "not stored" in capsys.readouterr().err

    def test_exhaustive_mode_conflicts_with_hierarchical_preset(self, workspace, capsys):
        _, data, index = workspace
        code = main(["-q", "bench", "--index", str(index), "--queries", str(data / "queries"), "--mode", "exhaustive", "--preset", "L"])
        assert code == 2
        err = capsys.readouterr().err
        assert err.startswith("hyperplace: error:")
        assert "preset L" in err

    def test_exhaustive_mode_agrees_with_sliding_window_preset(self, workspace, capsys):
        _, data, index = workspace
        code = main(["-q", "bench", "--index", str(index), "--queries", str(data / "queries"), "--mode", "exhaustive", "--preset", "SW"])
        assert code == 0
        assert json.loads(capsys.readouterr().out)["config"]["mode"] == "exhaustive"
