import json

import numpy as np
import pytest

from risa import cli, dataops
from risa.experiment import Bundle

FAST = {"epochs": 6, "filter_every": 3, "hidden": 8, "batch_size": 32, "fst_epochs": 3}


@pytest.fixture
def small_csv(tmp_path):
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, size=100)
    centers = rng.normal(scale=3.0, size=(3, 4))
    x = centers[labels] + rng.normal(size=(100, 4))
    path = tmp_path / "small.csv"
    with open(path, "w") as fh:
        fh.write("a,b,c,d,label\n")
        for row, y in zip(x, labels):
            fh.write(",".join(repr(float(v)) for v in row) + f",{y}\n")
    return path


@pytest.fixture
def fast_config(tmp_path):
    path = tmp_path / "fast.json"
    path.write_text(json.dumps(FAST))
    return path


def prepare(csv, out, seed=1, overlap="0.1"):
    return cli.main(["prepare", "--csv", str(csv), "--overlap", overlap, "--seed", str(seed),
                     "--out-dir", str(out)])


class TestPrepare:
    def test_overlap_count(self, small_csv, tmp_path):
        assert prepare(small_csv, tmp_path / "b") == 0
        manifest = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert len(manifest["overlap_ids"]) == 10

    def test_byte_identical_bundles(self, small_csv, tmp_path):
        prepare(small_csv, tmp_path / "x")
        prepare(small_csv, tmp_path / "y")
        for name in ("table.csv", "manifest.json", "party_0.csv", "party_1.csv"):
            assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()

    def test_manifest_replays_split(self, small_csv, tmp_path):
        prepare(small_csv, tmp_path / "b")
        bundle = Bundle.load(tmp_path / "b")
        table, labels, _, _ = dataops.read_csv(small_csv)
        replayed = dataops.parties_from_manifest(table, labels, bundle.manifest)
        for a, b in zip(bundle.parties(), replayed):
            np.testing.assert_array_equal(a.row_ids, b.row_ids)
            np.testing.assert_array_equal(a.data, b.data)

    def test_missing_csv_is_data_error(self, tmp_path):
        assert prepare(tmp_path / "absent.csv", tmp_path / "b") == cli.EXIT_DATA


class TestRun:
    def test_missing_bundle(self, tmp_path):
        assert cli.main(["run", "--out-dir", str(tmp_path / "none")]) == cli.EXIT_DATA

    def test_bad_config(self, small_csv, tmp_path):
        prepare(small_csv, tmp_path / "b")
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"tau_0": 1.5}))
        assert cli.main(["run", "--out-dir", str(tmp_path / "b"), "--config", str(bad)]) == 2

    def test_unknown_method(self, small_csv, tmp_path):
        prepare(small_csv, tmp_path / "b")
        assert cli.main(["run", "--out-dir", str(tmp_path / "b"), "--method", "ssl"]) == 2

    def test_divergence(self, small_csv, tmp_path, capsys):
        prepare(small_csv, tmp_path / "b")
        wild = tmp_path / "wild.json"
        wild.write_text(json.dumps({**FAST, "lr": 1e200, "activation": "relu"}))
        code = cli.main(["run", "--out-dir", str(tmp_path / "b"), "--config", str(wild)])
        assert code == cli.EXIT_DIVERGENCE
        assert "training failed" in capsys.readouterr().err

    def test_deterministic_report_rows(self, small_csv, fast_config, tmp_path):
        rows = []
        for name in ("x", "y"):
            out = tmp_path / name
            prepare(small_csv, out)
            trace, dump = out / "trace.jsonl", out / "opinions.jsonl"
            assert cli.main(["run", "--out-dir", str(out), "--config", str(fast_config),
                             "--seed", "2", "--trace-messages", str(trace),
                             "--dump-opinions", str(dump)]) == 0
            rows.append(json.loads((out / "report.json").read_text())["rows"])
            assert trace.stat().st_size > 0 and dump.stat().st_size > 0
            header = json.loads(trace.read_text().splitlines()[0])
            assert "payload" not in header
        assert json.dumps(rows[0], sort_keys=True) == json.dumps(rows[1], sort_keys=True)
        assert ((tmp_path / "x" / "runs" / "risa_seed2.metrics.jsonl").read_bytes()
                == (tmp_path / "y" / "runs" / "risa_seed2.metrics.jsonl").read_bytes())

    def test_report_from_runs(self, small_csv, fast_config, tmp_path, capsys):
        out = tmp_path / "b"
        prepare(small_csv, out)
        for method in ("vfl", "risa"):
            cli.main(["run", "--out-dir", str(out), "--config", str(fast_config),
                      "--method", method])
        assert cli.main(["report", "--out-dir", str(out)]) == 0
        md = (out / "report.md").read_text()
        assert "| VFL |" in md and "| RISA |" in md

    def test_empty_report(self, tmp_path):
        assert cli.main(["report", "--out-dir", str(tmp_path)]) == cli.EXIT_DATA


class TestSweep:
    def test_sweep_record_round_trip(self, small_csv, fast_config, tmp_path):
        out = tmp_path / "s"
        code = cli.main(["sweep", "--csv", str(small_csv), "--config", str(fast_config),
                         "--method", "vfl,risa", "--overlap", "0.1,0.5", "--seed", "0,1",
                         "--out-dir", str(out)])
        assert code == 0
        rec = json.loads((out / "sweep.json").read_text())
        assert len(rec["cells"]) == 2 * 2 * 2
        assert rec["median"] == cli.median_table(rec["cells"], rec["methods"], rec["fractions"])
        assert cli.main(["report", "--out-dir", str(out)]) == 0
        assert (out / "report.md").read_text().startswith((out / "sweep.md").read_text())

    def test_full_overlap_baselines_agree(self, small_csv, fast_config):
        rec = cli.sweep(["vfl", "local_vfl"], [1.0], [0], str(fast_config), str(small_csv))
        med = rec["median"]
        assert med["vfl"]["1.0"] == pytest.approx(med["local_vfl"]["1.0"], abs=0.05)

    def test_rejects_bad_fraction(self, fast_config):
        assert cli.main(["sweep", "--overlap", "0,0.5", "--out-dir", "/tmp/unused_sweep",
                         "--config", str(fast_config)]) == cli.EXIT_CONFIG


def test_render_table_layout():
    table = {"vfl": {"0.1": 0.5}, "risa": {"0.1": None}}
    md = cli.render_table(["vfl", "risa"], [0.1], table, [0, 1])
    lines = md.splitlines()
    assert lines[2] == "| Method | 10% |"
    assert lines[4] == "| VFL | 50.00 |" and lines[5] == "| RISA | - |"
