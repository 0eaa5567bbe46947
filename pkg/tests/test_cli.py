import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from hiershape import io
from hiershape.cli import main
from hiershape.config import DEFAULTS

QUICK = ["--max-iter", "2", "--n-samples", "3", "--burn-in", "0", "--n-leapfrog", "3"]


def sorted_rows(x):
    return x[np.lexsort(x.T[::-1])]


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["simulate", "--out", str(root / "data"), "--n-points", "16"]) == 0
    assert main(["fit", str(root / "data" / "manifest.json"), "--out", str(root / "fit"), *QUICK]) == 0
    return root


class TestSimulate:
    def test_default_layout(self, tmp_path):
        assert main(["simulate", "--out", str(tmp_path)]) == 0
        data, doc = io.read_manifest(tmp_path / "manifest.json")
        assert data.sizes == [4, 4] and data.n_points == 64
        assert all(x.shape == (64, 2) for grp in data.groups for x in grp)
        clean, _ = io.read_manifest(tmp_path / "clean.json")
        assert clean.sizes == [4, 4]

    def test_seeded_files_are_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert main(["simulate", "--out", str(tmp_path / name), "--seed", "4", "--n-points", "16"]) == 0
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_zero_noise_matches_clean_up_to_order(self, tmp_path):
        assert main(["simulate", "--out", str(tmp_path), "--noise-sd", "0", "--n-points", "16"]) == 0
        clean, _ = io.read_manifest(tmp_path / "clean.json")
        obs, _ = io.read_manifest(tmp_path / "manifest.json")
        for a, b in zip(clean.groups, obs.groups):
            for x, y in zip(a, b):
                np.testing.assert_array_equal(sorted_rows(x), sorted_rows(y))


class TestFit:
    def test_outputs(self, fitted):
        doc = json.loads((fitted / "fit" / "fit.json").read_text())
        io.validate_fit_dict(doc)
        rows = list(csv.DictReader(open(fitted / "fit" / "spectra.csv")))
        assert len(rows) == 2 * 3 * 5
        ET.parse(fitted / "fit" / "means.svg")

    def test_deterministic_under_seed(self, fitted, tmp_path):
        args = [str(fitted / "data" / "manifest.json"), "--out", str(tmp_path), *QUICK]
        assert main(["fit", *args]) == 0
        assert (tmp_path / "fit.json").read_bytes() == (fitted / "fit" / "fit.json").read_bytes()

    def test_config_file_and_trace_dir(self, fitted, tmp_path):
        (tmp_path / "cfg.json").write_text(json.dumps({"max_iter": 1, "n_samples": 2, "burn_in": 0,
                                                       "n_leapfrog": 2}))
        assert main(["fit", str(fitted / "data" / "manifest.json"), "--out", str(tmp_path / "o"),
                     "--config", str(tmp_path / "cfg.json"), "--trace-dir", str(tmp_path / "t"),
                     "--preprocessing", "cyclic"]) == 0
        assert json.loads((tmp_path / "o" / "fit.json").read_text())["diagnostics"]["n_iter"] == 1
        assert [p.name for p in (tmp_path / "t").iterdir()] == ["trace_001.csv"]

    def test_missing_manifest_is_io_error(self, tmp_path, capsys):
        assert main(["fit", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2
        assert "error" in capsys.readouterr().err

    def test_invalid_setting_is_validation_error(self, fitted, tmp_path):
        assert main(["fit", str(fitted / "data" / "manifest.json"), "--out", str(tmp_path),
                     "--tol", "0", *QUICK]) == 1


class TestTest:
    def test_exhaustive_histogram(self, fitted, tmp_path):
        assert main(["test", str(fitted / "fit" / "fit.json"), "--out", str(tmp_path)]) == 0
        rows = list(csv.DictReader(open(tmp_path / "histogram.csv")))
        assert len(rows) == 35
        assert sum(int(r["is_observed"]) for r in rows) == 1
        doc = json.loads((tmp_path / "test.json").read_text())
        assert doc["exhaustive"] and doc["groups"] == ["group1", "group2"]
        assert 1 / 35 - 1e-12 <= doc["p_value"] <= 1

    def test_random_permutations_on_larger_groups(self, tmp_path):
        assert main(["simulate", "--out", str(tmp_path / "d"), "--n-points", "16",
                     "--shapes-per-group", "8"]) == 0
        assert main(["fit", str(tmp_path / "d" / "manifest.json"), "--out", str(tmp_path / "f"),
                     "--max-iter", "1", "--n-samples", "2", "--burn-in", "0", "--n-leapfrog", "2"]) == 0
        assert main(["test", str(tmp_path / "f" / "fit.json"), "--out", str(tmp_path / "t"),
                     "--max-perms", "200"]) == 0
        rows = list(csv.DictReader(open(tmp_path / "t" / "histogram.csv")))
        assert len(rows) == 200
        assert sum(int(r["is_observed"]) for r in rows) == 1

    def test_data_source_and_group_names(self, fitted, tmp_path):
        assert main(["test", str(fitted / "fit" / "fit.json"), "--out", str(tmp_path),
                     "--groups", "group2", "group1", "--source", "data",
                     "--manifest", str(fitted / "data" / "manifest.json")]) == 0
        assert json.loads((tmp_path / "test.json").read_text())["groups"] == ["group2", "group1"]

    def test_unknown_group(self, fitted, tmp_path):
        assert main(["test", str(fitted / "fit" / "fit.json"), "--out", str(tmp_path),
                     "--groups", "group1", "nope"]) == 1

    def test_data_source_needs_manifest(self, fitted, tmp_path):
        assert main(["test", str(fitted / "fit" / "fit.json"), "--out", str(tmp_path),
                     "--source", "data"]) == 1


class TestClassify:
    def test_training_shape_goes_to_its_group(self, fitted, tmp_path, capsys):
        query = fitted / "data" / "clean_group2_001.csv"
        assert main(["classify", str(fitted / "fit" / "fit.json"), str(query),
                     "--out", str(tmp_path / "r.csv"), "--classify-samples", "100"]) == 0
        rows = list(csv.DictReader(open(tmp_path / "r.csv")))
        assert rows[0]["predicted"] == "group2"

    def test_labelled_batch_reports_accuracy(self, fitted, tmp_path):
        assert main(["simulate", "--out", str(tmp_path / "q"), "--n-points", "16", "--seed", "9"]) == 0
        assert main(["classify", str(fitted / "fit" / "fit.json"), "--manifest", str(tmp_path / "q" / "manifest.json"),
                     "--out", str(tmp_path / "r.csv"), "--classify-samples", "50"]) == 0
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert len(lines) == 1 + 8 + 1
        assert lines[-1].startswith("# accuracy=")

    def test_malformed_query_names_line(self, fitted, tmp_path, capsys):
        (tmp_path / "bad.csv").write_text("# T=3 D=2\n0,0\n1,oops\n2,2\n")
        assert main(["classify", str(fitted / "fit" / "fit.json"), str(tmp_path / "bad.csv"),
                     "--out", str(tmp_path / "r.csv")]) == 1
        assert "bad.csv:3" in capsys.readouterr().err

    def test_no_queries(self, fitted, tmp_path):
        assert main(["classify", str(fitted / "fit" / "fit.json"), "--out", str(tmp_path / "r.csv")]) == 1


class TestShowConfig:
    def test_defaults(self, capsys):
        assert main(["show-config"]) == 0
        assert json.loads(capsys.readouterr().out) == DEFAULTS

    def test_precedence(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"sigma": 0.2, "beta": 3.0}))
        assert main(["show-config", "--config", str(tmp_path / "c.json"), "--beta", "7"]) == 0
        shown = json.loads(capsys.readouterr().out)
        assert shown["sigma"] == 0.2 and shown["beta"] == 7.0

    def test_unknown_config_key(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"sigmaa": 0.2}))
        assert main(["show-config", "--config", str(tmp_path / "c.json")]) == 1

    def test_boolean_flag(self, capsys):
        assert main(["show-config", "--no-cyclic-init"]) == 0
        assert json.loads(capsys.readouterr().out)["cyclic_init"] is False
