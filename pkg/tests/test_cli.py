import json

import pytest

from moran_moments.cli import ConfigError, load_config, main, run


def base_doc(**overrides):
    doc = {
        "model": {
            "allele_counts": [2, 2],
            "N": 10,
            "rho": [{"sites": [1], "rate": 1.0}],
            "b": 0.0,
        },
        "initial": [
            {"type": [0, 0], "count": 5},
            {"type": [1, 1], "count": 5},
        ],
        "reference_type": [0, 0],
        "experiment": "simulate",
        "t_grid": [0.0, 0.5, 1.0],
        "seed": 3,
    }
    doc.update(overrides)
    return doc


def write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


class TestLoadConfig:
    def test_minimal_config_defaults(self, tmp_path):
        config = load_config(write(tmp_path, base_doc()))
        assert config.replicates == 1000
        assert config.z_threshold == 3.0
        assert config.params.rho[_site((2,))] == 1.0  # mirrored pair

    def test_full_set_rate_rejected(self, tmp_path):
        doc = base_doc()
        doc["model"]["rho"] = [{"sites": [1, 2], "rate": 0.5}]
        with pytest.raises(ConfigError, match="must be 0"):
            load_config(write(tmp_path, doc))

    def test_conflicting_pair_rejected(self, tmp_path):
        doc = base_doc()
        doc["model"]["rho"] = [
            {"sites": [1], "rate": 0.5},
            {"sites": [2], "rate": 0.25},
        ]
        with pytest.raises(ConfigError, match="conflicting"):
            load_config(write(tmp_path, doc))

    def test_counts_must_sum_to_n(self, tmp_path):
        doc = base_doc()
        doc["initial"][0]["count"] = 4
        with pytest.raises(ConfigError, match="sum to 9"):
            load_config(write(tmp_path, doc))

    def test_bad_reference_rejected(self, tmp_path):
        doc = base_doc(reference_type=[0, 7])
        with pytest.raises(ConfigError, match="allele"):
            load_config(write(tmp_path, doc))

    def test_bad_grid_rejected(self, tmp_path):
        doc = base_doc(t_grid=[0.5, 1.0])
        with pytest.raises(ConfigError, match="t_grid"):
            load_config(write(tmp_path, doc))

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError, match="malformed"):
            load_config(path)

    def test_round_trip(self, tmp_path):
        path = write(tmp_path, base_doc())
        config = load_config(path)
        reparsed = load_config(write(tmp_path, json.loads(config.to_json()), "again.json"))
        assert reparsed.params == config.params
        assert reparsed.initial == config.initial
        assert reparsed.t_grid == config.t_grid


def _site(sites):
    from moran_moments.core import SiteSet

    return SiteSet.from_sites(sites)


class TestRun:
    def test_simulate_writes_artifacts(self, tmp_path):
        doc = base_doc(out=str(tmp_path / "out"), observables=[[1, 2], [1]])
        code = run(load_config(write(tmp_path, doc)))
        assert code == 0
        assert (tmp_path / "out" / "trajectory.csv").exists()
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert summary["experiment"] == "simulate"

    def test_hierarchy_refuses_drift(self, tmp_path, capsys):
        doc = base_doc(experiment="hierarchy")
        doc["model"]["b"] = 1.0
        code = run(load_config(write(tmp_path, doc)))
        assert code == 2
        assert "closure" in capsys.readouterr().err

    def test_compare_experiment_passes(self, tmp_path):
        doc = base_doc(
            experiment="compare",
            observables=[[1, 2]],
            replicates=4000,
            out=str(tmp_path / "cmp"),
        )
        code = run(load_config(write(tmp_path, doc)))
        assert code == 0
        summary = json.loads((tmp_path / "cmp" / "summary.json").read_text())
        assert summary["fail"] == 0 and summary["pass"] >= 1

    def test_ld_experiment(self, tmp_path):
        doc = base_doc(experiment="ld", out=str(tmp_path / "ld"), replicates=1500)
        doc["model"]["b"] = 1.0
        code = run(load_config(write(tmp_path, doc)))
        assert code == 0
        lines = (tmp_path / "ld" / "ld.csv").read_text().splitlines()
        assert len(lines) == 2 + 3

    def test_main_cli_overrides_and_exit(self, tmp_path):
        path = write(tmp_path, base_doc(out=str(tmp_path / "o1")))
        code = main(["simulate", "--config", str(path), "--seed", "9",
                     "--out", str(tmp_path / "o2"), "--strict"])
        assert code == 0
        assert (tmp_path / "o2" / "trajectory.csv").exists()

    def test_main_rejects_bad_config(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{}")
        assert main(["simulate", "--config", str(path)]) == 2
        assert "config error" in capsys.readouterr().err

    def test_strict_runs_bit_identical(self, tmp_path):
        doc = base_doc(experiment="compare", observables=[[1, 2]],
                       replicates=500, strict=True)
        doc["model"]["b"] = 0.0
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        for out in (out_a, out_b):
            doc["out"] = str(out)
            assert run(load_config(write(tmp_path, doc))) == 0
        assert (out_a / "compare.csv").read_bytes() == (out_b / "compare.csv").read_bytes()
        assert (out_a / "summary.json").read_bytes() == (out_b / "summary.json").read_bytes()

    def test_nonclosure_experiment(self, tmp_path):
        doc = {
            "model": {
                "allele_counts": [2, 2, 2],
                "N": 12,
                "rho": [{"sites": [1], "rate": 0.2}],
                "b": 1.0,
            },
            "initial": [
                {"type": [0, 0, 0], "count": 4},
                {"type": [1, 1, 1], "count": 4},
                {"type": [0, 1, 1], "count": 4},
            ],
            "reference_type": [0, 0, 0],
            "experiment": "nonclosure",
            "t_grid": [0.0, 1.0],
            "replicates": 4000,
            "seed": 2,
            "out": str(tmp_path / "nc"),
        }
        code = run(load_config(write(tmp_path, doc)))
        assert code == 0
        lines = (tmp_path / "nc" / "nonclosure.csv").read_text().splitlines()
        assert len(lines) == 4  # header comment + header + bracket + control row

    def test_moment_csv_ids_with_commas_parse(self, tmp_path):
        import csv

        doc = {
            "model": {
                "allele_counts": [2, 2, 2],
                "N": 4,
                "rho": [{"sites": [1], "rate": 0.4}],
            },
            "initial": [
                {"type": [0, 0, 0], "count": 2},
                {"type": [1, 1, 1], "count": 2},
            ],
            "reference_type": [0, 0, 0],
            "experiment": "hierarchy",
            "t_grid": [0.0, 1.0],
            "out": str(tmp_path / "h"),
        }
        assert run(load_config(write(tmp_path, doc))) == 0
        with open(tmp_path / "h" / "moments.csv") as fh:
            next(fh)
            rows = list(csv.DictReader(fh))
        ids = {r["observable_id"] for r in rows}
        assert "{2,3}" in ids  # comma inside a quoted field survives parsing
        assert all(float(r["value"]) >= 0 for r in rows)
