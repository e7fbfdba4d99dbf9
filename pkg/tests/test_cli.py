"""End-to-end command-line pipeline on a small synthetic dataset."""

import dataclasses
import json

import numpy as np
import pytest

from smartjm import StudyConfig
from smartjm.cli import main
from smartjm.dataio import read_dataset, save_study_config

ESTIMAND_KEYS = ["rmst@16", "rmst@24", "survival@16", "survival@24"]
LABELS = ["AAC", "AAD", "BBC", "BBD"]


def _small_study():
    return dataclasses.replace(
        StudyConfig(),
        n_subjects=80,
        n_replications=2,
        seed=424242,
        k_fit=3,
        k_marginal=3,
        n_jm_draws=40,
        n_boot=60,
        n_mc=2000,
        rmst_grid=60,
        truth_grid=150,
        truth_draws=60,
        curve_points=10,
    )


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """simulate -> fit -> gformula -> iptw -> mcb, all through main()."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "study.json"
    save_study_config(config, _small_study())
    ds = root / "dataset"

    rc = main(["simulate", "--config", str(config), "--out", str(ds)])
    assert rc == 0
    subjects = ds / "subjects.csv"
    longitudinal = ds / "longitudinal.csv"

    out = {}
    for name in ("fit", "gformula", "iptw"):
        target = root / f"{name}.json"
        rc = main(
            [
                name,
                "--config",
                str(config),
                "--subjects",
                str(subjects),
                "--longitudinal",
                str(longitudinal),
                "--out",
                str(target),
            ]
        )
        assert rc == 0
        out[name] = json.loads(target.read_text())

    mcb_out = root / "mcb.json"
    rc = main(
        [
            "mcb",
            "--config",
            str(config),
            "--table",
            str(root / "gformula.json"),
            "--out",
            str(mcb_out),
        ]
    )
    assert rc == 0
    out["mcb"] = json.loads(mcb_out.read_text())
    out["root"] = root
    out["config"] = config
    out["subjects"] = subjects
    out["longitudinal"] = longitudinal
    out["provenance"] = json.loads((ds / "provenance.json").read_text())
    return out


def test_simulate_writes_dataset_with_provenance(pipeline):
    data = read_dataset(pipeline["subjects"], pipeline["longitudinal"])
    assert len(data) == 80
    meta = pipeline["provenance"]
    assert meta["schema"] == "smartjm/dataset@1"
    assert meta["seed"] == 424242
    assert meta["n_subjects"] == 80
    assert meta["schedule"][0] == 0.0 and 8.0 in meta["schedule"]
    assert meta["truth"]["beta0"] == pytest.approx(3.5)
    assert meta["truth"]["kappa"] == pytest.approx(2.6)


def test_fit_output_schema(pipeline):
    fit = pipeline["fit"]
    assert fit["schema"] == "smartjm/fit@1"
    assert fit["seed"] is None
    assert fit["converged"] is True
    assert fit["n_subjects"] == 80
    assert fit["k_nodes"] == 3
    names = [row["name"] for row in fit["parameters"]]
    assert len(names) == 21
    assert names[0] == "beta0"
    assert all(row["se"] is None or row["se"] > 0.0 for row in fit["parameters"])
    assert np.isfinite(fit["loglik"])


def test_gformula_output_schema(pipeline):
    payload = pipeline["gformula"]
    assert payload["schema"] == "smartjm/gformula@1"
    assert payload["seed"] == 424242
    assert payload["fit"]["converged"] is True
    table = payload["table"]
    assert table["dtrs"] == LABELS
    assert table["estimands"] == ESTIMAND_KEYS
    assert table["n_draws"] == 40
    for key in ESTIMAND_KEYS:
        assert len(table["values"][key]) == 4
        assert len(table["se"][key]) == 4
        cov = np.asarray(table["cov"][key])
        assert cov.shape == (4, 4)
        np.testing.assert_allclose(cov, cov.T, atol=1e-12)
        assert all(se > 0.0 for se in table["se"][key])
    for key in ("survival@16", "survival@24"):
        assert all(0.0 < v < 1.0 for v in table["values"][key])
    for v16, v24 in zip(table["values"]["rmst@16"], table["values"]["rmst@24"]):
        assert 0.0 < v16 < v24 < 24.0


def test_iptw_output_schema(pipeline):
    payload = pipeline["iptw"]
    assert payload["schema"] == "smartjm/iptw@1"
    table = payload["table"]
    assert table["dtrs"] == LABELS
    assert table["estimands"] == ESTIMAND_KEYS
    assert "cov" in table and "se" in table
    for key in ("survival@16", "survival@24"):
        assert all(0.0 <= v <= 1.0 for v in table["values"][key])


def test_mcb_output_schema(pipeline):
    payload = pipeline["mcb"]
    assert payload["schema"] == "smartjm/mcb@1"
    assert payload["dtrs"] == LABELS
    assert payload["zeta"] == pytest.approx(0.05)
    assert set(payload["sets"]) == set(ESTIMAND_KEYS)
    for entry in payload["sets"].values():
        assert entry["best"] in LABELS
        assert entry["best"] in entry["in_set"]
        assert set(entry["in_set"]) <= set(LABELS)
        assert len(entry["margins"]) == 4
        assert len(entry["cutoffs"]) == 4
        assert all(c >= 0.0 for c in entry["cutoffs"])


def test_gformula_horizon_override(pipeline, tmp_path):
    target = tmp_path / "gf12.json"
    rc = main(
        [
            "gformula",
            "--config",
            str(pipeline["config"]),
            "--subjects",
            str(pipeline["subjects"]),
            "--longitudinal",
            str(pipeline["longitudinal"]),
            "--horizons",
            "12",
            "--out",
            str(target),
        ]
    )
    assert rc == 0
    table = json.loads(target.read_text())["table"]
    assert table["estimands"] == ["rmst@12", "survival@12"]


def test_simulate_seed_and_n_overrides(tmp_path):
    out = tmp_path / "ds"
    rc = main(["simulate", "--seed", "7", "--n", "12", "--out", str(out)])
    assert rc == 0
    meta = json.loads((out / "provenance.json").read_text())
    assert meta["seed"] == 7
    assert meta["n_subjects"] == 12
    assert len(read_dataset(out / "subjects.csv", out / "longitudinal.csv")) == 12


def test_simulate_custom_schedule(tmp_path):
    out = tmp_path / "ds"
    rc = main(
        ["simulate", "--n", "10", "--schedule", "0,8,16,24", "--out", str(out)]
    )
    assert rc == 0
    meta = json.loads((out / "provenance.json").read_text())
    assert meta["schedule"] == [0.0, 8.0, 16.0, 24.0]


def test_study_end_to_end(pipeline, tmp_path, capsys):
    out_dir = tmp_path / "study"
    rc = main(
        [
            "study",
            "--config",
            str(pipeline["config"]),
            "--verbose",
            "--out",
            str(out_dir),
        ]
    )
    assert rc == 0
    err = capsys.readouterr().err
    assert "replication 0:" in err and "replication 1:" in err
    payload = json.loads((out_dir / "study_results.json").read_text())
    assert payload["schema"] == "smartjm/study@1"
    assert payload["config"]["n_replications"] == 2
    assert payload["config"]["horizons"] == [16.0, 24.0]
    metrics = payload["metrics"]
    assert metrics["n_replications"] == 2
    assert metrics["convergence_pct"] >= 50.0
    assert len(metrics["parameters"]) == 21
    assert metrics["parameters"][0]["name"] == "beta0"
    assert {s["estimand"] for s in metrics["selection"]} == set(ESTIMAND_KEYS)
    assert {s["method"] for s in metrics["selection"]} == {"jm", "iptw"}
    truth_table = payload["truth"]["values"]
    assert truth_table["dtrs"] == LABELS
    assert payload["truth"]["parameters"]["beta0"] == pytest.approx(3.5)
    curves = payload["curves"]
    assert len(curves["grid"]) == 10
    for lab in LABELS:
        assert len(curves["truth"][lab]) == 10
        assert len(curves["mean_fitted"][lab]) == 10
        assert curves["truth"][lab][0] == pytest.approx(1.0)


# -- failure paths exit nonzero with a named stage -------------------------------


def test_schedule_without_decision_time_fails(tmp_path, capsys):
    rc = main(
        ["simulate", "--n", "10", "--schedule", "0,4,16,24", "--out", str(tmp_path)]
    )
    assert rc == 1
    err = capsys.readouterr().err
    assert "error [simulate]" in err
    assert "decision time tau" in err


def test_unparsable_schedule_fails(tmp_path, capsys):
    rc = main(
        ["simulate", "--n", "10", "--schedule", "0,four,8", "--out", str(tmp_path)]
    )
    assert rc == 1
    assert "error [config]" in capsys.readouterr().err


def test_fit_missing_file_fails(tmp_path, capsys):
    rc = main(
        [
            "fit",
            "--subjects",
            str(tmp_path / "nope.csv"),
            "--longitudinal",
            str(tmp_path / "also-nope.csv"),
            "--out",
            str(tmp_path / "fit.json"),
        ]
    )
    assert rc == 1
    assert "error [input]" in capsys.readouterr().err


def test_fit_swapped_files_fail(pipeline, tmp_path, capsys):
    rc = main(
        [
            "fit",
            "--subjects",
            str(pipeline["longitudinal"]),
            "--longitudinal",
            str(pipeline["subjects"]),
            "--out",
            str(tmp_path / "fit.json"),
        ]
    )
    assert rc == 1
    err = capsys.readouterr().err
    assert "error [input]" in err
    assert "expected header" in err


def test_mcb_requires_covariances(tmp_path, capsys):
    table = tmp_path / "table.json"
    table.write_text(
        json.dumps(
            {
                "dtrs": LABELS,
                "estimands": ["rmst@16"],
                "values": {"rmst@16": [1.0, 2.0, 3.0, 4.0]},
            }
        )
    )
    rc = main(["mcb", "--table", str(table), "--out", str(tmp_path / "m.json")])
    assert rc == 1
    err = capsys.readouterr().err
    assert "error [mcb]" in err
    assert "no covariances" in err


def test_mcb_rejects_malformed_json(tmp_path, capsys):
    table = tmp_path / "table.json"
    table.write_text("{oops")
    rc = main(["mcb", "--table", str(table), "--out", str(tmp_path / "m.json")])
    assert rc == 1
    assert "error [input]" in capsys.readouterr().err


def test_bad_config_key_fails(tmp_path, capsys):
    config = tmp_path / "study.json"
    config.write_text('{"bogus": 1}\n')
    rc = main(
        ["simulate", "--config", str(config), "--n", "5", "--out", str(tmp_path / "d")]
    )
    assert rc == 1
    err = capsys.readouterr().err
    assert "error [simulate]" in err
    assert "bogus" in err
