import json
import pathlib
import shutil

import numpy as np
import pytest
import yaml

from climort.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, config_hash, load_config, main

from helpers import write_fixture_corpus

DATA = pathlib.Path(__file__).parent / "data"


@pytest.fixture
def fixture_cwd(tmp_path, monkeypatch):
    write_fixture_corpus(tmp_path)
    shutil.copy(DATA / "features_config.yaml", tmp_path / "features.yaml")
    monkeypatch.chdir(tmp_path)
    return tmp_path


def read_bytes(path):
    return pathlib.Path(path).read_bytes()


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def test_features_matches_golden_file(fixture_cwd):
    assert main(["features", "--config", "features.yaml"]) == EXIT_OK
    assert read_bytes("out/covariates.csv") == read_bytes(DATA / "golden_covariates.csv")
    assert read_bytes("out/weather.csv") == read_bytes(DATA / "golden_weather.csv")


def test_features_rerun_byte_identical(fixture_cwd):
    assert main(["features", "--config", "features.yaml"]) == EXIT_OK
    first = {p.name: read_bytes(p) for p in pathlib.Path("out").iterdir()}
    assert main(["features", "--config", "features.yaml"]) == EXIT_OK
    second = {p.name: read_bytes(p) for p in pathlib.Path("out").iterdir()}
    assert first == second


def test_features_missing_lookup_exits_validation(fixture_cwd, capsys):
    pathlib.Path("lookup.csv").unlink()
    assert main(["features", "--config", "features.yaml"]) == EXIT_VALIDATION
    err = capsys.readouterr().err
    assert "lookup.csv" in err


def test_features_impute_repeats(fixture_cwd):
    assert main(["features", "--config", "features.yaml", "--impute-repeats", "2"]) == EXIT_OK
    assert pathlib.Path("out/covariates.csv").exists()
    assert pathlib.Path("out/covariates_rep1.csv").exists()
    meta = json.loads(pathlib.Path("out/features_meta.json").read_text())
    assert meta["impute_repeats"] == 2


def test_features_seed_changes_only_imputed_cells(fixture_cwd):
    assert main(["features", "--config", "features.yaml", "--out", "o1"]) == EXIT_OK
    assert main(["features", "--config", "features.yaml", "--out", "o2",
                 "--seed", "99"]) == EXIT_OK
    # different seeds draw different imputations, schema unchanged
    a = pathlib.Path("o1/covariates.csv").read_text().splitlines()
    b = pathlib.Path("o2/covariates.csv").read_text().splitlines()
    assert len(a) == len(b)
    assert a[1] == b[1]  # header


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def sim_config(tmp_path, **overrides):
    cfg = {"out_dir": str(tmp_path / "sim"), "seed": 11,
           "simulate": {"rows": 2, "cols": 2, "weeks": 8, **overrides}}
    path = tmp_path / "sim.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_simulate_desk_scale_row_count(tmp_path):
    cfg = tmp_path / "desk.yaml"
    cfg.write_text(yaml.safe_dump({"out_dir": str(tmp_path / "sim")}))
    assert main(["simulate", "--config", str(cfg), "--desk-scale"]) == EXIT_OK
    lines = (tmp_path / "sim" / "observations.csv").read_text().splitlines()
    assert len(lines) == 2 + 9 * 4 * 52 * 2  # hash + header + cells for both genders


def test_simulate_seed_changes_counts(tmp_path):
    cfg = sim_config(tmp_path)
    assert main(["simulate", "--config", str(cfg)]) == EXIT_OK
    first = (tmp_path / "sim" / "observations.csv").read_text()
    assert main(["simulate", "--config", str(cfg), "--seed", "12",
                 "--out", str(tmp_path / "sim2")]) == EXIT_OK
    second = (tmp_path / "sim2" / "observations.csv").read_text()
    assert first.splitlines()[1] == second.splitlines()[1]
    assert first != second


def test_simulate_oversized_refused(tmp_path):
    cfg = sim_config(tmp_path, rows=40, cols=40, weeks=500)
    assert main(["simulate", "--config", str(cfg)]) == EXIT_VALIDATION


def test_simulate_reproducible(tmp_path):
    cfg = sim_config(tmp_path)
    assert main(["simulate", "--config", str(cfg)]) == EXIT_OK
    first = {p.name: p.read_bytes() for p in (tmp_path / "sim").iterdir()}
    assert main(["simulate", "--config", str(cfg)]) == EXIT_OK
    second = {p.name: p.read_bytes() for p in (tmp_path / "sim").iterdir()}
    assert first == second


# ---------------------------------------------------------------------------
# fit and report
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def fitted_dir(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("fit")
    sim_cfg = tmp_path / "sim.yaml"
    sim_cfg.write_text(yaml.safe_dump(
        {"out_dir": str(tmp_path / "sim"), "seed": 21,
         "simulate": {"rows": 2, "cols": 2, "weeks": 8}}))
    assert main(["simulate", "--config", str(sim_cfg)]) == EXIT_OK
    fit_cfg = tmp_path / "fit.yaml"
    fit_cfg.write_text(yaml.safe_dump({
        "paths": {
            "adjacency": str(tmp_path / "sim" / "edges.tsv"),
            "districts": str(tmp_path / "sim" / "districts.csv"),
            "observations": str(tmp_path / "sim" / "observations.csv"),
            "covariates": str(tmp_path / "sim" / "covariates.csv"),
            "standardization": str(tmp_path / "sim" / "standardization.json"),
        },
        "out_dir": str(tmp_path / "fit"),
        "seed": 5,
        "inference": {"simplex_maxfev": 25, "dic_draws": 150, "grid": True},
    }))
    assert main(["fit", "--config", str(fit_cfg), "--gender", "both"]) == EXIT_OK
    return tmp_path


def test_fit_outputs_both_genders(fitted_dir):
    for gender in ("female", "male"):
        gdir = fitted_dir / "fit" / gender
        lines = (gdir / "fixed_effects.csv").read_text().splitlines()
        assert len(lines) == 2 + 14  # hash + header + intercept + 13 covariates
        for name in ("random_effects_spatial.csv", "random_effects_age.csv",
                     "random_effects_time.csv", "random_effects_space_age.csv",
                     "random_effects_space_time.csv", "random_effects_age_time.csv",
                     "hyperparameters.json", "dic.json", "manifest.json",
                     "fit_result.json", "diagnostics.log"):
            assert (gdir / name).exists()


def test_fit_gender_dirs_independent(fitted_dir):
    female = (fitted_dir / "fit" / "female" / "fixed_effects.csv").read_text()
    male = (fitted_dir / "fit" / "male" / "fixed_effects.csv").read_text()
    assert female != male


def test_fit_spatial_table_keyed_by_district(fitted_dir):
    lines = (fitted_dir / "fit" / "female" / "random_effects_spatial.csv").read_text()
    assert "district_id" in lines.splitlines()[1]
    assert len(lines.splitlines()) == 2 + 4


def test_report_prints_table(fitted_dir, capsys):
    assert main(["report", "--fit-dir", str(fitted_dir / "fit" / "female")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "intercept" in out and "hot_week" in out
    assert "DIC" in out and "Effective parameters" in out


def test_report_missing_dir(tmp_path, capsys):
    assert main(["report", "--fit-dir", str(tmp_path / "nope")]) == EXIT_VALIDATION


def test_fit_numerical_failure_exit_code(fitted_dir, tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(yaml.safe_dump({
        "paths": {
            "adjacency": str(fitted_dir / "sim" / "edges.tsv"),
            "districts": str(fitted_dir / "sim" / "districts.csv"),
            "observations": str(fitted_dir / "sim" / "observations.csv"),
            "covariates": str(fitted_dir / "sim" / "covariates.csv"),
        },
        "out_dir": str(tmp_path / "fit"),
        "inference": {"newton_max_iter": 1, "simplex_maxfev": 10, "dic_draws": 150},
    }))
    assert main(["fit", "--config", str(cfg), "--gender", "female"]) == EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# config machinery
# ---------------------------------------------------------------------------

def test_bad_arguments_exit_validation(capsys):
    assert main(["features", "--config", "/does/not/exist.yaml"]) == EXIT_VALIDATION
    assert main(["nonsense"]) == EXIT_VALIDATION


def test_config_hash_stable_and_sensitive():
    a = load_config(None, {"seed": 1})
    b = load_config(None, {"seed": 1})
    c = load_config(None, {"seed": 2})
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)


def test_flag_overrides_config(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"fusion": {"mode": "district", "k": 3}}))
    merged = load_config(str(cfg), {"fusion": {"k": 5}})
    assert merged["fusion"]["k"] == 5 and merged["fusion"]["mode"] == "district"
