"""Command-line surface: features, simulate, fit, report.

Runs are driven by a declarative YAML config with full flag overrides;
every output file carries a hash of the resolved configuration, and a
fixed config plus seed reproduces byte-identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import asdict

import yaml

from . import covariate_engine, geo_graph, inference, met_ingest, model, simulator
from .errors import ClimortError, NumericalError, ValidationError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2

DEFAULT_CONFIG = {
    "paths": {
        "stations": None,
        "lookup": None,
        "adjacency": None,
        "districts": None,
        "observations": None,
        "covariates": None,
        "standardization": None,
    },
    "fusion": {"mode": "district", "k": 3},
    "horizon": {"start": None, "end": None},
    "gender": "both",
    "seed": 0,
    "out_dir": "out",
    "features": {"impute_repeats": 1, "recompute_percentiles": False},
    "inference": {
        "newton_tol": 1e-8,
        "newton_max_iter": 50,
        "simplex_fatol": 1e-4,
        "simplex_maxfev": 400,
        "grid": True,
        "draws": 2000,
        "dic_draws": 1000,
        "dense_cutoff": 5000,
    },
    "simulate": {
        "rows": 3,
        "cols": 3,
        "weeks": 52,
        "start_year": 2010,
        "alpha": math.log(0.002),
        "gamma": list(simulator.DEFAULT_GAMMA),
        "population": [60000, 25000, 15000, 8000],
        "theta": {
            "tau_phi": 400.0, "lambda_phi": 0.6, "tau_delta": 25.0, "tau_psi": 400.0,
            "tau_zeta_sa": 2500.0, "tau_zeta_st": 2500.0, "tau_zeta_at": 2500.0,
        },
        "max_cells": 200_000,
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | None, overrides: dict) -> dict:
    cfg = DEFAULT_CONFIG
    if path is not None:
        if not os.path.exists(path):
            raise ValidationError(f"config file not found: {path}")
        with open(path) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ValidationError(f"{path}: config must be a mapping")
        cfg = _merge(cfg, loaded)
    return _merge(cfg, overrides)


def hashable_config(cfg: dict) -> dict:
    """The configuration content that identifies a run.

    The output directory only decides where files land, not what they
    contain, so it stays outside the hash.
    """
    out = {k: v for k, v in cfg.items() if k != "out_dir"}
    return out


def config_hash(cfg: dict) -> str:
    blob = json.dumps(hashable_config(cfg), sort_keys=True, separators=(",", ":"),
                      default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _require_paths(cfg: dict, names: list[str]) -> dict:
    out = {}
    for name in names:
        path = cfg["paths"].get(name)
        if path is None:
            raise ValidationError(f"config paths.{name} is required for this command")
        if not os.path.exists(path):
            raise ValidationError(f"paths.{name}: file not found: {path}")
        out[name] = path
    return out


def _atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _CsvBuffer:
    """Build CSV text in memory so files can be written atomically."""

    def __init__(self, hash_comment: str):
        self.buf = io.StringIO()
        self.buf.write(f"# config_hash={hash_comment}\n")
        self.writer = csv.writer(self.buf)

    def row(self, values):
        self.writer.writerow(values)

    def text(self) -> str:
        return self.buf.getvalue()


def _write_json(path: str, payload: dict, hash_: str) -> None:
    payload = dict(payload)
    payload["config_hash"] = hash_
    _atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def _parse_week(label: str) -> tuple[int, int]:
    try:
        year, week = label.split("-W")
        return int(year), int(week)
    except (ValueError, AttributeError) as exc:
        raise ValidationError(f"bad ISO week label {label!r}, expected YYYY-Wnn") from exc


def _inference_settings(cfg: dict) -> inference.InferenceSettings:
    inf_cfg = cfg["inference"]
    return inference.InferenceSettings(
        newton_tol=float(inf_cfg["newton_tol"]),
        newton_max_iter=int(inf_cfg["newton_max_iter"]),
        simplex_fatol=float(inf_cfg["simplex_fatol"]),
        simplex_maxfev=int(inf_cfg["simplex_maxfev"]),
        grid_enabled=bool(inf_cfg["grid"]),
        variance_draws=int(inf_cfg["draws"]),
        dic_draws=int(inf_cfg["dic_draws"]),
        dense_cutoff=int(inf_cfg["dense_cutoff"]),
        seed=int(cfg["seed"]),
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_features(cfg: dict) -> int:
    """Ingest station weather, impute, fuse, and write the covariate matrix."""
    paths = _require_paths(cfg, ["stations", "lookup", "adjacency", "districts"])
    hash_ = config_hash(cfg)
    out_dir = cfg["out_dir"]
    graph = geo_graph.load_district_graph(paths["adjacency"], paths["districts"])
    records = met_ingest.read_station_csv(paths["stations"])
    lookup = met_ingest.read_station_lookup(paths["lookup"])
    locations = met_ingest.station_locations(records)
    missing_before = met_ingest.count_missing(records)
    seed = int(cfg["seed"])
    repeats = int(cfg["features"]["impute_repeats"])
    if repeats < 1:
        raise ValidationError("features.impute_repeats must be at least 1")

    horizon = cfg["horizon"]
    start = _parse_week(horizon["start"]) if horizon.get("start") else None
    end = _parse_week(horizon["end"]) if horizon.get("end") else None

    written = []
    for rep in range(repeats):
        rep_seed = seed + rep
        imputed = met_ingest.impute_missing_daily(records, seed=rep_seed)
        weekly = met_ingest.aggregate_weekly(imputed)
        if start or end:
            weekly = [w for w in weekly
                      if (start is None or (w.iso_year, w.iso_week) >= start)
                      and (end is None or (w.iso_year, w.iso_week) <= end)]
            if not weekly:
                raise ValidationError("horizon filter removed every week")
        fused = met_ingest.fuse_to_districts(weekly, graph, locations, lookup,
                                             mode=cfg["fusion"]["mode"],
                                             k=int(cfg["fusion"]["k"]))
        design = covariate_engine.build_design_matrix(
            fused, graph, recompute_percentiles=bool(cfg["features"]["recompute_percentiles"]))
        suffix = "" if rep == 0 else f"_rep{rep}"
        written.append(suffix)
        _write_features_outputs(out_dir, suffix, design, fused, hash_)

    meta = {
        "seed": seed,
        "impute_repeats": repeats,
        "artifacts": [f"covariates{s}.csv" for s in written],
        "fusion_mode": cfg["fusion"]["mode"],
        "k": int(cfg["fusion"]["k"]),
        "week_numbering": "ISO-8601",
        "missing_before_imputation": missing_before,
        "missing_after_imputation": {v: 0 for v in missing_before},
        "imputed_cells": {v: missing_before[v] for v in missing_before},
        "n_stations": len({r.station_id for r in records}),
        "n_districts": graph.n_districts,
        "n_graph_components": graph.n_components(),
        "knn_districts": sorted({w.district_id for w in fused if w.source == "knn"}),
    }
    _write_json(os.path.join(out_dir, "features_meta.json"), meta, hash_)
    print(f"features: wrote covariates for {graph.n_districts} districts to {out_dir}")
    return EXIT_OK


def _write_features_outputs(out_dir, suffix, design, fused, hash_):
    buf = _CsvBuffer(hash_)
    buf.row(["district_id", "iso_year", "iso_week", *covariate_engine.COVARIATE_NAMES])
    row = 0
    for d in design.district_ids:
        for (year, week) in design.weeks:
            buf.row([d, year, week, *[repr(float(v)) for v in design.values[row]]])
            row += 1
    _atomic_write_text(os.path.join(out_dir, f"covariates{suffix}.csv"), buf.text())

    std_payload = {name: {"mean": rec.mean, "sd": rec.sd}
                   for name, rec in sorted(design.standardization.items())}
    _write_json(os.path.join(out_dir, f"standardization{suffix}.json"), std_payload, hash_)

    if fused is None:
        return
    wbuf = _CsvBuffer(hash_)
    wbuf.row(["district_id", "iso_year", "iso_week", "temp_min_weekly_mean_c",
              "temp_max_weekly_mean_c", "humidity_weekly_mean_pct", "n_days",
              "partial", "source", "n_source_stations"])
    for r in sorted(fused, key=lambda r: (r.district_id, r.iso_year, r.iso_week)):
        wbuf.row([r.district_id, r.iso_year, r.iso_week, repr(r.temp_min_weekly_mean_c),
                  repr(r.temp_max_weekly_mean_c), repr(r.humidity_weekly_mean_pct),
                  r.n_days, int(r.partial), r.source, r.n_source_stations])
    _atomic_write_text(os.path.join(out_dir, f"weather{suffix}.csv"), wbuf.text())


def cmd_simulate(cfg: dict) -> int:
    """Generate a self-contained synthetic dataset directory."""
    hash_ = config_hash(cfg)
    out_dir = cfg["out_dir"]
    sim_cfg = cfg["simulate"]
    rows, cols, weeks = int(sim_cfg["rows"]), int(sim_cfg["cols"]), int(sim_cfg["weeks"])
    n_cells = rows * cols * len(model.AGE_GROUPS) * weeks * 2
    if n_cells > int(sim_cfg["max_cells"]):
        raise ValidationError(
            f"requested {n_cells} cells exceeds simulate.max_cells={sim_cfg['max_cells']}; "
            "use desk-scale dimensions (e.g. --desk-scale) or raise the cap")
    theta = model.HyperParams(**{k: float(v) for k, v in sim_cfg["theta"].items()})
    spec = simulator.SimulationSpec(
        rows=rows, cols=cols, n_weeks=weeks, theta=theta,
        gamma=tuple(float(g) for g in sim_cfg["gamma"]),
        alpha=float(sim_cfg["alpha"]),
        population=tuple(int(p) for p in sim_cfg["population"]),
        seed=int(cfg["seed"]), start_year=int(sim_cfg["start_year"]))
    result = simulator.simulate(spec)

    obs = _CsvBuffer(hash_)
    obs.row(["district_id", "iso_year", "iso_week", "age_group", "gender",
             "deaths", "population"])
    for c in result.cells:
        obs.row([c.district_id, c.iso_year, c.iso_week, c.age_group, c.gender,
                 c.deaths, c.population])
    _atomic_write_text(os.path.join(out_dir, "observations.csv"), obs.text())

    _write_features_outputs(out_dir, "", result.design, None, hash_)
    _write_json(os.path.join(out_dir, "truth.json"), result.truth, hash_)

    graph = result.graph
    dbuf = _CsvBuffer(hash_)
    dbuf.row(["district_id", "elevation_m", "centroid_x_km", "centroid_y_km"])
    for i, d in enumerate(graph.district_ids):
        dbuf.row([d, repr(float(graph.elevation_m[i])),
                  repr(float(graph.centroid_km[i, 0])), repr(float(graph.centroid_km[i, 1]))])
    _atomic_write_text(os.path.join(out_dir, "districts.csv"), dbuf.text())
    lines = [f"# config_hash={hash_}"]
    adj = graph.adjacency.tocoo()
    for a, b in zip(adj.row, adj.col):
        if a < b:
            lines.append(f"{graph.district_ids[a]}\t{graph.district_ids[b]}")
    _atomic_write_text(os.path.join(out_dir, "edges.tsv"), "\n".join(lines) + "\n")
    print(f"simulate: wrote {len(result.cells)} observations to {out_dir}")
    return EXIT_OK


def cmd_fit(cfg: dict) -> int:
    """Fit the model per gender and write posterior summaries."""
    paths = _require_paths(cfg, ["adjacency", "districts", "observations", "covariates"])
    hash_ = config_hash(cfg)
    out_dir = cfg["out_dir"]
    graph = geo_graph.load_district_graph(paths["adjacency"], paths["districts"])
    std_path = cfg["paths"].get("standardization")
    design = covariate_engine.read_design_csv(paths["covariates"], std_path)
    cells = model.read_observations_csv(paths["observations"])
    settings = _inference_settings(cfg)

    genders = (cfg["gender"],) if cfg["gender"] in model.GENDERS else model.GENDERS
    if cfg["gender"] not in (*model.GENDERS, "both"):
        raise ValidationError(f"gender must be female, male or both, got {cfg['gender']!r}")

    structures = None
    for gender in genders:
        gm = model.assemble_gender_model(cells, graph, design, gender, structures=structures)
        structures = gm.structures
        try:
            result = inference.fit_gender(gm, settings=settings)
        except NumericalError as exc:
            diag = os.path.join(out_dir, gender, "diagnostics.log")
            _atomic_write_text(diag, f"fit failed: {exc}\n")
            raise NumericalError(f"{exc} (diagnostics at {diag})") from exc
        _write_fit_outputs(os.path.join(out_dir, gender), result, gm, cfg, hash_)
        print(f"fit[{gender}]: DIC {result.dic.dic:.2f} "
              f"p_eff {result.dic.p_eff:.1f} -> {os.path.join(out_dir, gender)}")
    return EXIT_OK


def _write_fit_outputs(gdir, result, gm, cfg, hash_):
    fe = _CsvBuffer(hash_)
    fe.row(["variable", "mean", "median", "ci_low", "ci_high", "sd", "significant"])
    for row in result.fixed_effects:
        fe.row([row.name, repr(row.mean), repr(row.median), repr(row.ci_low),
                repr(row.ci_high), repr(row.sd), int(row.significant)])
    _atomic_write_text(os.path.join(gdir, "fixed_effects.csv"), fe.text())

    specs = {
        "phi": ("random_effects_spatial.csv", ["district_id"]),
        "delta": ("random_effects_age.csv", ["age_group"]),
        "psi": ("random_effects_time.csv", ["iso_year", "iso_week"]),
        "zeta_sa": ("random_effects_space_age.csv", ["district_id", "age_group"]),
        "zeta_st": ("random_effects_space_time.csv", ["district_id", "iso_year", "iso_week"]),
        "zeta_at": ("random_effects_age_time.csv", ["iso_year", "iso_week", "age_group"]),
    }
    for name, (fname, key_cols) in specs.items():
        block = result.random_effects[name]
        buf = _CsvBuffer(hash_)
        buf.row([*key_cols, "mean", "sd", "ci_low", "ci_high"])
        for k, key in enumerate(block.keys):
            key_fields = _split_key(key)
            buf.row([*key_fields, repr(float(block.mean[k])), repr(float(block.sd[k])),
                     repr(float(block.ci_low[k])), repr(float(block.ci_high[k]))])
        _atomic_write_text(os.path.join(gdir, fname), buf.text())

    hyper = {
        "mode": {k: float(v) for k, v in vars(result.hyper_mode).items()},
        "grid": [{"internal": [float(v) for v in p.internal],
                  "log_posterior": float(p.log_posterior),
                  "weight": float(p.weight)} for p in result.grid],
    }
    _write_json(os.path.join(gdir, "hyperparameters.json"), hyper, hash_)
    _write_json(os.path.join(gdir, "dic.json"), asdict(result.dic), hash_)

    full = {
        "gender": result.gender,
        "fixed_effects": [asdict(fe) for fe in result.fixed_effects],
        "random_effects": {
            name: {"keys": [list(k) if isinstance(k, tuple) else k for k in block.keys],
                   "mean": block.mean.tolist(), "sd": block.sd.tolist(),
                   "ci_low": block.ci_low.tolist(), "ci_high": block.ci_high.tolist()}
            for name, block in result.random_effects.items()},
        "hyperparameters": hyper,
        "dic": asdict(result.dic),
        "metadata": result.metadata,
    }
    _write_json(os.path.join(gdir, "fit_result.json"), full, hash_)

    manifest = {
        "gender": result.gender,
        "metadata": result.metadata,
        "config": hashable_config(cfg),
        "n_fixed_effects": len(result.fixed_effects),
    }
    _write_json(os.path.join(gdir, "manifest.json"), manifest, hash_)

    trace = result.grid[0].approx.objective_trace if result.grid[0].approx else []
    lines = [f"# config_hash={hash_}",
             f"newton objective trace at mode ({len(trace)} entries):"]
    lines += [repr(v) for v in trace]
    _atomic_write_text(os.path.join(gdir, "diagnostics.log"), "\n".join(lines) + "\n")


def _split_key(key):
    if isinstance(key, tuple):
        out = []
        for part in key:
            out.extend(_split_key(part))
        return out
    if isinstance(key, str) and "-W" in key:
        year, week = key.split("-W")
        return [year, str(int(week))]
    return [key]


def cmd_report(cfg: dict, fit_dir: str) -> int:
    """Print the fixed-effects table and DIC block of a finished fit."""
    fe_path = os.path.join(fit_dir, "fixed_effects.csv")
    dic_path = os.path.join(fit_dir, "dic.json")
    if not os.path.exists(fe_path):
        raise ValidationError(f"no fixed_effects.csv under {fit_dir}")
    with open(fe_path) as fh:
        first = fh.readline()
        if not first.startswith("#"):
            fh.seek(0)
        rows = list(csv.DictReader(fh))
    print(f"{'variable':<24}{'mean':>9}{'median':>9}  {'95% CI':>20}  signif")
    for r in rows:
        ci = f"({float(r['ci_low']):.3f}, {float(r['ci_high']):.3f})"
        star = "*" if r["significant"] == "1" else ""
        print(f"{r['variable']:<24}{float(r['mean']):>9.3f}{float(r['median']):>9.3f}"
              f"  {ci:>20}  {star}")
    if os.path.exists(dic_path):
        with open(dic_path) as fh:
            dic = json.load(fh)
        print(f"\nDIC                    {dic['dic']:.2f}")
        print(f"DIC (saturated model)  {dic['dic_saturated']:.2f}")
        print(f"Effective parameters   {dic['p_eff']:.2f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="climort",
                     description="Climate-driven mortality modelling pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (("features", "build weekly covariates from station weather"),
                      ("simulate", "generate a synthetic dataset"),
                      ("fit", "fit the mortality model"),
                      ("report", "print a fitted model summary")):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", default=None, help="YAML config path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        if name == "features":
            p.add_argument("--fusion", choices=["district", "state"], default=None)
            p.add_argument("--k", type=int, default=None)
            p.add_argument("--impute-repeats", type=int, default=None)
        if name == "fit":
            p.add_argument("--gender", choices=["female", "male", "both"], default=None)
            p.add_argument("--draws", type=int, default=None)
        if name == "simulate":
            p.add_argument("--desk-scale", action="store_true",
                           help="force the 3x3 lattice, 52-week default dimensions")
        if name == "report":
            p.add_argument("--fit-dir", required=True)
    return parser


def _overrides_from_args(args) -> dict:
    out: dict = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if args.out is not None:
        out["out_dir"] = args.out
    if getattr(args, "gender", None) is not None:
        out["gender"] = args.gender
    if getattr(args, "draws", None) is not None:
        out.setdefault("inference", {})["draws"] = args.draws
    if getattr(args, "fusion", None) is not None:
        out.setdefault("fusion", {})["mode"] = args.fusion
    if getattr(args, "k", None) is not None:
        out.setdefault("fusion", {})["k"] = args.k
    if getattr(args, "impute_repeats", None) is not None:
        out.setdefault("features", {})["impute_repeats"] = args.impute_repeats
    if getattr(args, "desk_scale", False):
        out.setdefault("simulate", {}).update({"rows": 3, "cols": 3, "weeks": 52})
    return out


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config, _overrides_from_args(args))
        if args.command == "features":
            return cmd_features(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "fit":
            return cmd_fit(cfg)
        if args.command == "report":
            return cmd_report(cfg, args.fit_dir)
        raise ValidationError(f"unknown command {args.command!r}")
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ClimortError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
