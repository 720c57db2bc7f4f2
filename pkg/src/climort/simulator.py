"""Synthetic datasets drawn from the exact generative model.

Draws every random-effect block from its constrained Gaussian prior,
assembles the linear predictor, and samples Poisson death counts. The
truth record (fixed effects, hyperparameters, every latent block) is
kept alongside so any pipeline stage can be audited independently.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .covariate_engine import COVARIATE_NAMES, DesignMatrix, Standardization
from .errors import ValidationError
from .geo_graph import DistrictGraph, lattice_graph, leroux_precision
from .gmrf_core import constrained_sample
from .model import (AGE_GROUPS, GENDERS, HyperParams, LatentLayout, MortalityCell,
                    ModelStructures, block_constraint_sets, build_linear_predictor_map,
                    build_structures)

MAX_LOG_MU = 30.0

# Table-style planted fixed effects used as the default synthetic truth;
# order follows COVARIATE_NAMES.
DEFAULT_GAMMA = (0.034, -0.001, 0.000, 0.015, 0.076, 0.089, 0.328,
                 0.023, -0.121, 0.047, 0.067, 0.018, -0.113)


@dataclass(frozen=True)
class SimulationSpec:
    """Dimensions, truth, and seed of one synthetic dataset."""

    rows: int = 3
    cols: int = 3
    n_weeks: int = 52
    theta: HyperParams = field(default_factory=lambda: HyperParams(
        tau_phi=400.0, lambda_phi=0.6, tau_delta=25.0, tau_psi=400.0,
        tau_zeta_sa=2500.0, tau_zeta_st=2500.0, tau_zeta_at=2500.0))
    gamma: tuple = DEFAULT_GAMMA
    alpha: float = math.log(0.002)
    population: tuple = (60000, 25000, 15000, 8000)
    seed: int = 0
    genders: tuple = GENDERS
    start_year: int = 2010
    graph: DistrictGraph | None = None

    def __post_init__(self):
        if self.graph is None and (self.rows < 2 or self.cols < 2):
            raise ValidationError("lattice needs at least 2x2 districts")
        if self.n_weeks < 2:
            raise ValidationError("need at least 2 weeks")
        if len(self.gamma) != len(COVARIATE_NAMES):
            raise ValidationError(f"gamma needs {len(COVARIATE_NAMES)} entries")
        pops = self.population if isinstance(self.population, (tuple, list)) \
            else (self.population,) * len(AGE_GROUPS)
        if len(pops) != len(AGE_GROUPS) or any(p <= 0 for p in pops):
            raise ValidationError("population needs one positive entry per age group")
        object.__setattr__(self, "population", tuple(int(p) for p in pops))
        for g in self.genders:
            if g not in GENDERS:
                raise ValidationError(f"unknown gender {g!r}")


@dataclass
class SimulationResult:
    graph: DistrictGraph
    design: DesignMatrix
    cells: list[MortalityCell]
    truth: dict
    structures: ModelStructures


def iso_weeks_from(start_year: int, count: int) -> list[tuple[int, int]]:
    """`count` consecutive ISO weeks starting at the given year's first week."""
    jan4 = dt.date(start_year, 1, 4)  # always inside ISO week 1
    monday = jan4 - dt.timedelta(days=jan4.isoweekday() - 1)
    weeks = []
    for t in range(count):
        iso = (monday + dt.timedelta(weeks=t)).isocalendar()
        weeks.append((iso[0], iso[1]))
    return weeks


def synthetic_design(graph: DistrictGraph, weeks: list[tuple[int, int]],
                     seed: int) -> DesignMatrix:
    """Design matrix with seasonal binary patterns and standardized continuous columns.

    Hot weeks and heat categories concentrate in summer weeks, cold
    indicators in winter, mild weeks in the shoulder seasons; elevation
    comes from the graph in kilometres.
    """
    rng = np.random.default_rng(seed)
    n_d, n_w = graph.n_districts, len(weeks)
    values = np.zeros((n_d * n_w, len(COVARIATE_NAMES)))
    col = {name: k for k, name in enumerate(COVARIATE_NAMES)}
    week_no = np.array([w for (_, w) in weeks])
    season = 2.0 * math.pi * (week_no - 1) / 52.0
    summer = (week_no >= 22) & (week_no <= 35)
    winter = (week_no <= 8) | (week_no >= 48)
    shoulder = ~summer & ~winter
    row = 0
    for d in range(n_d):
        tmax = -np.cos(season) * 10.0 + rng.standard_normal(n_w) * 2.0
        tmin = tmax - 8.0 + rng.standard_normal(n_w) * 1.5
        humid = rng.standard_normal(n_w) * 8.0 + 70.0
        r = slice(row, row + n_w)
        values[r, col["scale_temp_max_mean"]] = tmax
        values[r, col["scale_temp_min_mean"]] = tmin
        values[r, col["scale_humidity_mean"]] = humid
        values[r, col["strong_discomfort"]] = summer & (rng.random(n_w) < 0.12)
        values[r, col["severe_malaise"]] = summer & (rng.random(n_w) < 0.06)
        values[r, col["increased_risk"]] = summer & (rng.random(n_w) < 0.03)
        values[r, col["serious_risk"]] = summer & (rng.random(n_w) < 0.01)
        values[r, col["mild_week"]] = shoulder & (rng.random(n_w) < 0.35)
        values[r, col["hot_week"]] = summer & (rng.random(n_w) < 0.40)
        values[r, col["cold_week"]] = winter & (rng.random(n_w) < 0.45)
        values[r, col["super_cold_week"]] = winter & (rng.random(n_w) < 0.20)
        values[r, col["last_week_was_dry"]] = rng.random(n_w) < 0.05
        values[r, col["elevation_km"]] = graph.elevation_m[d] / 1000.0
        row += n_w
    standardization = {}
    for name in ("scale_temp_max_mean", "scale_temp_min_mean", "scale_humidity_mean"):
        c = col[name]
        mean = float(np.mean(values[:, c]))
        sd = float(np.std(values[:, c], ddof=1))
        values[:, c] = (values[:, c] - mean) / sd
        standardization[name] = Standardization(mean, sd)
    return DesignMatrix(tuple(graph.district_ids), tuple(weeks), values, standardization)


def _draw_block(rng_seed: int, matrix, constraints) -> np.ndarray:
    return constrained_sample(matrix, constraints, 1, seed=rng_seed)[0]


def simulate(spec: SimulationSpec) -> SimulationResult:
    """Generate Poisson mortality counts from the full generative model.

    Every latent block is drawn from its constrained prior; the linear
    predictor is exp-linked with the log-population offset, and counts
    are Poisson. Raises when any cell's log mean exceeds MAX_LOG_MU
    (advice: shrink the effect scales or populations).
    """
    graph = spec.graph if spec.graph is not None else lattice_graph(spec.rows, spec.cols)
    weeks = iso_weeks_from(spec.start_year, spec.n_weeks)
    design = synthetic_design(graph, weeks, spec.seed)
    I, J, T = graph.n_districts, len(AGE_GROUPS), len(weeks)
    layout = LatentLayout(I, J, T)
    structures = build_structures(graph, J, T)
    per_block = dict(block_constraint_sets(layout, structures))

    i_idx, j_idx, t_idx = np.meshgrid(np.arange(I), np.arange(J), np.arange(T), indexing="ij")
    i_idx, j_idx, t_idx = (a.ravel() for a in (i_idx, j_idx, t_idx))
    rows = np.array([design.row_of(graph.district_ids[i], weeks[t])
                     for i, t in zip(i_idx, t_idx)])
    M = build_linear_predictor_map(i_idx, j_idx, t_idx, layout, design.values[rows])
    populations = np.array([spec.population[j] for j in j_idx], dtype=float)

    seed_root = np.random.SeedSequence(spec.seed)
    gender_seeds = {g: s for g, s in zip(GENDERS, seed_root.spawn(len(GENDERS)))}
    cells: list[MortalityCell] = []
    truth = {"seed": spec.seed, "alpha": spec.alpha,
             "gamma": {name: g for name, g in zip(COVARIATE_NAMES, spec.gamma)},
             "theta": {k: float(v) for k, v in vars(spec.theta).items()},
             "genders": {}}

    theta = spec.theta
    blocks_spec = [
        ("phi", leroux_precision(structures.spatial, theta.lambda_phi, theta.tau_phi).matrix),
        ("delta", theta.tau_delta * structures.rw_age.matrix),
        ("psi", theta.tau_psi * structures.rw_time.matrix),
        ("zeta_sa", theta.tau_zeta_sa * structures.inter_sa.precision.matrix),
        ("zeta_st", theta.tau_zeta_st * structures.inter_st.precision.matrix),
        ("zeta_at", theta.tau_zeta_at * structures.inter_at.precision.matrix),
    ]
    for gender in spec.genders:
        child = gender_seeds[gender].spawn(len(blocks_spec) + 1)
        x = np.zeros(layout.total_dim)
        x[0] = spec.alpha
        x[layout.block_slice("gamma")] = spec.gamma
        drawn = {}
        for (name, matrix), seq in zip(blocks_spec, child[:-1]):
            draw = _draw_block(int(seq.generate_state(1)[0]), matrix, per_block[name])
            x[layout.block_slice(name)] = draw
            drawn[name] = draw.tolist()
        log_mu = np.log(populations) + M @ x
        if float(np.max(log_mu)) > MAX_LOG_MU:
            raise ValidationError(
                f"simulated log mean exceeds {MAX_LOG_MU}; use smaller effect scales")
        rng_y = np.random.default_rng(child[-1].generate_state(1)[0])
        y = rng_y.poisson(np.exp(log_mu))
        for c in range(len(y)):
            cells.append(MortalityCell(
                district_id=graph.district_ids[i_idx[c]],
                iso_year=weeks[t_idx[c]][0], iso_week=weeks[t_idx[c]][1],
                age_group=AGE_GROUPS[j_idx[c]], gender=gender,
                deaths=int(y[c]), population=int(populations[c])))
        truth["genders"][gender] = {"blocks": drawn, "latent_dim": layout.total_dim}
    return SimulationResult(graph=graph, design=design, cells=cells, truth=truth,
                            structures=structures)


def write_truth_json(path, result: SimulationResult, config_hash: str | None = None) -> None:
    payload = dict(result.truth)
    if config_hash is not None:
        payload["config_hash"] = config_hash
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
