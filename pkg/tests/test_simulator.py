import math

import numpy as np
import pytest

from climort.covariate_engine import COVARIATE_NAMES
from climort.errors import ValidationError
from climort.model import HyperParams, LatentLayout, block_constraint_sets
from climort.simulator import (DEFAULT_GAMMA, SimulationSpec, iso_weeks_from, simulate,
                               synthetic_design)

TIGHT = HyperParams(tau_phi=1e8, lambda_phi=0.5, tau_delta=1e8, tau_psi=1e8,
                    tau_zeta_sa=1e8, tau_zeta_st=1e8, tau_zeta_at=1e8)


def test_iso_weeks_consecutive():
    weeks = iso_weeks_from(2010, 60)
    assert weeks[0] == (2010, 1)
    assert weeks[51] == (2010, 52)
    assert weeks[52] == (2011, 1)
    assert len(set(weeks)) == 60


def test_rate_matches_baseline_when_effects_vanish():
    # effect precisions so large that every random effect is essentially zero
    spec = SimulationSpec(rows=2, cols=2, n_weeks=26, theta=TIGHT,
                          gamma=(0.0,) * 13, alpha=math.log(0.001),
                          population=100_000, seed=3, genders=("female",))
    res = simulate(spec)
    deaths = np.array([c.deaths for c in res.cells], dtype=float)
    pop = np.array([c.population for c in res.cells], dtype=float)
    rate = deaths.sum() / pop.sum()
    se = math.sqrt(0.001 / pop.sum())
    assert abs(rate - 0.001) < 3 * se


def test_fixed_seed_reproduces_dataset():
    spec = SimulationSpec(seed=9)
    a = simulate(spec)
    b = simulate(spec)
    assert a.cells == b.cells
    assert np.array_equal(a.design.values, b.design.values)
    assert a.truth == b.truth


def test_seed_changes_counts_not_schema():
    a = simulate(SimulationSpec(seed=1, rows=2, cols=2, n_weeks=8))
    b = simulate(SimulationSpec(seed=2, rows=2, cols=2, n_weeks=8))
    assert len(a.cells) == len(b.cells)
    assert [(c.district_id, c.iso_week, c.age_group, c.gender) for c in a.cells] \
        == [(c.district_id, c.iso_week, c.age_group, c.gender) for c in b.cells]
    assert any(x.deaths != y.deaths for x, y in zip(a.cells, b.cells))


def test_planted_hot_week_rate_ratio():
    gamma = [0.0] * 13
    gamma[COVARIATE_NAMES.index("hot_week")] = -0.121
    spec = SimulationSpec(rows=3, cols=3, n_weeks=52, theta=TIGHT, gamma=tuple(gamma),
                          alpha=math.log(0.002), population=200_000, seed=17,
                          genders=("female",))
    res = simulate(spec)
    col = COVARIATE_NAMES.index("hot_week")
    deaths_hot = pop_hot = deaths_base = pop_base = 0.0
    design = res.design
    for c in res.cells:
        row = design.row_of(c.district_id, (c.iso_year, c.iso_week))
        if design.values[row, col] == 1.0:
            deaths_hot += c.deaths
            pop_hot += c.population
        else:
            deaths_base += c.deaths
            pop_base += c.population
    assert pop_hot > 0
    ratio = (deaths_hot / pop_hot) / (deaths_base / pop_base)
    se = math.exp(-0.121) * math.sqrt(1.0 / deaths_hot + 1.0 / deaths_base)
    assert abs(ratio - math.exp(-0.121)) < 3.5 * se


def test_population_scaling_doubles_totals():
    base = SimulationSpec(rows=2, cols=2, n_weeks=20, theta=TIGHT, gamma=(0.0,) * 13,
                          alpha=math.log(0.001), population=50_000, seed=4,
                          genders=("female",))
    doubled = SimulationSpec(rows=2, cols=2, n_weeks=20, theta=TIGHT, gamma=(0.0,) * 13,
                             alpha=math.log(0.001), population=100_000, seed=5,
                             genders=("female",))
    t1 = sum(c.deaths for c in simulate(base).cells)
    t2 = sum(c.deaths for c in simulate(doubled).cells)
    # independent draws: Var(t2 - 2 t1) = E[t2] + 4 E[t1]
    assert abs(t2 - 2 * t1) < 4 * math.sqrt(float(t2 + 4 * t1))


def test_draws_satisfy_constraints():
    spec = SimulationSpec(rows=3, cols=3, n_weeks=12, seed=6, genders=("female", "male"))
    res = simulate(spec)
    layout = LatentLayout(9, 4, 12)
    per_block = dict(block_constraint_sets(layout, res.structures))
    for gender in ("female", "male"):
        for name, values in res.truth["genders"][gender]["blocks"].items():
            assert per_block[name].residual(np.array(values)) <= 1e-8


def test_gender_draws_differ():
    res = simulate(SimulationSpec(rows=2, cols=2, n_weeks=8, seed=7))
    phi_f = res.truth["genders"]["female"]["blocks"]["phi"]
    phi_m = res.truth["genders"]["male"]["blocks"]["phi"]
    assert phi_f != phi_m


def test_overflow_guard():
    spec = SimulationSpec(rows=2, cols=2, n_weeks=8, alpha=40.0, seed=0,
                          theta=TIGHT, gamma=(0.0,) * 13)
    with pytest.raises(ValidationError, match="smaller effect scales"):
        simulate(spec)


def test_synthetic_design_standardized():
    from climort.geo_graph import lattice_graph
    graph = lattice_graph(3, 3)
    design = synthetic_design(graph, iso_weeks_from(2010, 52), seed=1)
    for name in ("scale_temp_max_mean", "scale_temp_min_mean", "scale_humidity_mean"):
        col = COVARIATE_NAMES.index(name)
        assert abs(float(np.mean(design.values[:, col]))) < 1e-10
        assert float(np.std(design.values[:, col], ddof=1)) == pytest.approx(1.0)
    hot = design.values[:, COVARIATE_NAMES.index("hot_week")]
    assert 0.0 < hot.mean() < 0.2  # summer-only indicator


def test_default_gamma_matches_covariate_order():
    assert len(DEFAULT_GAMMA) == len(COVARIATE_NAMES)
    assert DEFAULT_GAMMA[COVARIATE_NAMES.index("hot_week")] == -0.121
    assert DEFAULT_GAMMA[COVARIATE_NAMES.index("elevation_km")] == -0.113


def test_spec_validation():
    with pytest.raises(ValidationError):
        SimulationSpec(rows=1, cols=1)
    with pytest.raises(ValidationError):
        SimulationSpec(gamma=(0.0,) * 5)
    with pytest.raises(ValidationError):
        SimulationSpec(population=(1, 2, 3))
    with pytest.raises(ValidationError):
        SimulationSpec(genders=("female", "unknown"))
