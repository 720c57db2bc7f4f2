"""Shared builders for graphs, corpora, and small models used across the tests."""

import datetime as dt

import numpy as np
import scipy.sparse as sp

from climort.geo_graph import DistrictGraph
from climort.model import GenderModel, GaussianLikelihood, LatentLayout, PoissonLikelihood, \
    build_structures


def graph_from_edges(n, edges, elevation=None, centroid=None, states=None):
    ids = tuple(f"D{i + 1:02d}" for i in range(n))
    rows = [a for a, b in edges] + [b for a, b in edges]
    cols = [b for a, b in edges] + [a for a, b in edges]
    adj = sp.csr_matrix((np.ones(len(rows), dtype=bool), (rows, cols)), shape=(n, n))
    elevation = np.zeros(n) if elevation is None else np.asarray(elevation, dtype=float)
    if centroid is None:
        centroid = np.column_stack([np.arange(n, dtype=float), np.zeros(n)])
    return DistrictGraph(ids, adj, elevation, centroid,
                         tuple(states) if states is not None else None)


def full_grid_model(graph, n_weeks, likelihood="poisson", sigma=0.5, seed=0,
                    alpha_precision=0.0, rate=0.002, population=20000,
                    structures=None, design_rows=None):
    """GenderModel over the complete (district, age, week) grid with a random design."""
    I, J, T = graph.n_districts, 4, n_weeks
    layout = LatentLayout(I, J, T)
    if structures is None:
        structures = build_structures(graph, J, T)
    rng = np.random.default_rng(seed)
    i_idx, j_idx, t_idx = np.meshgrid(np.arange(I), np.arange(J), np.arange(T), indexing="ij")
    i_idx, j_idx, t_idx = (a.ravel() for a in (i_idx, j_idx, t_idx))
    if design_rows is None:
        design_rows = rng.standard_normal((len(i_idx), layout.n_covariates))
    weeks = [(2010, t + 1) for t in range(T)]
    if likelihood == "gaussian":
        y = np.log(rate) + sigma * rng.standard_normal(len(i_idx))
        lik = GaussianLikelihood(y, sigma)
    else:
        n = np.full(len(i_idx), float(population))
        y = rng.poisson(n * rate)
        lik = PoissonLikelihood(y, n)
    return GenderModel("female", layout, structures, graph.district_ids, weeks,
                       i_idx, j_idx, t_idx, lik, design_rows,
                       alpha_precision=alpha_precision)


def write_fixture_corpus(root):
    """Small deterministic input corpus: 2 stations, 4 districts, 3 full ISO weeks.

    Station S1 sits in district A, S2 in district B; districts C and D
    have no station and take the nearest-neighbour path. A handful of
    values are left missing to exercise imputation.
    """
    root.mkdir(parents=True, exist_ok=True)
    paths = {
        "stations": root / "stations.csv",
        "lookup": root / "lookup.csv",
        "adjacency": root / "edges.tsv",
        "districts": root / "districts.csv",
    }
    with open(paths["districts"], "w") as fh:
        fh.write("district_id,elevation_m,centroid_x_km,centroid_y_km,state_id\n")
        fh.write("A,500,0.0,0.0,West\n")
        fh.write("B,1200,10.0,0.0,West\n")
        fh.write("C,200,0.0,8.0,East\n")
        fh.write("D,2000,10.0,8.0,East\n")
    with open(paths["adjacency"], "w") as fh:
        fh.write("A\tB\nA\tC\nB\tD\nC\tD\n")
    with open(paths["lookup"], "w") as fh:
        fh.write("station_id,district_id\nS1,A\nS2,B\n")
    start = dt.date(2010, 1, 4)  # Monday of ISO week 2010-W01
    lines = ["station_id,date,temp_mean_c,temp_min_c,temp_max_c,humidity_mean_pct,"
             "precip_sum_mm,x_km,y_km"]
    for day in range(21):
        date = start + dt.timedelta(days=day)
        # S1: a cold spell in week 1, a dry mild stretch in week 2
        tmin1 = -7.0 + 0.8 * day
        tmean1 = tmin1 + 4.0
        tmax1 = tmin1 + 9.0
        hum1 = 60.0 + (day % 7)
        precip1 = 0.0 if 7 <= day < 12 else 1.5
        row1 = [f"S1,{date},{tmean1:.1f},{tmin1:.1f},{tmax1:.1f},{hum1:.1f},"
                f"{precip1:.1f},1.0,1.0"]
        # S2: milder, with two missing humidity cells and one missing mean temp
        tmin2 = -2.0 + 0.5 * day
        tmean2 = tmin2 + 3.0
        tmax2 = tmin2 + 8.0
        hum2 = "" if day in (3, 10) else f"{70.0 + (day % 5):.1f}"
        tmean2_s = "" if day == 15 else f"{tmean2:.1f}"
        row2 = [f"S2,{date},{tmean2_s},{tmin2:.1f},{tmax2:.1f},{hum2},0.0,9.0,1.0"]
        lines += row1 + row2
    with open(paths["stations"], "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return paths
