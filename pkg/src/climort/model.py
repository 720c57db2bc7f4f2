"""Per-gender latent Gaussian model: observations, layout, priors, likelihood.

Assembles the log-linear Poisson mortality model with a population
offset, 13 fixed effects, a Leroux spatial effect, first-order random
walks over age groups and weeks, and the three fully structured
interactions (space-age, space-time, age-time), together with the joint
prior precision as a function of the hyperparameters and the full
identifiability constraint set.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.special import gammaln, xlogy

from .covariate_engine import COVARIATE_NAMES, DesignMatrix
from .errors import ValidationError
from .geo_graph import DistrictGraph, PrecisionStructure, build_spatial_structure, leroux_precision
from .gmrf_core import (ConstraintSet, DEFAULT_INTERACTION_CAP, InteractionStructure,
                        build_interaction, build_rw1, sum_to_zero_constraint)

AGE_GROUPS = ("0-64", "65-74", "75-84", "85+")
GENDERS = ("female", "male")

GAMMA_PRECISION = 1e-3      # fixed-effect coefficient prior precision
TAU_PHI_RATE = 0.01         # Gamma(1, rate) prior on the spatial precision
TAU_OTHER_RATE = 5e-5       # Gamma(1, rate) prior on the remaining precisions
EIG_POSITIVE_TOL = 1e-9     # relative eigenvalue cutoff for rank decisions


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MortalityCell:
    """One observation: deaths and population at risk for a district-week-age-gender cell."""

    district_id: str
    iso_year: int
    iso_week: int
    age_group: str
    gender: str
    deaths: int
    population: int

    def __post_init__(self):
        if self.age_group not in AGE_GROUPS:
            raise ValidationError(f"unknown age group {self.age_group!r}")
        if self.gender not in GENDERS:
            raise ValidationError(f"unknown gender {self.gender!r}")
        if self.deaths < 0:
            raise ValidationError("deaths must be non-negative")
        if self.population <= 0:
            raise ValidationError("population must be positive")
        if self.deaths > self.population:
            raise ValidationError(
                f"{self.district_id} {self.iso_year}-W{self.iso_week:02d} {self.age_group} "
                f"{self.gender}: deaths {self.deaths} exceed population {self.population}")


def read_observations_csv(path) -> list[MortalityCell]:
    cells = []
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            fh.seek(0)
        reader = csv.DictReader(fh)
        needed = {"district_id", "iso_year", "iso_week", "age_group", "gender",
                  "deaths", "population"}
        if reader.fieldnames is None or not needed.issubset(reader.fieldnames):
            raise ValidationError(f"{path}: observation CSV needs columns {sorted(needed)}")
        for ln, row in enumerate(reader, start=2):
            try:
                cells.append(MortalityCell(
                    district_id=row["district_id"],
                    iso_year=int(row["iso_year"]), iso_week=int(row["iso_week"]),
                    age_group=row["age_group"], gender=row["gender"],
                    deaths=int(row["deaths"]), population=int(row["population"])))
            except (ValueError, ValidationError) as exc:
                raise ValidationError(f"{path}:{ln}: {exc}") from exc
    if not cells:
        raise ValidationError(f"{path}: no observations")
    return cells


def write_observations_csv(path, cells: list[MortalityCell],
                           header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["district_id", "iso_year", "iso_week", "age_group", "gender",
                         "deaths", "population"])
        for c in cells:
            writer.writerow([c.district_id, c.iso_year, c.iso_week, c.age_group, c.gender,
                             c.deaths, c.population])


# ---------------------------------------------------------------------------
# latent layout and hyperparameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LatentLayout:
    """Block layout of the latent vector.

    Order: intercept, 13 fixed-effect coefficients, spatial effect (I),
    age effect (J), weekly effect (T), then the three interactions
    space-age (I*J, age minor), space-time (I*T, week minor) and
    age-time (T*J, age minor).
    """

    n_districts: int
    n_ages: int
    n_weeks: int

    @property
    def n_covariates(self) -> int:
        return len(COVARIATE_NAMES)

    def blocks(self) -> list[tuple[str, int, int]]:
        I, J, T = self.n_districts, self.n_ages, self.n_weeks
        sizes = [("alpha", 1), ("gamma", self.n_covariates), ("phi", I), ("delta", J),
                 ("psi", T), ("zeta_sa", I * J), ("zeta_st", I * T), ("zeta_at", T * J)]
        out, offset = [], 0
        for name, size in sizes:
            out.append((name, offset, size))
            offset += size
        return out

    @property
    def total_dim(self) -> int:
        name, offset, size = self.blocks()[-1]
        return offset + size

    def offset(self, name: str) -> int:
        for n, off, _ in self.blocks():
            if n == name:
                return off
        raise ValidationError(f"unknown block {name!r}")

    def size(self, name: str) -> int:
        for n, _, size in self.blocks():
            if n == name:
                return size
        raise ValidationError(f"unknown block {name!r}")

    def block_slice(self, name: str) -> slice:
        off = self.offset(name)
        return slice(off, off + self.size(name))


@dataclass(frozen=True)
class HyperParams:
    """Precision parameters per random-effect block plus the spatial mixing weight."""

    tau_phi: float
    lambda_phi: float
    tau_delta: float
    tau_psi: float
    tau_zeta_sa: float
    tau_zeta_st: float
    tau_zeta_at: float

    INTERNAL_NAMES = ("log_tau_phi", "logit_lambda_phi", "log_tau_delta", "log_tau_psi",
                      "log_tau_zeta_sa", "log_tau_zeta_st", "log_tau_zeta_at")

    def __post_init__(self):
        taus = (self.tau_phi, self.tau_delta, self.tau_psi,
                self.tau_zeta_sa, self.tau_zeta_st, self.tau_zeta_at)
        if not all(np.isfinite(t) and t > 0 for t in taus):
            raise ValidationError(f"precisions must be positive and finite: {taus}")
        if not (np.isfinite(self.lambda_phi) and 0.0 <= self.lambda_phi <= 1.0):
            raise ValidationError(f"lambda must lie in [0, 1], got {self.lambda_phi}")

    def taus(self) -> tuple[float, ...]:
        return (self.tau_phi, self.tau_delta, self.tau_psi,
                self.tau_zeta_sa, self.tau_zeta_st, self.tau_zeta_at)

    def to_internal(self) -> np.ndarray:
        lam = min(max(self.lambda_phi, 1e-12), 1 - 1e-12)
        return np.array([
            math.log(self.tau_phi), math.log(lam / (1 - lam)), math.log(self.tau_delta),
            math.log(self.tau_psi), math.log(self.tau_zeta_sa), math.log(self.tau_zeta_st),
            math.log(self.tau_zeta_at),
        ])

    @staticmethod
    def from_internal(vec) -> "HyperParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (7,):
            raise ValidationError("internal hyperparameter vector must have length 7")
        return HyperParams(
            tau_phi=math.exp(vec[0]),
            lambda_phi=1.0 / (1.0 + math.exp(-vec[1])),
            tau_delta=math.exp(vec[2]), tau_psi=math.exp(vec[3]),
            tau_zeta_sa=math.exp(vec[4]), tau_zeta_st=math.exp(vec[5]),
            tau_zeta_at=math.exp(vec[6]))

    @staticmethod
    def default() -> "HyperParams":
        return HyperParams(tau_phi=100.0, lambda_phi=0.5, tau_delta=100.0, tau_psi=100.0,
                           tau_zeta_sa=100.0, tau_zeta_st=100.0, tau_zeta_at=100.0)


def log_prior_hyper(theta: HyperParams,
                    tau_phi_rate: float = TAU_PHI_RATE,
                    tau_other_rate: float = TAU_OTHER_RATE) -> float:
    """Log prior density of the hyperparameters.

    Precisions carry Gamma(1, rate) priors expressed on the
    log-precision scale (density log(rate) - rate*tau + log(tau)); the
    spatial mixing weight carries a uniform Beta(1, 1) prior on its own
    scale, so any two interior values contribute equally.
    """
    if not (0.0 < theta.lambda_phi < 1.0):
        return -math.inf

    def log_gamma1(tau, rate):
        return math.log(rate) - rate * tau + math.log(tau)

    val = log_gamma1(theta.tau_phi, tau_phi_rate)
    for tau in (theta.tau_delta, theta.tau_psi, theta.tau_zeta_sa,
                theta.tau_zeta_st, theta.tau_zeta_at):
        val += log_gamma1(tau, tau_other_rate)
    return val


# ---------------------------------------------------------------------------
# likelihoods
# ---------------------------------------------------------------------------

class PoissonLikelihood:
    """Poisson counts with a log link and a log-population offset."""

    name = "poisson"

    def __init__(self, y: np.ndarray, population: np.ndarray):
        self.y = np.asarray(y, dtype=float)
        self.population = np.asarray(population, dtype=float)
        self.log_n = np.log(self.population)
        self._const = -float(np.sum(gammaln(self.y + 1.0)))

    def mu(self, eta: np.ndarray) -> np.ndarray:
        return np.exp(self.log_n + eta)

    def loglik(self, eta: np.ndarray) -> float:
        mu = self.mu(eta)
        return float(np.sum(self.y * (self.log_n + eta)) - np.sum(mu)) + self._const

    def grad(self, eta: np.ndarray) -> np.ndarray:
        return self.y - self.mu(eta)

    def weights(self, eta: np.ndarray) -> np.ndarray:
        return self.mu(eta)

    def saturated_loglik(self) -> float:
        # fitted mean equal to each observation; 0 * log(0) = 0
        return float(np.sum(xlogy(self.y, self.y)) - np.sum(self.y)) + self._const


class GaussianLikelihood:
    """Known-variance Gaussian observations on the linear-predictor scale.

    Surrogate likelihood for which the Laplace approximation is exact;
    used by the oracle checks and available for synthetic studies.
    """

    name = "gaussian"

    def __init__(self, y: np.ndarray, sigma: float):
        if sigma <= 0:
            raise ValidationError("sigma must be positive")
        self.y = np.asarray(y, dtype=float)
        self.sigma = float(sigma)

    def loglik(self, eta: np.ndarray) -> float:
        r = self.y - eta
        n = len(self.y)
        return float(-0.5 * np.sum(r * r) / self.sigma**2
                     - 0.5 * n * math.log(2.0 * math.pi * self.sigma**2))

    def grad(self, eta: np.ndarray) -> np.ndarray:
        return (self.y - eta) / self.sigma**2

    def weights(self, eta: np.ndarray) -> np.ndarray:
        return np.full(len(self.y), 1.0 / self.sigma**2)

    def saturated_loglik(self) -> float:
        return float(-0.5 * len(self.y) * math.log(2.0 * math.pi * self.sigma**2))


# ---------------------------------------------------------------------------
# structures and prior precision
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelStructures:
    """Structure matrices shared by both gender fits."""

    spatial: PrecisionStructure      # ICAR structure of the district graph
    rw_age: PrecisionStructure
    rw_time: PrecisionStructure
    inter_sa: InteractionStructure   # space (x) age
    inter_st: InteractionStructure   # space (x) time
    inter_at: InteractionStructure   # time (x) age


def build_structures(graph: DistrictGraph, n_ages: int, n_weeks: int,
                     interaction_cap: int = DEFAULT_INTERACTION_CAP,
                     interaction_style: str = "structure",
                     interaction_lambda: float | None = None) -> ModelStructures:
    """Build every structured prior block for the given dimensions.

    By default the interactions are Kronecker products of the raw
    structure matrices (intrinsic CAR and random walks), which is what
    generates the identifiability constraints. `interaction_style =
    "leroux"` instead uses the lambda-mixed spatial precision (at the
    fixed `interaction_lambda`) for the two spatial interactions; those
    margins are then full rank and contribute no null-space constraints.
    """
    spatial = build_spatial_structure(graph)
    rw_age = build_rw1(n_ages)
    rw_time = build_rw1(n_weeks)
    if interaction_style == "structure":
        space_margin = spatial
    elif interaction_style == "leroux":
        if interaction_lambda is None or not 0.0 <= interaction_lambda < 1.0:
            raise ValidationError("leroux interactions need a fixed lambda in [0, 1)")
        space_margin = leroux_precision(spatial, interaction_lambda, 1.0)
    else:
        raise ValidationError(f"unknown interaction style {interaction_style!r}")
    return ModelStructures(
        spatial=spatial, rw_age=rw_age, rw_time=rw_time,
        inter_sa=build_interaction(space_margin, rw_age, max_dim=interaction_cap),
        inter_st=build_interaction(space_margin, rw_time, max_dim=interaction_cap),
        inter_at=build_interaction(rw_time, rw_age, max_dim=interaction_cap))


def _interaction_constraints(inter: InteractionStructure) -> ConstraintSet:
    # null-space rows plus an explicit sum-to-zero row, deduplicated
    dim = inter.precision.dim
    rows = np.vstack([inter.constraints.matrix, np.full((1, dim), 1.0 / np.sqrt(dim))])
    return ConstraintSet.from_rows(rows)


def block_constraint_sets(layout: LatentLayout,
                          structures: ModelStructures) -> list[tuple[str, ConstraintSet]]:
    """Per-block constraint sets: sum-to-zero on the main random effects,
    null-space rows plus sum-to-zero on each interaction."""
    return [
        ("phi", sum_to_zero_constraint(layout.size("phi"))),
        ("delta", sum_to_zero_constraint(layout.size("delta"))),
        ("psi", sum_to_zero_constraint(layout.size("psi"))),
        ("zeta_sa", _interaction_constraints(structures.inter_sa)),
        ("zeta_st", _interaction_constraints(structures.inter_st)),
        ("zeta_at", _interaction_constraints(structures.inter_at)),
    ]


def build_constraints(layout: LatentLayout, structures: ModelStructures) -> ConstraintSet:
    """Full constraint set of the latent vector, deduplicated to independent rows."""
    blocks = [(layout.offset(name), cs) for name, cs in block_constraint_sets(layout, structures)]
    return ConstraintSet.block_stack(blocks, layout.total_dim)


def joint_prior_precision(layout: LatentLayout, theta: HyperParams,
                          structures: ModelStructures,
                          alpha_precision: float = 0.0,
                          gamma_precision: float = GAMMA_PRECISION) -> sp.csr_matrix:
    """Block-diagonal joint prior precision of the latent vector.

    The intercept block carries `alpha_precision` (0 by default: an
    improper flat prior made identifiable by the sum-to-zero
    constraints); coefficient blocks carry `gamma_precision`; random
    effect blocks are their structure matrices scaled by the precisions
    in `theta`, with the spatial block mixed by lambda.
    """
    I = layout.n_districts
    blocks = [
        sp.csr_matrix(np.array([[alpha_precision]])),
        gamma_precision * sp.identity(layout.n_covariates, format="csr"),
        theta.tau_phi * (theta.lambda_phi * structures.spatial.matrix
                         + (1.0 - theta.lambda_phi) * sp.identity(I, format="csr")),
        theta.tau_delta * structures.rw_age.matrix,
        theta.tau_psi * structures.rw_time.matrix,
        theta.tau_zeta_sa * structures.inter_sa.precision.matrix,
        theta.tau_zeta_st * structures.inter_st.precision.matrix,
        theta.tau_zeta_at * structures.inter_at.precision.matrix,
    ]
    return sp.block_diag(blocks, format="csr")


# ---------------------------------------------------------------------------
# incidence map
# ---------------------------------------------------------------------------

def build_linear_predictor_map(i_idx: np.ndarray, j_idx: np.ndarray, t_idx: np.ndarray,
                               layout: LatentLayout, design_rows: np.ndarray) -> sp.csr_matrix:
    """Sparse map from the latent vector to the per-cell linear predictor.

    Each observation row links the intercept, the 13 covariate values of
    its (district, week), and its six random-effect coordinates: exactly
    20 structural entries per row (zero covariate values are kept as
    explicit entries).
    """
    n_obs = len(i_idx)
    p = layout.n_covariates
    if design_rows.shape != (n_obs, p):
        raise ValidationError("design rows do not match the observation count")
    J, T = layout.n_ages, layout.n_weeks
    links = 1 + p + 6
    rows = np.repeat(np.arange(n_obs), links)
    cols = np.empty((n_obs, links), dtype=np.int64)
    data = np.empty((n_obs, links))
    cols[:, 0] = layout.offset("alpha")
    data[:, 0] = 1.0
    cols[:, 1:1 + p] = layout.offset("gamma") + np.arange(p)
    data[:, 1:1 + p] = design_rows
    cols[:, 1 + p] = layout.offset("phi") + i_idx
    cols[:, 2 + p] = layout.offset("delta") + j_idx
    cols[:, 3 + p] = layout.offset("psi") + t_idx
    cols[:, 4 + p] = layout.offset("zeta_sa") + i_idx * J + j_idx
    cols[:, 5 + p] = layout.offset("zeta_st") + i_idx * T + t_idx
    cols[:, 6 + p] = layout.offset("zeta_at") + t_idx * J + j_idx
    data[:, 1 + p:] = 1.0
    M = sp.csr_matrix((data.ravel(), (rows, cols.ravel())), shape=(n_obs, layout.total_dim))
    return M


# ---------------------------------------------------------------------------
# assembled per-gender model
# ---------------------------------------------------------------------------

def _positive_eig_data(matrix: sp.spmatrix) -> tuple[float, int]:
    eig = sla.eigvalsh(matrix.toarray())
    cutoff = EIG_POSITIVE_TOL * max(float(eig[-1]), 1.0)
    positive = eig[eig > cutoff]
    return float(np.sum(np.log(positive))), int(len(positive))


class GenderModel:
    """One gender's assembled model: data, incidence map, priors, constraints.

    Immutable after construction; the two genders produce structurally
    identical layouts and are fitted independently.
    """

    def __init__(self, gender: str, layout: LatentLayout, structures: ModelStructures,
                 district_ids, weeks, i_idx, j_idx, t_idx, likelihood,
                 design_rows: np.ndarray,
                 alpha_precision: float = 0.0, gamma_precision: float = GAMMA_PRECISION):
        self.gender = gender
        self.layout = layout
        self.structures = structures
        self.district_ids = tuple(district_ids)
        self.weeks = tuple(weeks)
        self.i_idx = np.asarray(i_idx)
        self.j_idx = np.asarray(j_idx)
        self.t_idx = np.asarray(t_idx)
        self.likelihood = likelihood
        self.alpha_precision = float(alpha_precision)
        self.gamma_precision = float(gamma_precision)
        self.M = build_linear_predictor_map(self.i_idx, self.j_idx, self.t_idx,
                                            layout, design_rows)
        self.Mt = self.M.T.tocsr()
        self._basis = None
        self._gram = None
        self._reduced_grams = None
        per_block = block_constraint_sets(layout, structures)
        self.constraints = ConstraintSet.block_stack(
            [(layout.offset(name), cs) for name, cs in per_block], layout.total_dim)
        # eigen data for the constrained prior log-determinant, computed once:
        # every block is a fixed structure scaled by one precision, and the
        # constraints are block-local, so the determinant factorizes.
        I = layout.n_districts
        B_phi = sla.null_space(np.full((1, I), 1.0 / np.sqrt(I)))
        self._phi_subspace_eigs = sla.eigvalsh(
            B_phi.T @ (structures.spatial.matrix.toarray() @ B_phi))
        self._eig_age = _positive_eig_data(structures.rw_age.matrix)
        self._eig_time = _positive_eig_data(structures.rw_time.matrix)
        constraint_of = dict(per_block)
        self._eig_inter = {}
        for name, inter in (("zeta_sa", structures.inter_sa),
                            ("zeta_st", structures.inter_st),
                            ("zeta_at", structures.inter_at)):
            cs = constraint_of[name]
            if cs.n_constraints == inter.precision.rank_deficiency:
                # constraints span exactly the null space: the constrained
                # eigenvalues are the positive products of margin eigenvalues
                sl_l, np_l = _positive_eig_data(inter.left.matrix)
                sl_r, np_r = _positive_eig_data(inter.right.matrix)
                self._eig_inter[name] = (np_r * sl_l + np_l * sl_r, np_l * np_r)
            else:
                B = sla.null_space(cs.matrix)
                self._eig_inter[name] = _positive_eig_data(
                    sp.csr_matrix(B.T @ (inter.precision.matrix @ B)))

    @property
    def n_obs(self) -> int:
        return self.M.shape[0]

    def constraint_basis(self) -> np.ndarray:
        """Orthonormal basis of the constraint surface, computed once on demand."""
        if self._basis is None:
            self._basis = sla.null_space(self.constraints.matrix)
        return self._basis

    def constraint_gram(self) -> sp.csr_matrix:
        """Sparse A^T A of the constraint rows, for range-space augmentation."""
        if self._gram is None:
            A = sp.csr_matrix(self.constraints.matrix)
            self._gram = A.T @ A
        return self._gram

    def reduced_prior_precision(self, theta: HyperParams) -> np.ndarray:
        """B^T Q_prior(theta) B on the constraint surface.

        The prior is block diagonal with one precision scale per block,
        so the reduced matrix is a fixed Gram matrix per block scaled by
        theta; the Grams are computed once and reused across evaluations.
        """
        if self._reduced_grams is None:
            B = self.constraint_basis()
            lay = self.layout
            st = self.structures

            def gram(name, matrix=None):
                rows = B[lay.block_slice(name), :]
                return rows.T @ (matrix @ rows) if matrix is not None else rows.T @ rows

            self._reduced_grams = {
                "alpha": gram("alpha"),
                "gamma": gram("gamma"),
                "phi_struct": gram("phi", st.spatial.matrix),
                "phi_ident": gram("phi"),
                "delta": gram("delta", st.rw_age.matrix),
                "psi": gram("psi", st.rw_time.matrix),
                "zeta_sa": gram("zeta_sa", st.inter_sa.precision.matrix),
                "zeta_st": gram("zeta_st", st.inter_st.precision.matrix),
                "zeta_at": gram("zeta_at", st.inter_at.precision.matrix),
            }
        g = self._reduced_grams
        K = theta.tau_phi * (theta.lambda_phi * g["phi_struct"]
                             + (1.0 - theta.lambda_phi) * g["phi_ident"])
        K += theta.tau_delta * g["delta"]
        K += theta.tau_psi * g["psi"]
        K += theta.tau_zeta_sa * g["zeta_sa"]
        K += theta.tau_zeta_st * g["zeta_st"]
        K += theta.tau_zeta_at * g["zeta_at"]
        K += self.gamma_precision * g["gamma"]
        if self.alpha_precision > 0:
            K += self.alpha_precision * g["alpha"]
        return K

    def linear_predictor(self, x: np.ndarray) -> np.ndarray:
        return self.M @ x

    def joint_prior_precision(self, theta: HyperParams) -> sp.csr_matrix:
        return joint_prior_precision(self.layout, theta, self.structures,
                                     self.alpha_precision, self.gamma_precision)

    def log_prior_hyper(self, theta: HyperParams) -> float:
        return log_prior_hyper(theta)

    def prior_quad(self, theta: HyperParams, x: np.ndarray) -> float:
        Q = self.joint_prior_precision(theta)
        return float(x @ (Q @ x))

    def prior_constrained_logdet(self, theta: HyperParams) -> tuple[float, int]:
        """Generalized log-determinant of the prior precision on the constraint surface.

        Computed in closed form from per-block eigenvalues: the
        constraints are block-local, so the determinant factorizes over
        blocks, and each block is a fixed structure scaled by its
        precision. Flat (improper) directions are skipped and counted.
        """
        layout = self.layout
        val, flats = 0.0, 0
        if self.alpha_precision > 0:
            val += math.log(self.alpha_precision)
        else:
            flats += 1
        val += layout.n_covariates * math.log(self.gamma_precision)
        mixed = theta.lambda_phi * self._phi_subspace_eigs + (1.0 - theta.lambda_phi)
        pos = mixed > EIG_POSITIVE_TOL
        flats += int(np.sum(~pos))
        val += float(np.sum(np.log(theta.tau_phi * mixed[pos])))
        for tau, (sum_log, n_pos), dim_c in (
                (theta.tau_delta, self._eig_age, layout.n_ages - 1),
                (theta.tau_psi, self._eig_time, layout.n_weeks - 1)):
            val += n_pos * math.log(tau) + sum_log
            flats += dim_c - n_pos
        for name, tau in (("zeta_sa", theta.tau_zeta_sa), ("zeta_st", theta.tau_zeta_st),
                          ("zeta_at", theta.tau_zeta_at)):
            sum_log, n_pos = self._eig_inter[name]
            val += n_pos * math.log(tau) + sum_log
        return val, flats


def assemble_gender_model(cells: list[MortalityCell], graph: DistrictGraph,
                          design: DesignMatrix, gender: str,
                          structures: ModelStructures | None = None,
                          likelihood=None,
                          alpha_precision: float = 0.0,
                          gamma_precision: float = GAMMA_PRECISION,
                          interaction_cap: int = DEFAULT_INTERACTION_CAP,
                          interaction_style: str = "structure",
                          interaction_lambda: float | None = None) -> GenderModel:
    """Assemble the latent Gaussian model for one gender.

    Every cell must reference a district of the graph and a week covered
    by the design matrix; the error names the offending pair. Pass a
    prebuilt `structures` to share matrices between the two genders, and
    a likelihood object to replace the default Poisson observation model.
    """
    if gender not in GENDERS:
        raise ValidationError(f"unknown gender {gender!r}")
    mine = [c for c in cells if c.gender == gender]
    if not mine:
        raise ValidationError(f"no observations for gender {gender!r}")
    weeks = design.weeks
    week_index = {w: t for t, w in enumerate(weeks)}
    age_index = {a: j for j, a in enumerate(AGE_GROUPS)}
    layout = LatentLayout(graph.n_districts, len(AGE_GROUPS), len(weeks))
    if structures is None:
        structures = build_structures(graph, layout.n_ages, layout.n_weeks,
                                      interaction_cap, interaction_style, interaction_lambda)
    i_idx = np.empty(len(mine), dtype=np.int64)
    j_idx = np.empty(len(mine), dtype=np.int64)
    t_idx = np.empty(len(mine), dtype=np.int64)
    design_rows = np.empty((len(mine), layout.n_covariates))
    y = np.empty(len(mine))
    n = np.empty(len(mine))
    for c_i, cell in enumerate(mine):
        if cell.district_id not in graph.index:
            raise ValidationError(f"cell references unknown district {cell.district_id!r}")
        wk = (cell.iso_year, cell.iso_week)
        if wk not in week_index:
            raise ValidationError(
                f"no design row for district {cell.district_id!r}, week {wk}")
        i_idx[c_i] = graph.index[cell.district_id]
        j_idx[c_i] = age_index[cell.age_group]
        t_idx[c_i] = week_index[wk]
        design_rows[c_i] = design.values[design.row_of(cell.district_id, wk)]
        y[c_i] = cell.deaths
        n[c_i] = cell.population
    if likelihood is None:
        likelihood = PoissonLikelihood(y, n)
    return GenderModel(gender, layout, structures, graph.district_ids, weeks,
                       i_idx, j_idx, t_idx, likelihood, design_rows,
                       alpha_precision, gamma_precision)
