"""District map as an undirected graph, and the spatial structure matrix it induces.

The graph fixes the district ordering used by every downstream matrix.
Adjacency comes from an explicit edge-list file (polygon-derived lists are
produced offline); per-district attributes (elevation, planar centroid)
come from a companion CSV.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import ValidationError

RANK_EIGTOL = 1e-9  # singular values below RANK_EIGTOL * largest count as zero


@dataclass(frozen=True)
class DistrictGraph:
    """Undirected district graph with elevations and planar centroids.

    Attributes
    ----------
    district_ids : tuple of str
        Opaque identifiers; their order is fixed at load time and shared
        by every matrix built downstream.
    adjacency : scipy.sparse.csr_matrix
        Symmetric, irreflexive boolean adjacency, shape (n, n).
    elevation_m : numpy.ndarray
        Per-district elevation in metres.
    centroid_km : numpy.ndarray
        Per-district planar coordinates in kilometres, shape (n, 2).
    state_ids : tuple of str, or None
        Optional federal-state membership, required only for state-level
        weather fusion.
    """

    district_ids: tuple[str, ...]
    adjacency: sp.csr_matrix
    elevation_m: np.ndarray
    centroid_km: np.ndarray
    state_ids: tuple[str, ...] | None = None
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.district_ids)
        if n == 0:
            raise ValidationError("district graph is empty")
        if len(set(self.district_ids)) != n:
            raise ValidationError("duplicate district ids")
        if self.adjacency.shape != (n, n):
            raise ValidationError("adjacency shape does not match district count")
        if (self.adjacency != self.adjacency.T).nnz != 0:
            raise ValidationError("adjacency is not symmetric")
        if self.adjacency.diagonal().any():
            raise ValidationError("adjacency has self-loops")
        if self.elevation_m.shape != (n,) or not np.all(np.isfinite(self.elevation_m)):
            raise ValidationError("every district needs a finite elevation")
        if self.centroid_km.shape != (n, 2) or not np.all(np.isfinite(self.centroid_km)):
            raise ValidationError("every district needs a finite planar centroid")
        if self.state_ids is not None and len(self.state_ids) != n:
            raise ValidationError("state_ids length does not match district count")
        object.__setattr__(self, "index", {d: i for i, d in enumerate(self.district_ids)})

    @property
    def n_districts(self) -> int:
        return len(self.district_ids)

    def neighbors(self, i: int) -> np.ndarray:
        return self.adjacency.indices[self.adjacency.indptr[i]:self.adjacency.indptr[i + 1]]

    def n_components(self) -> int:
        return connected_components(self.adjacency, directed=False)[0]


@dataclass(frozen=True)
class PrecisionStructure:
    """Sparse symmetric positive semi-definite matrix with known rank deficiency.

    `null_basis` holds an orthonormal basis of the null space as columns
    (shape dim x rank_deficiency); the matrix annihilates each column to
    within 1e-10 per entry.
    """

    dim: int
    matrix: sp.csr_matrix
    rank_deficiency: int
    null_basis: np.ndarray

    def __post_init__(self):
        if self.matrix.shape != (self.dim, self.dim):
            raise ValidationError("structure matrix shape mismatch")
        if self.null_basis.shape != (self.dim, self.rank_deficiency):
            raise ValidationError("null basis shape mismatch")

    def quadratic_form(self, x: np.ndarray) -> float:
        return float(x @ (self.matrix @ x))


def _read_district_attributes(path):
    ids, elev, cx, cy, states = [], [], [], [], []
    with open(path, newline="") as fh:
        if not fh.readline().startswith("#"):
            fh.seek(0)
        reader = csv.DictReader(fh)
        required = {"district_id", "elevation_m", "centroid_x_km", "centroid_y_km"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValidationError(
                f"{path}: district attribute CSV needs columns {sorted(required)}"
            )
        has_state = "state_id" in reader.fieldnames
        for ln, row in enumerate(reader, start=2):
            try:
                ids.append(row["district_id"])
                elev.append(float(row["elevation_m"]))
                cx.append(float(row["centroid_x_km"]))
                cy.append(float(row["centroid_y_km"]))
            except (ValueError, TypeError) as exc:
                raise ValidationError(f"{path}:{ln}: bad district attribute row: {exc}") from exc
            if has_state:
                states.append(row["state_id"])
    return ids, np.array(elev), np.column_stack([cx, cy]) if ids else np.empty((0, 2)), (
        tuple(states) if states else None
    )


def load_district_graph(edges_path, attributes_path) -> DistrictGraph:
    """Load a district graph from an edge-list file and an attribute CSV.

    The edge list has one undirected edge per line, two district ids
    separated by a tab. The attribute CSV is
    ``district_id,elevation_m,centroid_x_km,centroid_y_km`` with an
    optional trailing ``state_id`` column.
    """
    ids, elev, cent, states = _read_district_attributes(attributes_path)
    if not ids:
        raise ValidationError(f"{attributes_path}: no districts")
    index = {d: i for i, d in enumerate(ids)}
    rows, cols = [], []
    with open(edges_path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValidationError(f"{edges_path}:{ln}: expected 'a<TAB>b', got {line!r}")
            a, b = parts
            if a not in index or b not in index:
                raise ValidationError(f"{edges_path}:{ln}: unknown district in edge {a!r}-{b!r}")
            if a == b:
                raise ValidationError(f"{edges_path}:{ln}: self-loop on {a!r}")
            rows += [index[a], index[b]]
            cols += [index[b], index[a]]
    n = len(ids)
    adj = sp.csr_matrix((np.ones(len(rows), dtype=bool), (rows, cols)), shape=(n, n))
    adj.data[:] = True  # collapse duplicate edges
    return DistrictGraph(tuple(ids), adj, elev, cent, states)


def lattice_graph(rows: int, cols: int, spacing_km: float = 30.0) -> DistrictGraph:
    """Rook-adjacency lattice used for synthetic studies.

    Elevation rises linearly along the lattice diagonal (0 to 2000 m) so
    synthetic elevation effects have spread; centroids sit on a regular
    grid with the given spacing.
    """
    if rows < 1 or cols < 1:
        raise ValidationError("lattice needs positive dimensions")
    n = rows * cols
    ids = tuple(f"D{r * cols + c + 1:03d}" for r in range(rows) for c in range(cols))
    ij = []
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            if c + 1 < cols:
                ij.append((k, k + 1))
            if r + 1 < rows:
                ij.append((k, k + cols))
    rr = [a for a, b in ij] + [b for a, b in ij]
    cc = [b for a, b in ij] + [a for a, b in ij]
    adj = sp.csr_matrix((np.ones(len(rr), dtype=bool), (rr, cc)), shape=(n, n))
    grid = np.array([(r, c) for r in range(rows) for c in range(cols)], dtype=float)
    denom = max(rows + cols - 2, 1)
    elev = 2000.0 * (grid[:, 0] + grid[:, 1]) / denom
    cent = grid[:, ::-1] * spacing_km
    return DistrictGraph(ids, adj, elev, cent)


def build_spatial_structure(graph: DistrictGraph) -> PrecisionStructure:
    """Build the intrinsic CAR structure matrix of the district graph.

    Diagonal entries are neighbour counts, off-diagonal entries are -1
    for neighbouring pairs. Rank deficiency equals the number of
    connected components (graph-theoretic, cross-checked numerically in
    the test suite); the null basis holds the normalized indicator vector
    of each component.
    """
    if graph.n_districts == 0:
        raise ValidationError("empty graph")
    adj = graph.adjacency.astype(float)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    structure = (sp.diags(deg) - adj).tocsr()
    n_comp, labels = connected_components(graph.adjacency, directed=False)
    null = np.zeros((graph.n_districts, n_comp))
    for comp in range(n_comp):
        members = labels == comp
        null[members, comp] = 1.0 / np.sqrt(members.sum())
    return PrecisionStructure(graph.n_districts, structure, n_comp, null)


def leroux_precision(structure: PrecisionStructure, lam: float, tau: float) -> PrecisionStructure:
    """Mix the spatial structure matrix with the identity, Leroux-style.

    Returns ``tau * (lam * R + (1 - lam) * I)``: strictly positive
    definite for ``lam < 1``; at ``lam = 1`` it degenerates to the
    intrinsic CAR precision and keeps its rank deficiency.
    """
    if not np.isfinite(lam) or not 0.0 <= lam <= 1.0:
        raise ValidationError(f"spatial mixing parameter must be in [0, 1], got {lam}")
    if not np.isfinite(tau) or tau <= 0.0:
        raise ValidationError(f"precision scale must be positive, got {tau}")
    n = structure.dim
    mat = (tau * (lam * structure.matrix + (1.0 - lam) * sp.identity(n, format="csr"))).tocsr()
    if lam == 1.0:
        return PrecisionStructure(n, mat, structure.rank_deficiency, structure.null_basis)
    return PrecisionStructure(n, mat, 0, np.zeros((n, 0)))
