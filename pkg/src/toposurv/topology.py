"""Cubical persistent homology on 2D/3D grids and diagram distances.

Vertex-based construction: grid points are vertices, a cell's filtration
value is the max over its vertices (lower star), so the complex on an
extent-(n1..nk) grid has prod(2*ni - 1) cells.  Reduction is standard
Z/2 boundary-matrix reduction with the clearing optimization.  Diagram
points keep their critical vertex indices so the topology penalty can
push gradients back onto grid values.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment


class NonSquareDim(ValueError):
    pass


@dataclass(frozen=True)
class DiagramPoint:
    birth: float
    death: float  # inf for essential classes
    dim: int
    birth_vertex: int  # flat index into the source grid
    death_vertex: int | None  # None for essential classes


@dataclass
class PersistenceDiagram:
    """Multiset of (birth, death, dim) points; zero-persistence pairs dropped."""

    points: list[DiagramPoint] = field(default_factory=list)

    def in_dim(self, q: int) -> list[DiagramPoint]:
        return [p for p in self.points if p.dim == q]

    def finite_in_dim(self, q: int) -> list[DiagramPoint]:
        return [p for p in self.points if p.dim == q and np.isfinite(p.death)]

    def __len__(self):
        return len(self.points)


@dataclass
class CubicalFiltration:
    grid: np.ndarray
    mode: str = "sublevel"  # superlevel runs as sublevel on negated values

    def working_values(self) -> np.ndarray:
        vals = np.asarray(self.grid, dtype=np.float64)
        if vals.ndim not in (2, 3):
            raise ValueError(f"grid must be 2D or 3D, got {vals.ndim}D")
        if not np.all(np.isfinite(vals)):
            raise ValueError("filtration values must be finite")
        if self.mode == "sublevel":
            return vals
        if self.mode == "superlevel":
            return -vals
        raise ValueError(f"unknown filtration mode {self.mode!r}")


@dataclass
class TopoWeights:
    """Per-homology-dimension weights and the overall penalty weight."""

    alpha: tuple[float, float, float] = (1.0, 1.0, 1.0)
    tau: float = 0.1

    def __post_init__(self):
        if any(a < 0 for a in self.alpha) or self.tau < 0:
            raise ValueError("weights must be nonnegative")


def _cell_values(grid: np.ndarray) -> np.ndarray:
    """Max over vertices for every cell of the doubled (2n-1) grid."""
    a = grid
    for axis in range(grid.ndim):
        n = a.shape[axis]
        shape = list(a.shape)
        shape[axis] = 2 * n - 1
        out = np.empty(shape, dtype=np.float64)
        even = [slice(None)] * a.ndim
        even[axis] = slice(0, None, 2)
        out[tuple(even)] = a
        if n > 1:
            odd = [slice(None)] * a.ndim
            odd[axis] = slice(1, None, 2)
            lo = [slice(None)] * a.ndim
            lo[axis] = slice(0, n - 1)
            hi = [slice(None)] * a.ndim
            hi[axis] = slice(1, n)
            out[tuple(odd)] = np.maximum(a[tuple(lo)], a[tuple(hi)])
        a = out
    return a


def _critical_vertex(cell_coords, grid: np.ndarray) -> int:
    """Argmax vertex of a cell; first vertex in lexicographic order on ties."""
    options = []
    for c in cell_coords:
        options.append((c // 2, c // 2 + 1) if c % 2 else (c // 2,))
    best = None
    best_val = -np.inf
    for vtx in itertools.product(*options):
        val = grid[vtx]
        if val > best_val:
            best_val = val
            best = vtx
    return int(np.ravel_multi_index(best, grid.shape))


def _twist_reduce(order, rank, coords, dims_flat, strides):
    """Clearing-optimized column reduction; returns pairs and essential births.

    Indices in the result are filtration-order positions.
    """
    pairs = []
    essentials = []
    reduced: dict[int, set] = {}
    pivot_owner: dict[int, int] = {}
    cleared = np.zeros(order.size, dtype=bool)
    order_dims = dims_flat[order]
    ndim = coords.shape[1]
    for d in range(int(dims_flat.max()), -1, -1):
        for j in np.flatnonzero(order_dims == d):
            if cleared[j]:
                continue
            if d == 0:
                essentials.append(int(j))
                continue
            f = order[j]
            col = set()
            for axis in range(ndim):
                if coords[f, axis] % 2:
                    col.add(int(rank[f - strides[axis]]))
                    col.add(int(rank[f + strides[axis]]))
            while col:
                piv = max(col)
                owner = pivot_owner.get(piv)
                if owner is None:
                    break
                col ^= reduced[owner]
            if col:
                piv = max(col)
                pivot_owner[piv] = int(j)
                reduced[int(j)] = col
                pairs.append((piv, int(j)))
                cleared[piv] = True
            else:
                essentials.append(int(j))
    return pairs, essentials


def compute_persistence(filtration: CubicalFiltration) -> PersistenceDiagram:
    """Persistence diagram of a lower-star cubical filtration."""
    grid = filtration.working_values()
    cell_vals = _cell_values(grid)
    shape = cell_vals.shape
    flat_vals = cell_vals.ravel()
    n = flat_vals.size
    coords = np.stack(np.unravel_index(np.arange(n), shape), axis=1)
    dims_flat = (coords % 2).sum(axis=1).astype(np.int8)
    strides = np.array([int(np.prod(shape[a + 1:])) for a in range(len(shape))],
                       dtype=np.int64)
    # faces sort strictly before cofaces: value is <= and dimension is lower
    order = np.lexsort((np.arange(n), dims_flat, flat_vals))
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)

    pairs, essentials = _twist_reduce(order, rank, coords, dims_flat, strides)

    points = []
    for bi, di in pairs:
        fb, fd = order[bi], order[di]
        birth, death = flat_vals[fb], flat_vals[fd]
        if death <= birth:
            continue  # zero-persistence pairs carry no signal
        points.append(DiagramPoint(
            float(birth), float(death), int(dims_flat[fb]),
            _critical_vertex(coords[fb], grid),
            _critical_vertex(coords[fd], grid)))
    for bi in essentials:
        fb = order[bi]
        points.append(DiagramPoint(
            float(flat_vals[fb]), np.inf, int(dims_flat[fb]),
            _critical_vertex(coords[fb], grid), None))
    points.sort(key=lambda p: (p.dim, p.birth, p.death))
    return PersistenceDiagram(points)


def betti_numbers(mask: np.ndarray) -> tuple[int, ...]:
    """Betti numbers of a binary voxel set under the vertex-based complex.

    Runs sublevel persistence on the 0-inside / 1-outside indicator and
    counts classes alive at filtration value 0.
    """
    mask = np.asarray(mask, dtype=bool)
    indicator = np.where(mask, 0.0, 1.0)
    diagram = compute_persistence(CubicalFiltration(indicator, "sublevel"))
    betti = [0] * mask.ndim
    for p in diagram.points:
        if p.birth == 0.0 and p.death > 0.0 and p.dim < mask.ndim:
            betti[p.dim] += 1
    return tuple(betti)


# ---------------------------------------------------------------------------
# Diagram distances (Hungarian assignment on the diagonal-augmented matrix)
# ---------------------------------------------------------------------------

def _diagonal_cost_sq(points: np.ndarray) -> np.ndarray:
    # squared distance of (b, d) to its diagonal projection ((b+d)/2, (b+d)/2)
    return (points[:, 1] - points[:, 0]) ** 2 / 2.0


def _match_points(pa: list, pb: list):
    """Optimal partial matching of two finite-point lists with diagonal slots.

    Returns (matched (i,j) pairs, unmatched-a indices, unmatched-b indices,
    total squared cost).
    """
    n, m = len(pa), len(pb)
    if n == 0 and m == 0:
        return [], [], [], 0.0
    a = np.asarray(pa, dtype=np.float64).reshape(n, 2)
    b = np.asarray(pb, dtype=np.float64).reshape(m, 2)
    cost = np.zeros((n + m, n + m), dtype=np.float64)
    if n and m:
        diff = a[:, None, :] - b[None, :, :]
        cost[:n, :m] = (diff ** 2).sum(axis=-1)
    diag_a = _diagonal_cost_sq(a) if n else np.zeros(0)
    diag_b = _diagonal_cost_sq(b) if m else np.zeros(0)
    # off cells never beat a feasible all-diagonal assignment
    off = cost[:n, :m].sum() + diag_a.sum() + diag_b.sum() + 1.0
    if n:
        cost[:n, m:] = off
        np.fill_diagonal(cost[:n, m:], diag_a)
    if m:
        cost[n:, :m] = off
        np.fill_diagonal(cost[n:, :m], diag_b)
    rows, cols = linear_sum_assignment(cost)
    total = float(cost[rows, cols].sum())
    matched, unmatched_a, unmatched_b = [], [], []
    for r, c in zip(rows, cols):
        if r < n and c < m:
            matched.append((int(r), int(c)))
        elif r < n:
            unmatched_a.append(int(r))
        elif c < m:
            unmatched_b.append(int(c))
    return matched, unmatched_a, unmatched_b, total


def _finite_pairs(diagram: PersistenceDiagram, q: int) -> list:
    return [(p.birth, p.death) for p in diagram.finite_in_dim(q)]


def wasserstein2(a: PersistenceDiagram, b: PersistenceDiagram, q: int) -> float:
    """Exact Wasserstein-2 distance between the dimension-q finite points."""
    _, _, _, total = _match_points(_finite_pairs(a, q), _finite_pairs(b, q))
    return float(np.sqrt(total))


def matched_persistence_mse(pred: PersistenceDiagram, true: PersistenceDiagram,
                            q: int) -> float:
    """Squared persistence gaps under the optimal birth-death matching.

    Unmatched points contribute their persistence squared.
    """
    pa = _finite_pairs(pred, q)
    pb = _finite_pairs(true, q)
    matched, ua, ub, _ = _match_points(pa, pb)
    total = 0.0
    for i, j in matched:
        total += ((pa[i][1] - pa[i][0]) - (pb[j][1] - pb[j][0])) ** 2
    for i in ua:
        total += (pa[i][1] - pa[i][0]) ** 2
    for j in ub:
        total += (pb[j][1] - pb[j][0]) ** 2
    return float(total)


# ---------------------------------------------------------------------------
# Topology penalty with grid-value gradients
# ---------------------------------------------------------------------------

def _dim_distance_with_grad(latent_pts: list[DiagramPoint],
                            target_pts: list[DiagramPoint],
                            distance: str):
    """Distance in one homology dimension plus d(dist)/d(birth,death) per
    latent point, holding the optimal matching fixed."""
    pl = [(p.birth, p.death) for p in latent_pts]
    pt = [(p.birth, p.death) for p in target_pts]
    matched, ul, _, total_sq = _match_points(pl, pt)
    grads = np.zeros((len(pl), 2), dtype=np.float64)
    if distance == "wasserstein2_sq":
        value = total_sq
        for i, j in matched:
            grads[i, 0] = 2.0 * (pl[i][0] - pt[j][0])
            grads[i, 1] = 2.0 * (pl[i][1] - pt[j][1])
        for i in ul:
            pers = pl[i][1] - pl[i][0]
            grads[i, 0] = -pers
            grads[i, 1] = pers
    elif distance == "matched_mse":
        value = 0.0
        for i, j in matched:
            gap = (pl[i][1] - pl[i][0]) - (pt[j][1] - pt[j][0])
            value += gap ** 2
            grads[i, 0] = -2.0 * gap
            grads[i, 1] = 2.0 * gap
        for i in ul:
            pers = pl[i][1] - pl[i][0]
            value += pers ** 2
            grads[i, 0] = -2.0 * pers
            grads[i, 1] = 2.0 * pers
        # unmatched target points add a constant with no latent gradient
        matched_t = {j for _, j in matched}
        for j in range(len(pt)):
            if j not in matched_t:
                value += (pt[j][1] - pt[j][0]) ** 2
    else:
        raise ValueError(f"unknown diagram distance {distance!r}")
    return value, grads


def topo_loss(target_diagram: PersistenceDiagram,
              latent_diagram: PersistenceDiagram,
              weights: TopoWeights,
              grid_shape: tuple[int, ...],
              distance: str = "wasserstein2_sq"):
    """Weighted per-dimension diagram distance and its grid-value gradient.

    The gradient holds the optimal matching fixed and differentiates the
    birth/death coordinates through their critical vertices.  Returns
    (value, gradient array shaped like the latent grid).
    """
    grad = np.zeros(grid_shape, dtype=np.float64).ravel()
    value = 0.0
    for q, alpha in enumerate(weights.alpha):
        if alpha == 0.0:
            continue
        latent_pts = latent_diagram.finite_in_dim(q)
        target_pts = target_diagram.finite_in_dim(q)
        if not latent_pts and not target_pts:
            continue
        dist, point_grads = _dim_distance_with_grad(latent_pts, target_pts, distance)
        value += alpha * dist
        for p, (gb, gd) in zip(latent_pts, point_grads):
            grad[p.birth_vertex] += alpha * gb
            if p.death_vertex is not None:
                grad[p.death_vertex] += alpha * gd
    return float(value), grad.reshape(grid_shape)


# ---------------------------------------------------------------------------
# Latent grid filtration
# ---------------------------------------------------------------------------

def latent_grid(z: np.ndarray) -> np.ndarray:
    """Min-max normalized row-major square grid view of an embedding."""
    z = np.asarray(z, dtype=np.float64)
    side = int(round(np.sqrt(z.size)))
    if side * side != z.size:
        raise NonSquareDim(f"embedding length {z.size} is not a perfect square")
    lo, hi = z.min(), z.max()
    if hi > lo:
        g = (z - lo) / (hi - lo)
    else:
        g = np.zeros_like(z)
    return g.reshape(side, side)


def latent_grid_diagram(z: np.ndarray) -> PersistenceDiagram:
    """Sublevel diagram (H0/H1) of the normalized latent grid."""
    return compute_persistence(CubicalFiltration(latent_grid(z), "sublevel"))


def latent_grid_backward(z: np.ndarray, grid_grad: np.ndarray) -> np.ndarray:
    """Chain grid-value gradients through min-max normalization back to z.

    Min and max positions are treated as fixed (exact away from argmin /
    argmax ties); a constant embedding gets zero gradient.
    """
    z = np.asarray(z, dtype=np.float64)
    g = np.asarray(grid_grad, dtype=np.float64).ravel()
    lo, hi = z.min(), z.max()
    span = hi - lo
    if span <= 0.0:
        return np.zeros_like(z)
    i_min = int(z.argmin())
    i_max = int(z.argmax())
    normalized = (z - lo) / span
    total = g.sum()
    weighted = float(normalized @ g)
    dz = g / span
    dz[i_min] -= (total - weighted) / span
    dz[i_max] -= weighted / span
    return dz
