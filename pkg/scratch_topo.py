import itertools
import sys

import numpy as np

sys.path.insert(0, "src")
from toposurv.topology import (CubicalFiltration, compute_persistence,
                               betti_numbers, wasserstein2, PersistenceDiagram,
                               DiagramPoint, _match_points)


def naive_persistence(grid):
    """Dense left-to-right Z/2 reduction, global filtration order."""
    grid = np.asarray(grid, dtype=np.float64)
    ext = grid.shape
    shape = tuple(2 * n - 1 for n in ext)
    cells = list(itertools.product(*[range(m) for m in shape]))
    vals = []
    for c in cells:
        vtx = itertools.product(*[(x // 2, x // 2 + 1) if x % 2 else (x // 2,) for x in c])
        vals.append(max(grid[v] for v in vtx))
    dims = [sum(x % 2 for x in c) for c in cells]
    idx_of = {c: i for i, c in enumerate(cells)}
    order = sorted(range(len(cells)), key=lambda i: (vals[i], dims[i], i))
    rank = {f: r for r, f in enumerate(order)}
    cols = []
    for r, f in enumerate(order):
        c = cells[f]
        col = set()
        for axis, x in enumerate(c):
            if x % 2:
                for delta in (-1, 1):
                    c2 = list(c)
                    c2[axis] += delta
                    col.add(rank[idx_of[tuple(c2)]])
        cols.append(col)
    pivots = {}
    pairs = []
    for j in range(len(cols)):
        col = cols[j]
        while col:
            piv = max(col)
            if piv in pivots:
                col ^= cols[pivots[piv]]
            else:
                break
        cols[j] = col
        if col:
            piv = max(col)
            pivots[piv] = j
            pairs.append((piv, j))
    paired = {i for p in pairs for i in p}
    points = []
    for (bi, di) in pairs:
        fb, fd = order[bi], order[di]
        if vals[fd] > vals[fb]:
            points.append((dims[fb], vals[fb], vals[fd]))
    for r in range(len(cols)):
        if r not in paired and not cols[r]:
            f = order[r]
            points.append((dims[f], vals[f], np.inf))
    return sorted(points)


def fast_points(grid):
    d = compute_persistence(CubicalFiltration(np.asarray(grid, float)))
    return sorted((p.dim, p.birth, p.death) for p in d.points)


rng = np.random.default_rng(0)
# random small grids, 2D and 3D, with ties
for trial in range(30):
    if trial % 2:
        g = rng.integers(0, 4, size=(4, 4, 4)).astype(float)
    else:
        g = rng.random((5, 5))
    a, b = fast_points(g), naive_persistence(g)
    assert a == b, (trial, a, b)
print("random grids: optimized == naive OK")

# all-zeros 4^3 -> single essential H0 at 0
pts = fast_points(np.zeros((4, 4, 4)))
assert pts == [(0, 0.0, np.inf)], pts
print("zeros OK")

# solid ball / hollow shell / torus betti
zz, yy, xx = np.mgrid[0:16, 0:16, 0:16]
rho = np.sqrt((zz - 8.0) ** 2 + (yy - 8.0) ** 2 + (xx - 8.0) ** 2)
ball = rho <= 5.5
shell = (rho <= 5.5) & (rho >= 3.0)
print("ball betti", betti_numbers(ball))
print("shell betti", betti_numbers(shell))

# solid torus: circle radius 5 in z=8 plane, tube radius 2.2
cz, cy, cx = 8.0, 8.0, 8.0
ring_r = 4.5
d_ring = np.sqrt((np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) - ring_r) ** 2 + (zz - cz) ** 2)
torus = d_ring <= 2.2
print("torus betti", betti_numbers(torus))

# hollow-shell indicator example from spec: one (0,inf,0) and one (0,1,2)
ind = np.where(shell, 0.0, 1.0)
d = compute_persistence(CubicalFiltration(ind))
alive = [(p.dim, p.birth, p.death) for p in d.points if p.birth == 0.0]
print("shell indicator points born at 0:", alive)

# wasserstein analytic cases
A = PersistenceDiagram([DiagramPoint(0.0, 1.0, 0, 0, 0)])
B = PersistenceDiagram([])
print("W2({(0,1)}, {}) =", wasserstein2(A, B, 0), "expect", np.sqrt(0.5))
A2 = PersistenceDiagram([DiagramPoint(0.0, 2.0, 0, 0, 0)])
B2 = PersistenceDiagram([DiagramPoint(0.0, 1.0, 0, 0, 0)])
print("W2({(0,2)},{(0,1)}) =", wasserstein2(A2, B2, 0), "expect 1.0")
