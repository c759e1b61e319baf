"""Independent brute-force oracles used to freeze expected values.

Everything here is deliberately naive and self-contained so it cannot
share a bug with the library paths it checks.
"""

import itertools

import numpy as np


def naive_cubical_persistence(grid):
    """Dense left-to-right Z/2 reduction in global filtration order.

    Returns sorted (dim, birth, death) triples with zero-persistence
    pairs dropped and inf deaths for essential classes.
    """
    grid = np.asarray(grid, dtype=np.float64)
    shape = tuple(2 * n - 1 for n in grid.shape)
    cells = list(itertools.product(*[range(m) for m in shape]))
    vals, dims = [], []
    for c in cells:
        vtx = itertools.product(
            *[(x // 2, x // 2 + 1) if x % 2 else (x // 2,) for x in c])
        vals.append(max(grid[v] for v in vtx))
        dims.append(sum(x % 2 for x in c))
    idx_of = {c: i for i, c in enumerate(cells)}
    order = sorted(range(len(cells)), key=lambda i: (vals[i], dims[i], i))
    rank = {f: r for r, f in enumerate(order)}
    cols = []
    for f in order:
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
            pivots[max(col)] = j
            pairs.append((max(col), j))
    paired = {i for pair in pairs for i in pair}
    points = []
    for bi, di in pairs:
        fb, fd = order[bi], order[di]
        if vals[fd] > vals[fb]:
            points.append((dims[fb], vals[fb], vals[fd]))
    for r in range(len(cols)):
        if r not in paired and not cols[r]:
            f = order[r]
            points.append((dims[f], vals[f], np.inf))
    return sorted(points)


def union_find_components(mask):
    """Number of 6-connected components of a 3D binary mask."""
    mask = np.asarray(mask, dtype=bool)
    parent = {}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb

    coords = list(zip(*np.nonzero(mask)))
    for c in coords:
        parent[c] = c
    for c in coords:
        for axis in range(3):
            n = list(c)
            n[axis] += 1
            n = tuple(n)
            if n in parent:
                union(c, n)
    return len({find(c) for c in coords})


def euler_characteristic(mask):
    """Alternating cell count of the vertex-based cubical complex."""
    mask = np.asarray(mask, dtype=bool)
    chi = 0
    for span in itertools.product((0, 1), repeat=3):
        sub = mask
        for axis, s in enumerate(span):
            if s:
                lo = [slice(None)] * 3
                hi = [slice(None)] * 3
                lo[axis] = slice(0, -1)
                hi[axis] = slice(1, None)
                sub = sub[tuple(lo)] & sub[tuple(hi)]
        chi += int(sub.sum()) * (-1) ** sum(span)
    return chi


def exhaustive_wasserstein2_sq(pa, pb):
    """Minimum total squared cost over every partial matching."""
    pa = [tuple(p) for p in pa]
    pb = [tuple(p) for p in pb]

    def diag_sq(p):
        return (p[1] - p[0]) ** 2 / 2.0

    best = np.inf
    n, m = len(pa), len(pb)
    for k in range(min(n, m) + 1):
        for sub_a in itertools.combinations(range(n), k):
            for sub_b in itertools.permutations(range(m), k):
                cost = sum((pa[i][0] - pb[j][0]) ** 2 + (pa[i][1] - pb[j][1]) ** 2
                           for i, j in zip(sub_a, sub_b))
                cost += sum(diag_sq(pa[i]) for i in range(n) if i not in sub_a)
                cost += sum(diag_sq(pb[j]) for j in range(m) if j not in sub_b)
                best = min(best, cost)
    return best


def pairwise_c_index(risks, times, events):
    """Direct loop over every ordered pair."""
    concordant = 0.0
    comparable = 0
    n = len(risks)
    for i in range(n):
        for j in range(n):
            if times[i] < times[j] and events[i] == 1:
                comparable += 1
                if risks[i] > risks[j]:
                    concordant += 1.0
                elif risks[i] == risks[j]:
                    concordant += 0.5
    return concordant / comparable


def brute_distance_to_set(mask):
    """Per-voxel Euclidean distance to the nearest mask voxel, O(N*M)."""
    mask = np.asarray(mask, dtype=bool)
    targets = np.argwhere(mask)
    out = np.zeros(mask.shape, dtype=np.float64)
    for idx in np.ndindex(mask.shape):
        if mask[idx]:
            continue
        deltas = targets - np.array(idx)
        out[idx] = np.sqrt((deltas ** 2).sum(axis=1).min())
    return out
