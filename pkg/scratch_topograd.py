import sys

import numpy as np

sys.path.insert(0, "src")
from toposurv.topology import (CubicalFiltration, compute_persistence, topo_loss,
                               latent_grid, latent_grid_diagram,
                               latent_grid_backward, TopoWeights)

rng = np.random.default_rng(42)
weights = TopoWeights(alpha=(1.0, 1.0, 0.0))

# target diagram from a fixed reference grid
ref = rng.random((6, 6))
target = compute_persistence(CubicalFiltration(ref))


def loss_of_grid(g):
    d = compute_persistence(CubicalFiltration(g))
    v, _ = topo_loss(target, d, weights, g.shape)
    return v


# gradient wrt raw grid values (no normalization)
g0 = rng.random((6, 6))
d0 = compute_persistence(CubicalFiltration(g0))
v0, grad = topo_loss(target, d0, weights, g0.shape)
h = 1e-5
worst = 0.0
for i in range(g0.size):
    gp = g0.copy().ravel()
    gm = g0.copy().ravel()
    gp[i] += h
    gm[i] -= h
    fd = (loss_of_grid(gp.reshape(6, 6)) - loss_of_grid(gm.reshape(6, 6))) / (2 * h)
    err = abs(fd - grad.ravel()[i]) / max(abs(fd), abs(grad.ravel()[i]), 1e-3)
    worst = max(worst, err)
print("grid-gradient max rel err:", worst)

# gradient wrt z through normalization
z0 = rng.random(36)


def loss_of_z(z):
    d = latent_grid_diagram(z)
    v, _ = topo_loss(target, d, weights, (6, 6))
    return v


dz0 = latent_grid_diagram(z0)
v, grid_grad = topo_loss(target, dz0, weights, (6, 6))
gz = latent_grid_backward(z0, grid_grad)
worst = 0.0
for i in range(z0.size):
    zp, zm = z0.copy(), z0.copy()
    zp[i] += h
    zm[i] -= h
    fd = (loss_of_z(zp) - loss_of_z(zm)) / (2 * h)
    err = abs(fd - gz[i]) / max(abs(fd), abs(gz[i]), 1e-3)
    worst = max(worst, err)
print("z-gradient max rel err:", worst)

# identical grids -> zero loss, zero gradient
v_same, g_same = topo_loss(target, target, weights, ref.shape)
print("identical:", v_same, np.abs(g_same).max())

# timing for training-scale grids
import time
t0 = time.perf_counter()
for _ in range(100):
    compute_persistence(CubicalFiltration(rng.random((8, 8))))
print("8x8 diagram: %.3f ms each" % ((time.perf_counter() - t0) * 10))
t0 = time.perf_counter()
for _ in range(20):
    compute_persistence(CubicalFiltration(rng.random((16, 16))))
print("16x16 diagram: %.3f ms each" % ((time.perf_counter() - t0) * 50))
