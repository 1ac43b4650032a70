"""
Checking the numerics by hand
=============================

Finite differences for the network gradient, and a brute-force look at
the simplex projection used for the importance weights.
"""
import numpy as np

from mtfeel.nn import DeviceShard, ModelParams, empirical_loss, loss_gradient
from mtfeel.simplex import project_simplex

rng = np.random.default_rng(0)

# A 2-4-3 network on eight samples.
dims = ((2, 4), (4, 3))
w = ModelParams(rng.normal(size=2 * 4 + 4 + 4 * 3 + 3), dims)
shard = DeviceShard(rng.normal(size=(8, 2)), rng.integers(3, size=8), 8, 0, 3)

g = loss_gradient(w, shard)
h = 1e-5
fd = np.array([(empirical_loss(w.with_values(w.values + h * e), shard)
                - empirical_loss(w.with_values(w.values - h * e), shard)) / (2 * h)
               for e in np.eye(w.size)])
print("relative error:", np.linalg.norm(g - fd) / np.linalg.norm(fd))

# Projection onto the simplex: compare with the best of many random points.
v = rng.normal(size=3)
x = project_simplex(v)
cloud = rng.dirichlet(np.ones(3), size=200_000)
best = cloud[np.argmin(((cloud - v) ** 2).sum(1))]
print("v =", v)
print("projection", x, "distance", np.linalg.norm(x - v))
print("best sample", best, "distance", np.linalg.norm(best - v))
