"""Grid, cosine basis and the discrete Wiener shape."""
import numpy as np

from rse_heat import Grid, inner_h, neumann_laplacian_apply, sample_wiener_shape

g = Grid(16)
print(g.centers[:4], g.dx)

# Neumann Laplacian eigenvalues, smallest first (mode 0 is the constant)
print(g.eigenvalues[:5])

# a cosine mode is an eigenvector of the discrete Laplacian
k = 3
e = g.basis[k]
print(np.allclose(neumann_laplacian_apply(g, e), -g.eigenvalues[k] * e))

# the basis is orthonormal in H
print(inner_h(g, e, e))

# Wiener shapes: variance of each increment, first one is half a cell
rng = np.random.default_rng(0)
v = sample_wiener_shape(g, rng, 50_000)
inc = np.diff(np.concatenate([np.zeros((len(v), 1)), v], axis=1), axis=1)
print(inc.var(axis=0)[:3] / g.dx)  # roughly [0.5, 1, 1]
