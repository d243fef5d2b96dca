import numpy as np

from spatialfh.lattice import from_neighbors


def random_lattice(rng, n, extra=0.1):
    """Connected random lattice: a random spanning tree plus extra edges."""
    perm = rng.permutation(n)
    nbrs = [[] for _ in range(n)]
    for k in range(1, n):
        i, j = perm[k], perm[rng.integers(k)]
        nbrs[i].append(j)
    for _ in range(int(extra * n * n / 2)):
        i, j = rng.integers(n, size=2)
        if i != j:
            nbrs[i].append(j)
    return from_neighbors(nbrs)
