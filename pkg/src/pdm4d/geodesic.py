"""Edge-graph geodesics, farthest-point sampling, and surface segmentation.

Distances are exact shortest paths on the mesh edge graph with grid-snapped
Euclidean weights (see ``mesh.EDGE_LENGTH_GRID``): every path sum is exact in
float64, so results are independent of algorithm and summation order.
"""

import numpy as np
from scipy.sparse import csgraph

from .mesh import Segmentation


def geodesic_distance(mesh, sources):
    """Shortest-path distances from one or more source vertices.

    Parameters
    ----------
    mesh : TriangleMesh
    sources : int or sequence of int

    Returns
    -------
    distances : (V,) or (S, V) float64
        ``inf`` marks vertices unreachable from the source.
    """
    scalar = np.isscalar(sources)
    idx = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    if idx.size == 0:
        raise ValueError("at least one source vertex required")
    if idx.min() < 0 or idx.max() >= mesh.vertex_count:
        raise ValueError(f"source index out of range [0, {mesh.vertex_count})")
    dist = csgraph.dijkstra(mesh.adjacency, directed=False, indices=idx)
    return dist[0] if scalar else dist


def farthest_point_sample(mesh, seed_indices, count, within=None):
    """Greedy max-min geodesic sampling starting from ``seed_indices``.

    Grows the seed set to ``count`` vertices by repeatedly adding the vertex
    farthest (geodesically) from the current set. Ties pick the lowest
    vertex index. ``within`` optionally restricts candidates to a boolean
    vertex mask.
    """
    seeds = list(int(s) for s in np.atleast_1d(seed_indices))
    if count < len(seeds):
        raise ValueError(f"count {count} below seed count {len(seeds)}")
    if within is None:
        available = mesh.vertex_count
    else:
        within = np.asarray(within, dtype=bool)
        available = int(within.sum())
        if any(not within[s] for s in seeds):
            raise ValueError("seed vertex outside the candidate mask")
    if count > available:
        raise ValueError(f"count {count} exceeds {available} candidate vertices")

    chosen = list(seeds)
    dist = csgraph.dijkstra(mesh.adjacency, directed=False,
                            indices=np.asarray(seeds, dtype=np.int64),
                            min_only=True)
    taken = np.zeros(mesh.vertex_count, dtype=bool)
    taken[seeds] = True
    while len(chosen) < count:
        cand = dist.copy()
        cand[taken] = -np.inf
        if within is not None:
            cand[~within] = -np.inf
        nxt = int(np.argmax(cand))
        chosen.append(nxt)
        taken[nxt] = True
        dist = np.minimum(
            dist, csgraph.dijkstra(mesh.adjacency, directed=False, indices=nxt))
    return np.asarray(chosen, dtype=np.int64)


def _allocate_centers(K, sizes):
    """Split K centers over components: largest-remainder proportional shares,
    then enforce at least one center per component within capacity."""
    n = len(sizes)
    sizes = np.asarray(sizes, dtype=np.float64)
    quota = K * sizes / sizes.sum()
    alloc = np.floor(quota).astype(np.int64)
    leftover = K - int(alloc.sum())
    if leftover > 0:
        frac = quota - np.floor(quota)
        # stable: larger fraction first, lower component index on ties
        order = np.lexsort((np.arange(n), -frac))
        alloc[order[:leftover]] += 1
    caps = sizes.astype(np.int64)
    # every component needs a center; take from the largest allocation
    for comp in range(n):
        while alloc[comp] < 1:
            donor = int(np.argmax(alloc))
            if alloc[donor] <= 1:
                raise ValueError("cannot place that many centers")
            alloc[donor] -= 1
            alloc[comp] += 1
    # clamp to component capacity, pushing surplus to roomier components
    surplus = int(np.maximum(alloc - caps, 0).sum())
    alloc = np.minimum(alloc, caps)
    while surplus > 0:
        room = caps - alloc
        target = int(np.argmax(room))
        if room[target] <= 0:
            raise ValueError("cannot place that many centers")
        step = min(surplus, int(room[target]))
        alloc[target] += step
        surplus -= step
    return alloc


def generate_segmentation(mesh, K, seed, m=0):
    """Seeded geodesic K-patch segmentation.

    Picks up to 10 uniform-random seed vertices (K of them when K < 10),
    extends them to K centers by farthest-point sampling, and labels every
    vertex by its geodesically nearest center (lowest center id on ties).
    Disconnected meshes receive centers per component, proportional to
    component vertex counts.
    """
    V = mesh.vertex_count
    if not 1 <= K <= V:
        raise ValueError(f"K must be in [1, {V}], got {K}")
    rng = np.random.default_rng(seed)
    n_comp, comp_labels = mesh.vertex_components
    comp_sizes = np.bincount(comp_labels, minlength=n_comp)
    if K < n_comp:
        raise ValueError(
            f"K={K} cannot cover {n_comp} connected components")
    alloc = _allocate_centers(K, comp_sizes)

    centers = []
    for comp in range(n_comp):
        k_c = int(alloc[comp])
        if k_c == 0:
            continue
        verts = np.flatnonzero(comp_labels == comp)
        n_seeds = min(10, k_c)
        seeds = np.sort(rng.choice(verts, size=n_seeds, replace=False))
        if k_c > n_seeds:
            mask = comp_labels == comp
            picked = farthest_point_sample(mesh, seeds, k_c, within=mask)
        else:
            picked = seeds
        centers.extend(int(c) for c in picked)

    centers = np.asarray(centers, dtype=np.int64)
    dist = csgraph.dijkstra(mesh.adjacency, directed=False, indices=centers)
    labels = np.argmin(dist, axis=0).astype(np.int64)
    return Segmentation(labels=labels, K=K, m=m, centers=centers)
