"""Dense mesh-to-mesh correspondence by cross-view feature voting.

Every (source view, target view) pair contributes one vote per valid source
pixel: the pixel's feature is matched to its nearest target-pixel feature,
both pixels are snapped to their nearest mesh vertices, and the (source
vertex, target vertex) cell of the voting matrix is incremented. The
per-source-vertex correspondence is the argmax row of the accumulated
matrix.
"""

import numpy as np
from dataclasses import dataclass

from .errors import CorrespondenceError
from .render import reproject


@dataclass
class FeatureField:
    """Per-pixel feature vectors over a PDM's valid pixels.

    ``pixels`` holds the (row, col) of each vector in row-major order, the
    same order `reproject` emits.
    """

    vectors: np.ndarray      # (P, d) float64
    pixels: np.ndarray       # (P, 2) int64
    view_id: int

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float64)
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.int64)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.pixels):
            raise ValueError("feature count must match pixel count")
        if not np.isfinite(self.vectors).all():
            raise ValueError("features must be finite")


def feature_field(dense, pdm, view_id):
    """Extract the valid-pixel features of a dense (H, W, d) map."""
    if dense.shape[:2] != pdm.shape:
        raise ValueError(
            f"feature map is {dense.shape[:2]}, PDM is {pdm.shape}")
    pixels = np.argwhere(pdm.valid)
    return FeatureField(vectors=dense[pdm.valid], pixels=pixels,
                        view_id=view_id)


def nnsearch(X, Y, chunk_elems=int(2e7)):
    """Index of the Euclidean-nearest row of X for every row of Y.

    Brute force in chunks; ties resolve to the lowest index.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("nnsearch target set is empty")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimensionality mismatch: {X.shape[1]} vs "
                         f"{Y.shape[1]}")
    out = np.empty(len(Y), dtype=np.int64)
    step = max(1, chunk_elems // max(1, len(X)))
    for s in range(0, len(Y), step):
        diff = Y[s:s + step, None, :] - X[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        out[s:s + step] = np.argmin(d2, axis=1)
    return out


def vote_from_samples(verts_s, verts_t, samples_s, samples_t):
    """Voting over per-view (points, features) samples.

    ``samples_s`` / ``samples_t`` are lists of (points (P,3), features
    (P,d)) pairs, one per view. Returns (corres, votes): per-source-vertex
    target index (-1 when a vertex collected no votes) and the integer
    voting matrix.
    """
    verts_s = np.asarray(verts_s, dtype=np.float64)
    verts_t = np.asarray(verts_t, dtype=np.float64)
    votes = np.zeros((len(verts_s), len(verts_t)), dtype=np.int64)
    total = 0
    for pts_s, f_s in samples_s:
        if len(pts_s) == 0:
            continue
        index_s = nnsearch(verts_s, pts_s)
        for pts_t, f_t in samples_t:
            if len(pts_t) == 0:
                continue
            index_t = nnsearch(verts_t, pts_t)
            match = nnsearch(f_t, f_s)
            np.add.at(votes, (index_s, index_t[match]), 1)
            total += len(pts_s)
    if total == 0:
        raise CorrespondenceError("no valid pixels in any view pair")
    corres = np.argmax(votes, axis=1).astype(np.int64)  # ties: lowest index
    corres[votes.sum(axis=1) == 0] = -1
    return corres, votes


def vote(mesh_s, mesh_t, features_s, features_t, pdms_s, pdms_t):
    """Correspond source vertices to target vertices (see module docstring).

    ``features_*`` are FeatureFields aligned view-by-view with ``pdms_*``.
    """
    samples_s = _view_samples(features_s, pdms_s, "source")
    samples_t = _view_samples(features_t, pdms_t, "target")
    return vote_from_samples(mesh_s.vertices, mesh_t.vertices,
                             samples_s, samples_t)


def _view_samples(fields, pdms, side):
    if len(fields) != len(pdms):
        raise CorrespondenceError(
            f"{side}: {len(fields)} feature fields for {len(pdms)} PDMs")
    samples = []
    for ff, pdm in zip(fields, pdms):
        points, pixels = reproject(pdm.camera, pdm)
        if len(points) != len(ff.vectors) or not np.array_equal(pixels,
                                                                ff.pixels):
            raise CorrespondenceError(
                f"{side} view {ff.view_id}: feature field does not cover "
                "the PDM's valid pixels")
        samples.append((points, ff.vectors))
    return samples


def save_correspondence(path, corres):
    """One `src tgt` pair per line; unmatched rows carry target -1."""
    corres = np.asarray(corres, dtype=np.int64)
    with open(path, "w", encoding="utf-8") as fh:
        for i, j in enumerate(corres):
            fh.write(f"{i} {j}\n")


def load_correspondence(path):
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            tok = line.split()
            if len(tok) != 2:
                raise CorrespondenceError(f"{path}:{ln}: expected two ints")
            pairs.append((int(tok[0]), int(tok[1])))
    pairs.sort()
    idx = [p[0] for p in pairs]
    if idx != list(range(len(pairs))):
        raise CorrespondenceError(f"{path}: source indices are not 0..V-1")
    return np.array([p[1] for p in pairs], dtype=np.int64)
