"""Vertex-trajectory assembly, outlier detection, and repair.

A trajectory matrix tracks every reference-frame vertex through a corresponded
mesh sequence, one column per frame. Entries whose pairwise geodesic distances
to a set of trusted anchor trajectories drift away from the reference frame's
are flagged, then re-snapped to nearby surface vertices by minimizing a
temporal-smoothness plus geodesic-consistency energy.
"""

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, RefineError
from .geodesic import geodesic_distance

log = logging.getLogger(__name__)

_MAGIC = b"PDMT"
_VERSION = 1


@dataclass
class TrajectoryMatrix:
    """Positions of each reference vertex across all frames.

    positions : (V, N, 3) float64, row i = one vertex's trajectory
    ref_frame : column holding the reference positions
    indices   : (V, N) int64 frame-vertex ids, -1 where unmatched; None when
                unknown (e.g. loaded from disk); recover with snap_to_vertices
    flags     : (V, N) bool outlier marks
    """

    positions: np.ndarray
    ref_frame: int
    indices: np.ndarray = None
    flags: np.ndarray = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 3 or self.positions.shape[2] != 3:
            raise ValueError(f"positions must be (V, N, 3), "
                             f"got {self.positions.shape}")
        V, N = self.positions.shape[:2]
        if not 0 <= self.ref_frame < N:
            raise ValueError(f"ref_frame {self.ref_frame} outside [0, {N})")
        if self.indices is not None:
            self.indices = np.asarray(self.indices, dtype=np.int64)
            if self.indices.shape != (V, N):
                raise ValueError("indices shape mismatch")
        if self.flags is None:
            self.flags = np.zeros((V, N), dtype=bool)
        else:
            self.flags = np.asarray(self.flags, dtype=bool)
            if self.flags.shape != (V, N):
                raise ValueError("flags shape mismatch")

    @property
    def vertex_count(self):
        return self.positions.shape[0]

    @property
    def frame_count(self):
        return self.positions.shape[1]

    def copy(self):
        return TrajectoryMatrix(
            self.positions.copy(), self.ref_frame,
            None if self.indices is None else self.indices.copy(),
            self.flags.copy())


@dataclass
class OutlierSet:
    """Flagged (vertex, frame) entries with their deviation scores.

    flags     : (V, N) bool, reference column always False
    deviation : (V, N) float64 mean geodesic deviation, +inf when the entry
                is unmatched or its distances are unverifiable
    anchors   : dict frame -> (A,) int64 trusted reference-vertex rows used
                as measurement anchors in that frame
    """

    flags: np.ndarray
    deviation: np.ndarray
    anchors: dict

    def __len__(self):
        return int(self.flags.sum())


@dataclass
class RefineConfig:
    """Tunables for detection and repair.

    threshold  : geodesic deviation cutoff in model units; None resolves to
                 5% of the reference frame's bounding-sphere radius
    neighbors  : candidate vertices searched around the repair seed
    anchors    : trusted trajectories used to measure deviation
    max_sweeps : refinement passes before giving up
    """

    threshold: float = None
    neighbors: int = 32
    anchors: int = 20
    max_sweeps: int = 8

    def __post_init__(self):
        if self.threshold is not None and not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if self.neighbors < 1:
            raise ValueError("neighbors must be >= 1")
        if self.anchors < 1:
            raise ValueError("anchors must be >= 1")

    def resolve_threshold(self, seq, ref_frame):
        if self.threshold is not None:
            return float(self.threshold)
        _, radius = seq[ref_frame].bounding_sphere()
        return 0.05 * radius


@dataclass
class RefineResult:
    trajectory: TrajectoryMatrix
    sweep_energies: list
    flags_before: np.ndarray
    skipped: list


def build_trajectory_matrix(seq, ref_frame, correspondences):
    """Assemble the V x N trajectory matrix from per-frame correspondences.

    correspondences maps frame index -> (V,) array of frame-vertex ids for
    each reference vertex, -1 where unmatched. The reference frame needs no
    entry. Unmatched trajectory entries hold the reference position as a
    placeholder and are flagged up front.
    """
    N = len(seq)
    if not 0 <= ref_frame < N:
        raise ValueError(f"ref_frame {ref_frame} outside [0, {N})")
    ref_verts = seq[ref_frame].vertices
    V = len(ref_verts)

    positions = np.empty((V, N, 3), dtype=np.float64)
    indices = np.full((V, N), -1, dtype=np.int64)
    flags = np.zeros((V, N), dtype=bool)
    for n in range(N):
        if n == ref_frame:
            positions[:, n] = ref_verts
            indices[:, n] = np.arange(V)
            continue
        try:
            corr = correspondences[n]
        except (KeyError, IndexError):
            corr = None
        if corr is None:
            raise RefineError(f"missing correspondence for frame {n}")
        corr = np.asarray(corr, dtype=np.int64)
        if corr.shape != (V,):
            raise RefineError(
                f"frame {n}: correspondence shape {corr.shape} != ({V},)")
        if corr.max(initial=-1) >= seq[n].vertex_count:
            raise RefineError(f"frame {n}: correspondent index out of range")
        matched = corr >= 0
        indices[matched, n] = corr[matched]
        positions[matched, n] = seq[n].vertices[corr[matched]]
        positions[~matched, n] = ref_verts[~matched]
        flags[~matched, n] = True
    return TrajectoryMatrix(positions, ref_frame, indices, flags)


def snap_to_vertices(A, seq, chunk=4 << 20):
    """Recover per-frame vertex indices by nearest-vertex search.

    Needed after loading a trajectory from disk, where only positions
    survive. Entries flagged as outliers keep index -1.
    """
    V, N = A.positions.shape[:2]
    indices = np.full((V, N), -1, dtype=np.int64)
    for n in range(N):
        verts = seq[n].vertices
        pts = A.positions[:, n]
        step = max(1, chunk // max(1, 24 * len(verts)))
        for s in range(0, V, step):
            diff = pts[s:s + step, None, :] - verts[None, :, :]
            d2 = np.einsum("ijk,ijk->ij", diff, diff)
            indices[s + np.arange(len(d2)), n] = d2.argmin(axis=1)
    indices[A.flags] = -1
    indices[:, A.ref_frame] = np.arange(V)
    return TrajectoryMatrix(A.positions.copy(), A.ref_frame, indices,
                            A.flags.copy())


def _correspondent_distances(mesh, idx):
    """All-pairs geodesic distances between the listed vertices of a mesh.

    idx may repeat; rows/cols follow idx order. Unreachable pairs are +inf.
    """
    uniq, inv = np.unique(idx, return_inverse=True)
    dist = geodesic_distance(mesh, uniq)
    dist = np.atleast_2d(dist)
    return dist[inv][:, idx]


def detect_outliers(A, seq, config=None):
    """Flag trajectory entries whose geodesic context drifted.

    For each non-reference frame, every matched entry's mean absolute
    difference between its geodesic distances to anchor correspondents and
    the same distances on the reference frame is compared against the
    threshold. Anchors are the lowest-deviation trajectories of a first pass
    that measures against all matched vertices. Unmatched entries are flagged
    with infinite deviation.
    """
    if config is None:
        config = RefineConfig()
    if A.indices is None:
        A = snap_to_vertices(A, seq)
    V, N = A.positions.shape[:2]
    ref = A.ref_frame
    tau = config.resolve_threshold(seq, ref)

    D_ref = geodesic_distance(seq[ref], np.arange(V))
    flags = np.zeros((V, N), dtype=bool)
    deviation = np.zeros((V, N), dtype=np.float64)
    anchors = {}
    for n in range(N):
        if n == ref:
            continue
        idx = A.indices[:, n]
        matched = idx >= 0
        flags[~matched, n] = True
        deviation[~matched, n] = np.inf
        mi = np.flatnonzero(matched)
        if len(mi) == 0:
            anchors[n] = np.empty(0, dtype=np.int64)
            continue
        Dp = _correspondent_distances(seq[n], idx[mi])
        delta = np.abs(Dp - D_ref[np.ix_(mi, mi)])
        delta[~np.isfinite(delta)] = np.inf
        with np.errstate(invalid="ignore"):
            first_pass = delta.mean(axis=1)
        order = np.argsort(first_pass, kind="stable")
        picked = order[:min(config.anchors, len(mi))]
        anchors[n] = mi[picked]
        dev = delta[:, picked].mean(axis=1)
        deviation[mi, n] = dev
        flags[mi, n] |= dev > tau
    flags[:, ref] = False
    deviation[:, ref] = 0.0
    return OutlierSet(flags, deviation, anchors)


def energy_temporal(c_prev, c_next, t):
    """Squared deviation of t from the temporal midpoint trend.

    Accepts a single candidate (3,) or a stack (C, 3); returns scalar or (C,).
    """
    c_prev = np.asarray(c_prev, dtype=np.float64)
    c_next = np.asarray(c_next, dtype=np.float64)
    diff = c_next + c_prev - 2.0 * np.asarray(t, dtype=np.float64)
    return np.einsum("...k,...k->...", diff, diff)


def energy_geodesic(dist_prev, dist_cand, dist_next):
    """Geodesic-consistency energy against anchor distances.

    dist_prev / dist_next : (A,) anchor distances in the neighbor frames
    dist_cand             : (A,) or (C, A) candidate distances in this frame
    Any non-finite distance makes the affected candidate's energy +inf.
    """
    dp = np.asarray(dist_prev, dtype=np.float64)
    dn = np.asarray(dist_next, dtype=np.float64)
    dc = np.asarray(dist_cand, dtype=np.float64)
    with np.errstate(invalid="ignore", over="ignore"):
        terms = (dp - dc) ** 2 + (dc - dn) ** 2
        total = terms.sum(axis=-1)
    return np.where(np.isfinite(total), total, np.inf)


def _neighbor_frames(n, N):
    # boundary frames reuse the single available neighbor on both sides
    prev_f = n - 1 if n > 0 else n + 1
    next_f = n + 1 if n < N - 1 else n - 1
    return prev_f, next_f


class _GeodesicCache:
    """Per-sweep memo of single- and multi-source Dijkstra rows."""

    def __init__(self, seq):
        self.seq = seq
        self.rows = {}

    def row(self, frame, source):
        key = (frame, int(source))
        if key not in self.rows:
            self.rows[key] = geodesic_distance(self.seq[frame], int(source))
        return self.rows[key]

    def anchor_rows(self, frame, sources):
        return np.stack([self.row(frame, s) for s in sources])


def refine_outlier(A, seq, entry, config=None, outliers=None, cache=None):
    """Re-optimize one flagged trajectory entry.

    Seeds at the frame-n correspondent of the nearest confident trajectory
    (nearest on the reference frame), gathers the geodesically closest
    candidate vertices around the seed, and returns the candidate minimizing
    temporal + geodesic energy as (vertex_id, position, energy). The entry's
    current vertex competes too, so accepted repairs never raise its energy.
    Ties resolve to the lowest vertex id.
    """
    if config is None:
        config = RefineConfig()
    if outliers is None:
        outliers = detect_outliers(A, seq, config)
    if cache is None:
        cache = _GeodesicCache(seq)
    i, n = entry
    V, N = A.positions.shape[:2]
    ref = A.ref_frame

    confident = (A.indices[:, n] >= 0) & ~outliers.flags[:, n]
    confident[i] = False
    rows = np.flatnonzero(confident)
    if len(rows) == 0:
        raise RefineError(f"frame {n}: no confident correspondent to seed "
                          f"the repair of vertex {i}")
    ref_row = cache.row(ref, i)
    seed_row = rows[np.argmin(ref_row[rows])]
    if not np.isfinite(ref_row[seed_row]):
        raise RefineError(f"vertex {i} cannot reach any confident vertex on "
                          f"the reference frame")
    seed = int(A.indices[seed_row, n])

    dist_seed = cache.row(n, seed)
    order = np.argsort(dist_seed, kind="stable")[:config.neighbors]
    cand = order[np.isfinite(dist_seed[order])]
    current = int(A.indices[i, n])
    if current >= 0:
        cand = np.append(cand, current)
    cand = np.unique(cand)
    if len(cand) == 0:
        raise RefineError(f"frame {n}: no reachable candidates around the "
                          f"seed vertex {seed}")

    prev_f, next_f = _neighbor_frames(n, N)
    e_total = energy_temporal(A.positions[i, prev_f], A.positions[i, next_f],
                              seq[n].vertices[cand])

    anchor_rows = outliers.anchors.get(n, np.empty(0, dtype=np.int64))
    anchor_rows = anchor_rows[anchor_rows != i]
    if len(anchor_rows):
        idx_prev = A.indices[i, prev_f]
        idx_next = A.indices[i, next_f]
        # anchors must be matched wherever a side is in play
        keep = np.ones(len(anchor_rows), dtype=bool)
        if idx_prev >= 0:
            keep &= A.indices[anchor_rows, prev_f] >= 0
        if idx_next >= 0:
            keep &= A.indices[anchor_rows, next_f] >= 0
        anchor_rows = anchor_rows[keep]
    if len(anchor_rows):
        d_cand = cache.anchor_rows(
            n, A.indices[anchor_rows, n])[:, cand].T
        d_prev = d_next = None
        if A.indices[i, prev_f] >= 0:
            d_prev = cache.row(prev_f, A.indices[i, prev_f])[
                A.indices[anchor_rows, prev_f]]
        if A.indices[i, next_f] >= 0:
            d_next = cache.row(next_f, A.indices[i, next_f])[
                A.indices[anchor_rows, next_f]]
        if d_prev is None and d_next is not None:
            d_prev = d_next
        elif d_next is None and d_prev is not None:
            d_next = d_prev
        if d_prev is not None:
            e_total = e_total + energy_geodesic(d_prev, d_cand, d_next)

    best = int(np.argmin(e_total))
    if not np.isfinite(e_total[best]):
        raise RefineError(f"frame {n}: every candidate for vertex {i} was "
                          f"rejected (unreachable anchors)")
    v = int(cand[best])
    return v, seq[n].vertices[v].copy(), float(e_total[best])


def refine_sequence(A, seq, config=None):
    """Detect and repair outliers over the whole sequence.

    Sweeps frames in temporal order, repairing every flagged entry against
    the current matrix state (within a frame, repairs read the state at the
    frame's start and apply together). After each sweep the outlier set is
    re-detected; sweeping stops when the flags stabilize, the energy total
    stops improving, or max_sweeps is reached. Unflagged entries are never
    modified.
    """
    if config is None:
        config = RefineConfig()
    work = A.copy()
    if work.indices is None:
        work = snap_to_vertices(work, seq)
    outliers = detect_outliers(work, seq, config)
    flags_before = outliers.flags.copy()

    sweep_energies = []
    skipped = []
    for sweep in range(config.max_sweeps):
        entries = np.argwhere(outliers.flags)
        if len(entries) == 0:
            break
        snapshot = (work.positions.copy(), work.indices.copy())
        cache = _GeodesicCache(seq)
        total = 0.0
        skipped = []
        for n in np.unique(entries[:, 1]):
            updates = []
            for i in entries[entries[:, 1] == n, 0]:
                try:
                    v, pos, e = refine_outlier(work, seq, (int(i), int(n)),
                                               config, outliers, cache)
                except RefineError as exc:
                    skipped.append(((int(i), int(n)), str(exc)))
                    continue
                updates.append((int(i), v, pos, e))
            for i, v, pos, e in updates:
                work.positions[i, n] = pos
                work.indices[i, n] = v
                total += e
        if sweep_energies and total > sweep_energies[-1] + 1e-12:
            work.positions, work.indices = snapshot
            log.warning("refinement sweep %d raised the energy total "
                        "(%.6g > %.6g); keeping the previous state",
                        sweep, total, sweep_energies[-1])
            break
        sweep_energies.append(total)
        new_outliers = detect_outliers(work, seq, config)
        stable = np.array_equal(new_outliers.flags, outliers.flags)
        outliers = new_outliers
        if stable:
            break
    else:
        log.warning("refinement did not settle within %d sweeps",
                    config.max_sweeps)
    if skipped:
        (i, n), why = skipped[0]
        log.warning("%d flagged entries could not be repaired; first is "
                    "(%d, %d): %s", len(skipped), i, n, why)

    work.flags = outliers.flags
    return RefineResult(work, sweep_energies, flags_before, skipped)


def save_trajectory(A, path):
    """Write positions as float32 with a (V, N, ref) header.

    Outlier flags go to a packed-bit sidecar at path + '.flags'.
    """
    V, N = A.positions.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHIII", _MAGIC, _VERSION, V, N, A.ref_frame))
        fh.write(np.ascontiguousarray(
            A.positions, dtype="<f4").tobytes())
    with open(str(path) + ".flags", "wb") as fh:
        fh.write(np.packbits(A.flags.ravel()).tobytes())


def load_trajectory(path):
    """Read a trajectory written by save_trajectory.

    Vertex indices are not stored; recover them with snap_to_vertices when
    needed. A missing flags sidecar loads as all-clear.
    """
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize("<4sHIII"))
        if len(head) < struct.calcsize("<4sHIII"):
            raise FormatError("trajectory header truncated")
        magic, version, V, N, ref = struct.unpack("<4sHIII", head)
        if magic != _MAGIC:
            raise FormatError(f"bad trajectory magic {magic!r}")
        if version != _VERSION:
            raise FormatError(f"unsupported trajectory version {version}")
        if N == 0 or ref >= N:
            raise FormatError("corrupt trajectory header")
        raw = fh.read(V * N * 3 * 4)
        if len(raw) != V * N * 3 * 4:
            raise FormatError("trajectory payload truncated")
        positions = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        positions = positions.reshape(V, N, 3)
    flags = None
    flag_path = str(path) + ".flags"
    try:
        with open(flag_path, "rb") as fh:
            bits = np.frombuffer(fh.read(), dtype=np.uint8)
    except FileNotFoundError:
        bits = None
    if bits is not None:
        if len(bits) * 8 < V * N:
            raise FormatError("flags sidecar truncated")
        flags = np.unpackbits(bits, count=V * N).astype(bool).reshape(V, N)
    return TrajectoryMatrix(positions, int(ref), None, flags)
