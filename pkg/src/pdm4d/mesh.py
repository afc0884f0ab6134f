"""Triangle mesh containers, sequence handling, and ASCII OBJ/PLY I/O.

Meshes are immutable after construction: vertex and face arrays are marked
read-only so downstream caches (edge graphs, adjacency) stay valid.
"""

import json
import os
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .errors import CorrespondenceError, MeshParseError, MeshStructureError

# Edge lengths are snapped to this dyadic grid. Path sums of grid multiples
# below ~8e6 are exact in float64, so shortest-path distances do not depend
# on summation order and different algorithms agree bit-for-bit.
EDGE_LENGTH_GRID = 2.0 ** -30


class TriangleMesh:
    """Indexed triangle mesh with float64 vertices and int64 faces.

    Parameters
    ----------
    vertices : (V, 3) array_like
        Vertex positions in model units.
    faces : (F, 3) array_like
        Vertex indices, each face a triangle. Validated on construction:
        indices must be in range and no face may repeat a vertex.
    """

    def __init__(self, vertices, faces):
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        faces = np.ascontiguousarray(faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshStructureError(
                f"vertices must be (V, 3), got {vertices.shape}")
        if faces.size == 0:
            faces = faces.reshape(0, 3)
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshStructureError(f"faces must be (F, 3), got {faces.shape}")
        if faces.size:
            if faces.min() < 0 or faces.max() >= len(vertices):
                raise MeshStructureError(
                    f"face index out of range [0, {len(vertices)})")
            degenerate = (
                (faces[:, 0] == faces[:, 1])
                | (faces[:, 1] == faces[:, 2])
                | (faces[:, 0] == faces[:, 2]))
            if degenerate.any():
                bad = int(np.flatnonzero(degenerate)[0])
                raise MeshStructureError(
                    f"face {bad} repeats a vertex: {faces[bad].tolist()}")
        vertices.setflags(write=False)
        faces.setflags(write=False)
        self.vertices = vertices
        self.faces = faces

    @property
    def vertex_count(self):
        return len(self.vertices)

    @property
    def face_count(self):
        return len(self.faces)

    @cached_property
    def edges(self):
        """Unique undirected edges as a sorted (E, 2) int64 array."""
        if not len(self.faces):
            return np.zeros((0, 2), dtype=np.int64)
        raw = np.concatenate([
            self.faces[:, [0, 1]],
            self.faces[:, [1, 2]],
            self.faces[:, [2, 0]],
        ])
        raw.sort(axis=1)
        return np.unique(raw, axis=0)

    @cached_property
    def edge_lengths(self):
        """Euclidean edge lengths snapped to the dyadic grid (see module doc)."""
        e = self.edges
        d = np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)
        return np.round(d / EDGE_LENGTH_GRID) * EDGE_LENGTH_GRID

    @cached_property
    def adjacency(self):
        """Symmetric CSR adjacency with grid-snapped edge lengths as weights."""
        e, w = self.edges, self.edge_lengths
        n = self.vertex_count
        m = sparse.csr_matrix(
            (np.concatenate([w, w]),
             (np.concatenate([e[:, 0], e[:, 1]]),
              np.concatenate([e[:, 1], e[:, 0]]))),
            shape=(n, n))
        return m

    @cached_property
    def vertex_components(self):
        """(count, labels) connected components of the edge graph.

        Vertices with no incident edge form singleton components.
        """
        n, labels = csgraph.connected_components(self.adjacency, directed=False)
        return n, labels

    def bounding_sphere(self):
        """(center, radius) sphere from the AABB center and farthest vertex."""
        if not len(self.vertices):
            raise MeshStructureError("empty mesh has no bounding sphere")
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        center = 0.5 * (lo + hi)
        radius = float(np.linalg.norm(self.vertices - center, axis=1).max())
        return center, radius

    def translated(self, offset):
        return TriangleMesh(self.vertices + np.asarray(offset, dtype=np.float64),
                            self.faces)

    def __repr__(self):
        return f"TriangleMesh(V={self.vertex_count}, F={self.face_count})"


@dataclass
class MeshSequence:
    """Ordered mesh frames sharing model units, with a nominal frame rate."""

    frames: list
    fps: float = 24.0

    def __post_init__(self):
        if not self.frames:
            raise MeshStructureError("sequence needs at least one frame")

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, n):
        return self.frames[n]


@dataclass
class Segmentation:
    """Per-vertex labels in [0, K) plus the segmentation id m.

    ``centers`` keeps the generating center vertices when known; it is not
    serialized.
    """

    labels: np.ndarray
    K: int
    m: int = 0
    centers: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.K):
            raise MeshStructureError(
                f"labels must lie in [0, {self.K})")


def propagate_segmentation(seg, index_map):
    """Carry labels onto another mesh through a correspondence index map.

    ``index_map[i]`` is the source vertex corresponding to target vertex i.
    Every target vertex must be covered; -1 entries raise.
    """
    index_map = np.asarray(index_map, dtype=np.int64)
    if index_map.ndim != 1:
        raise CorrespondenceError("index map must be 1-D")
    if (index_map < 0).any():
        bad = int(np.flatnonzero(index_map < 0)[0])
        raise CorrespondenceError(f"target vertex {bad} has no correspondent")
    if index_map.size and index_map.max() >= len(seg.labels):
        raise CorrespondenceError("index map points past the source vertex count")
    return Segmentation(labels=seg.labels[index_map], K=seg.K, m=seg.m)


# ---------------------------------------------------------------------------
# Topology


def _component_face_groups(mesh):
    """Faces grouped by connected component (singleton components skipped)."""
    _, vlabel = mesh.vertex_components
    if not len(mesh.faces):
        return {}
    groups = {}
    flabel = vlabel[mesh.faces[:, 0]]
    for comp in np.unique(flabel):
        groups[int(comp)] = mesh.faces[flabel == comp]
    return groups


def genus(mesh):
    """Total genus over connected components, via chi = V - E + F.

    Each face-bearing component must be a closed 2-manifold (every edge
    shared by exactly two faces). Isolated vertices are ignored. Raises
    ``MeshStructureError`` on non-manifold input.
    """
    total = 0
    for comp, faces in _component_face_groups(mesh).items():
        e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        e.sort(axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        if (counts != 2).any():
            bad = uniq[counts != 2][0].tolist()
            raise MeshStructureError(
                f"component {comp} is not a closed manifold: edge {bad} "
                f"belongs to {int(counts[counts != 2][0])} faces")
        nv = len(np.unique(faces))
        chi = nv - len(uniq) + len(faces)
        if chi % 2:
            raise MeshStructureError(
                f"component {comp} has odd Euler characteristic {chi}")
        g = (2 - chi) // 2
        if g < 0:
            raise MeshStructureError(
                f"component {comp} has negative genus {g}")
        total += g
    return total


def select_reference_frame(seq):
    """Index of the lowest-genus frame; ties go to the earliest frame.

    Non-manifold frames are skipped with a warning. Raises if every frame
    is non-manifold.
    """
    best, best_genus = None, None
    for n, frame in enumerate(seq.frames):
        try:
            g = genus(frame)
        except MeshStructureError as exc:
            warnings.warn(f"frame {n} skipped for reference selection: {exc}")
            continue
        if best_genus is None or g < best_genus:
            best, best_genus = n, g
    if best is None:
        raise MeshStructureError("no manifold frame available for reference")
    return best


# ---------------------------------------------------------------------------
# Mesh file I/O

_COORD_FMT = "{:.9g}"


def load_mesh(path):
    """Read an ASCII OBJ or PLY file into a TriangleMesh."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".obj":
        return _load_obj(path)
    if ext == ".ply":
        return _load_ply(path)
    raise MeshParseError(f"unsupported mesh extension: {path}")


def save_mesh(mesh, path):
    """Write a TriangleMesh as ASCII OBJ or PLY, chosen by extension."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".obj":
        _save_obj(mesh, path)
    elif ext == ".ply":
        _save_ply(mesh, path)
    else:
        raise MeshParseError(f"unsupported mesh extension: {path}")


def _load_obj(path):
    vertices, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            tokens = stripped.split()
            if tokens[0] == "v":
                if len(tokens) < 4:
                    raise MeshParseError(
                        f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    vertices.append([float(t) for t in tokens[1:4]])
                except ValueError:
                    raise MeshParseError(
                        f"{path}:{lineno}: bad vertex coordinate") from None
            elif tokens[0] == "f":
                if len(tokens) < 4:
                    raise MeshParseError(
                        f"{path}:{lineno}: face needs at least 3 vertices")
                idx = []
                for tok in tokens[1:]:
                    head = tok.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise MeshParseError(
                            f"{path}:{lineno}: bad face index {tok!r}") from None
                    if i <= 0:
                        raise MeshParseError(
                            f"{path}:{lineno}: face indices must be positive")
                    idx.append(i - 1)
                for a, b in zip(idx[1:-1], idx[2:]):
                    faces.append([idx[0], a, b])
            # other prefixes (vn, vt, usemtl, ...) are ignored
    try:
        return TriangleMesh(np.array(vertices, dtype=np.float64).reshape(-1, 3),
                            np.array(faces, dtype=np.int64).reshape(-1, 3))
    except MeshStructureError as exc:
        raise MeshStructureError(f"{path}: {exc}") from None


def _save_obj(mesh, path):
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write("v " + " ".join(_COORD_FMT.format(c) for c in v) + "\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def _load_ply(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshParseError(f"{path}:1: not a PLY file")
    n_vertex = n_face = None
    vertex_props = []
    current_element = None
    body_start = None
    fmt_seen = False
    for lineno, line in enumerate(lines[1:], start=2):
        tokens = line.strip().split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise MeshParseError(f"{path}:{lineno}: only ascii PLY supported")
            fmt_seen = True
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise MeshParseError(f"{path}:{lineno}: malformed element line")
            current_element = tokens[1]
            try:
                count = int(tokens[2])
            except ValueError:
                raise MeshParseError(
                    f"{path}:{lineno}: bad element count") from None
            if tokens[1] == "vertex":
                n_vertex = count
            elif tokens[1] == "face":
                n_face = count
        elif tokens[0] == "property":
            if current_element == "vertex" and tokens[1] != "list":
                vertex_props.append(tokens[-1])
        elif tokens[0] == "end_header":
            body_start = lineno
            break
    if body_start is None or not fmt_seen or n_vertex is None or n_face is None:
        raise MeshParseError(f"{path}: incomplete PLY header")
    try:
        xyz = [vertex_props.index(axis) for axis in ("x", "y", "z")]
    except ValueError:
        raise MeshParseError(f"{path}: vertex element lacks x/y/z") from None

    body = lines[body_start:]
    if len(body) < n_vertex + n_face:
        raise MeshParseError(
            f"{path}: expected {n_vertex + n_face} body lines, got {len(body)}")
    vertices = np.zeros((n_vertex, 3), dtype=np.float64)
    for i in range(n_vertex):
        lineno = body_start + 1 + i
        tokens = body[i].split()
        if len(tokens) < len(vertex_props):
            raise MeshParseError(f"{path}:{lineno}: short vertex line")
        try:
            vertices[i] = [float(tokens[j]) for j in xyz]
        except ValueError:
            raise MeshParseError(
                f"{path}:{lineno}: bad vertex coordinate") from None
    faces = []
    for i in range(n_face):
        lineno = body_start + 1 + n_vertex + i
        tokens = body[n_vertex + i].split()
        try:
            cnt = int(tokens[0])
            idx = [int(t) for t in tokens[1:1 + cnt]]
        except (ValueError, IndexError):
            raise MeshParseError(f"{path}:{lineno}: bad face line") from None
        if len(idx) != cnt or cnt < 3:
            raise MeshParseError(
                f"{path}:{lineno}: face lists {cnt} indices but has {len(idx)}")
        for a, b in zip(idx[1:-1], idx[2:]):
            faces.append([idx[0], a, b])
    try:
        return TriangleMesh(vertices, np.array(faces, dtype=np.int64).reshape(-1, 3))
    except MeshStructureError as exc:
        raise MeshStructureError(f"{path}: {exc}") from None


def _save_ply(mesh, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {mesh.vertex_count}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {mesh.face_count}\n")
        fh.write("property list uchar int vertex_indices\n")
        fh.write("end_header\n")
        for v in mesh.vertices:
            fh.write(" ".join(_COORD_FMT.format(c) for c in v) + "\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


# ---------------------------------------------------------------------------
# Segmentation and sequence I/O


def save_segmentation(seg, path):
    """Write labels as text: header line ``K m``, then one label per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{seg.K} {seg.m}\n")
        for lab in seg.labels:
            fh.write(f"{int(lab)}\n")


def load_segmentation(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise MeshParseError(f"{path}:1: empty segmentation file")
    tokens = lines[0].split()
    if len(tokens) != 2:
        raise MeshParseError(f"{path}:1: header must be 'K m'")
    try:
        K, m = int(tokens[0]), int(tokens[1])
    except ValueError:
        raise MeshParseError(f"{path}:1: header must be 'K m'") from None
    labels = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            labels.append(int(line))
        except ValueError:
            raise MeshParseError(f"{path}:{lineno}: bad label") from None
    try:
        return Segmentation(labels=np.array(labels, dtype=np.int64), K=K, m=m)
    except MeshStructureError as exc:
        raise MeshParseError(f"{path}: {exc}") from None


SEQUENCE_MANIFEST = "seq.json"


def save_sequence(seq, out_dir, stem="frame"):
    """Write one OBJ per frame plus a ``seq.json`` manifest. Returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for n, frame in enumerate(seq.frames):
        name = f"{stem}_{n:04d}.obj"
        save_mesh(frame, os.path.join(out_dir, name))
        names.append(name)
    manifest = {"fps": seq.fps, "frames": names}
    mpath = os.path.join(out_dir, SEQUENCE_MANIFEST)
    with open(mpath, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return [os.path.join(out_dir, n) for n in names]


def load_sequence(seq_dir):
    mpath = os.path.join(seq_dir, SEQUENCE_MANIFEST)
    try:
        with open(mpath, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise MeshParseError(f"{seq_dir}: missing {SEQUENCE_MANIFEST}") from None
    except json.JSONDecodeError as exc:
        raise MeshParseError(f"{mpath}: {exc}") from None
    frames = [load_mesh(os.path.join(seq_dir, name))
              for name in manifest["frames"]]
    return MeshSequence(frames=frames, fps=float(manifest.get("fps", 24.0)))
