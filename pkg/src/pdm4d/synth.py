"""Synthetic meshes and clips: spheres, tori, genus-g slabs, articulated arms.

The two-segment arm family drives most end-to-end tests: every pose shares
one topology, so the identity map is ground-truth correspondence between
any pair of frames.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from .mesh import MeshSequence, TriangleMesh

# ---------------------------------------------------------------------------
# Primitive closed surfaces


def icosphere(subdivisions=2, radius=1.0, center=(0.0, 0.0, 0.0)):
    """Subdivided icosahedron with vertices snapped to the sphere."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts[0])
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        verts, faces = _subdivide_on_sphere(verts, faces)
    verts = verts * radius + np.asarray(center, dtype=np.float64)
    return TriangleMesh(verts, faces)


def _subdivide_on_sphere(verts, faces):
    cache = {}
    verts = list(verts)

    def midpoint(a, b):
        key = (a, b) if a < b else (b, a)
        if key not in cache:
            m = verts[a] + verts[b]
            verts.append(m / np.linalg.norm(m))
            cache[key] = len(verts) - 1
        return cache[key]

    out = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
    return np.array(verts), np.array(out, dtype=np.int64)


def torus_mesh(n_major=24, n_minor=12, r_major=1.0, r_minor=0.35,
               center=(0.0, 0.0, 0.0)):
    """Closed torus (genus 1) from an n_major x n_minor quad grid."""
    u = 2.0 * np.pi * np.arange(n_major) / n_major
    v = 2.0 * np.pi * np.arange(n_minor) / n_minor
    uu, vv = np.meshgrid(u, v, indexing="ij")
    ring = r_major + r_minor * np.cos(vv)
    verts = np.stack([ring * np.cos(uu), ring * np.sin(uu),
                      r_minor * np.sin(vv)], axis=-1).reshape(-1, 3)
    verts += np.asarray(center, dtype=np.float64)
    faces = []
    for i in range(n_major):
        for j in range(n_minor):
            a = i * n_minor + j
            b = ((i + 1) % n_major) * n_minor + j
            c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
            d = i * n_minor + (j + 1) % n_minor
            faces.extend([[a, b, c], [a, c, d]])
    return TriangleMesh(verts, np.array(faces, dtype=np.int64))


def slab_with_holes(holes, cell=1.0):
    """Boundary surface of a voxel slab pierced by ``holes`` square shafts.

    Each through-hole raises the genus by one, giving a deterministic
    genus-``holes`` closed manifold.
    """
    if holes < 0:
        raise ValueError("holes must be >= 0")
    nx = max(1, 2 * holes + 1)
    ny = 3 if holes else 1
    occ = np.ones((nx, ny, 1), dtype=bool)
    for h in range(holes):
        occ[2 * h + 1, 1, 0] = False
    return _voxel_surface(occ, cell)


def _voxel_surface(occ, cell):
    vid = {}
    verts = []

    def corner(ix, iy, iz):
        key = (ix, iy, iz)
        if key not in vid:
            vid[key] = len(verts)
            verts.append((ix * cell, iy * cell, iz * cell))
        return vid[key]

    # quad corner offsets for each of the 6 voxel faces, wound consistently
    face_tables = {
        (1, 0, 0): [(1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)],
        (-1, 0, 0): [(0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)],
        (0, 1, 0): [(0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)],
        (0, -1, 0): [(0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)],
        (0, 0, 1): [(0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)],
        (0, 0, -1): [(0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)],
    }
    nx, ny, nz = occ.shape
    faces = []
    for ix in range(nx):
        for iy in range(ny):
            for iz in range(nz):
                if not occ[ix, iy, iz]:
                    continue
                for (dx, dy, dz), quad in face_tables.items():
                    jx, jy, jz = ix + dx, iy + dy, iz + dz
                    inside = 0 <= jx < nx and 0 <= jy < ny and 0 <= jz < nz
                    if inside and occ[jx, jy, jz]:
                        continue
                    ids = [corner(ix + ox, iy + oy, iz + oz)
                           for ox, oy, oz in quad]
                    faces.append([ids[0], ids[1], ids[2]])
                    faces.append([ids[0], ids[2], ids[3]])
    return TriangleMesh(np.array(verts, dtype=np.float64),
                        np.array(faces, dtype=np.int64))


def random_convex_mesh(rng, n_points=40, scale=(1.0, 1.0, 1.0),
                       center=(0.0, 0.0, 0.0)):
    """Convex hull of Gaussian points: a random closed convex manifold."""
    pts = rng.normal(size=(n_points, 3)) * np.asarray(scale, dtype=np.float64)
    hull = ConvexHull(pts)
    used = np.unique(hull.simplices)
    remap = np.full(n_points, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    verts = pts[used] + np.asarray(center, dtype=np.float64)
    return TriangleMesh(verts, remap[hull.simplices])


def merge_meshes(a, b):
    """Disjoint union of two meshes (face indices of b shifted)."""
    verts = np.concatenate([a.vertices, b.vertices])
    faces = np.concatenate([a.faces, b.faces + a.vertex_count])
    return TriangleMesh(verts, faces)


def rotation_matrix(axis, angle):
    """Rodrigues rotation matrix about a unit-normalized axis."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def rotate_mesh(mesh, axis, angle, pivot=(0.0, 0.0, 0.0)):
    """Mesh rigidly rotated about an axis through ``pivot``."""
    R = rotation_matrix(axis, angle)
    pivot = np.asarray(pivot, dtype=np.float64)
    verts = (mesh.vertices - pivot) @ R.T + pivot
    return TriangleMesh(verts, mesh.faces)


# ---------------------------------------------------------------------------
# Articulated two-segment arm


@dataclass
class ArmParams:
    """Rest-shape parameters for the two-segment articulated arm.

    The arm is a capped tube along +z: segment one spans [0, len1], segment
    two spans [len1, len1+len2] and bends at the elbow. ``bump_seed`` fixes
    a per-vertex radial detail pattern that breaks the tube's symmetry and
    is shared by every pose of one body.
    """

    rings: int = 40
    ring_n: int = 14
    radius: float = 0.09
    len1: float = 0.6
    len2: float = 0.6
    blend: float = 0.08
    bump_scale: float = 0.03
    bump_seed: int = 7

    def vertex_count(self):
        return self.rings * self.ring_n + 2


def arm_params_for_vertex_count(target, **kw):
    """ArmParams whose tube hits ``target`` vertices exactly (rings*ring_n+2)."""
    best = None
    for ring_n in range(8, 40):
        body = target - 2
        if body % ring_n == 0 and body // ring_n >= 4:
            rings = body // ring_n
            # prefer aspect ratios with several rings per segment
            score = abs(rings / ring_n - 5.0)
            if best is None or score < best[0]:
                best = (score, rings, ring_n)
    if best is None:
        raise ValueError(f"no (rings, ring_n) factorization for V={target}")
    return ArmParams(rings=best[1], ring_n=best[2], **kw)


def _tube_rest(rings, ring_n, radius, length, bump_scale, bump_seed):
    """Capped tube along +z with a fixed per-vertex radial detail pattern."""
    z = np.linspace(0.0, length, rings)
    psi = 2.0 * np.pi * np.arange(ring_n) / ring_n
    rng = np.random.default_rng(bump_seed)
    bump = 1.0 + bump_scale * rng.standard_normal((rings, ring_n))
    r = radius * bump
    zz = np.repeat(z, ring_n)
    pp = np.tile(psi, rings)
    verts = np.stack([(r.ravel()) * np.cos(pp), (r.ravel()) * np.sin(pp), zz],
                     axis=-1)
    bottom = np.array([[0.0, 0.0, -0.6 * radius]])
    top = np.array([[0.0, 0.0, length + 0.6 * radius]])
    verts = np.concatenate([verts, bottom, top])

    faces = []
    n = ring_n
    for k in range(rings - 1):
        for j in range(n):
            a = k * n + j
            b = k * n + (j + 1) % n
            c = (k + 1) * n + (j + 1) % n
            d = (k + 1) * n + j
            faces.extend([[a, b, c], [a, c, d]])
    bot_idx = rings * n
    top_idx = bot_idx + 1
    for j in range(n):
        faces.append([bot_idx, (j + 1) % n, j])
        base = (rings - 1) * n
        faces.append([top_idx, base + j, base + (j + 1) % n])
    return verts, np.array(faces, dtype=np.int64)


def _arm_rest(params):
    return _tube_rest(params.rings, params.ring_n, params.radius,
                      params.len1 + params.len2, params.bump_scale,
                      params.bump_seed)


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _rot_x(points, pivot_z, angle):
    c, s = np.cos(angle), np.sin(angle)
    y = points[:, 1]
    z = points[:, 2] - pivot_z
    out = points.copy()
    out[:, 1] = c * y - s * z
    out[:, 2] = s * y + c * z + pivot_z
    return out


def arm_pose(params, shoulder=0.0, elbow=0.0):
    """Mesh for one pose. Elbow bend blends smoothly across the joint."""
    verts, faces = _arm_rest(params)
    if elbow:
        w = _smoothstep((verts[:, 2] - (params.len1 - params.blend))
                        / (2.0 * params.blend))
        c, s = np.cos(elbow * w), np.sin(elbow * w)
        y = verts[:, 1]
        z = verts[:, 2] - params.len1
        verts = verts.copy()
        verts[:, 1] = c * y - s * z
        verts[:, 2] = s * y + c * z + params.len1
    if shoulder:
        verts = _rot_x(verts, 0.0, shoulder)
    return TriangleMesh(verts, faces)


def arm_clip(params, n_frames, shoulder_amp=0.35, shoulder_freq=1.0,
             elbow_amp=0.9, elbow_freq=2.0, phase=0.7, fps=24.0):
    """Swinging-arm sequence with identity ground-truth correspondence."""
    frames = []
    for t in range(n_frames):
        sh = shoulder_amp * np.sin(2.0 * np.pi * shoulder_freq * t / n_frames)
        el = elbow_amp * np.sin(2.0 * np.pi * elbow_freq * t / n_frames + phase)
        frames.append(arm_pose(params, shoulder=sh, elbow=el))
    return MeshSequence(frames=frames, fps=fps)


def rigid_sequence(mesh, offsets, fps=24.0):
    """Sequence of rigid translations of one mesh."""
    frames = [mesh.translated(off) for off in offsets]
    return MeshSequence(frames=frames, fps=fps)


# ---------------------------------------------------------------------------
# Articulated many-joint chain


@dataclass
class ChainParams:
    """Rest-shape parameters for a tube with several bending joints.

    The tube spans ``(joints + 1) * seg_len`` along +z with a joint every
    ``seg_len``; each joint bends about the x axis with a smoothstep blend,
    so distal geometry moves rigidly with its segment. More joints give the
    motion a higher-dimensional span of temporal modes while every vertex
    trajectory stays a smooth function of its rest position on the tube.
    """

    joints: int = 7
    seg_len: float = 0.5
    rings: int = 111
    ring_n: int = 18
    radius: float = 0.2
    blend: float = 0.12
    bump_scale: float = 0.02
    bump_seed: int = 7

    def vertex_count(self):
        return self.rings * self.ring_n + 2

    def __post_init__(self):
        if self.joints < 1:
            raise ValueError("chain needs at least one joint")
        if not 0.0 < 2.0 * self.blend < self.seg_len:
            raise ValueError("blend must stay below half a segment length")


def chain_params_for_vertex_count(target, **kw):
    """ChainParams whose tube hits ``target`` vertices exactly."""
    best = None
    for ring_n in range(8, 40):
        body = target - 2
        if body % ring_n == 0 and body // ring_n >= 8:
            rings = body // ring_n
            score = abs(rings / ring_n - 6.0)
            if best is None or score < best[0]:
                best = (score, rings, ring_n)
    if best is None:
        raise ValueError(f"no (rings, ring_n) factorization for V={target}")
    return ChainParams(rings=best[1], ring_n=best[2], **kw)


def chain_pose(params, angles, twist=0.0):
    """Mesh for one pose of the chain; ``angles`` has one entry per joint.

    Joints are applied distal-first, so each pivot point is still at its
    rest location when its turn comes and already-bent geometry above it
    moves rigidly — plain forward kinematics with blended joints. ``twist``
    rolls the tube about its long axis, growing linearly from the base to
    the full angle at the tip (applied in rest coordinates, before
    bending), like a forearm pronation.
    """
    angles = np.asarray(angles, dtype=np.float64)
    if angles.shape != (params.joints,):
        raise ValueError(f"expected {params.joints} joint angles, "
                         f"got {angles.shape}")
    verts, faces = _tube_rest(params.rings, params.ring_n, params.radius,
                              (params.joints + 1) * params.seg_len,
                              params.bump_scale, params.bump_seed)
    rest_z = verts[:, 2].copy()
    out = verts.copy()
    if twist:
        length = (params.joints + 1) * params.seg_len
        roll = twist * np.clip(rest_z / length, 0.0, 1.0)
        c, s = np.cos(roll), np.sin(roll)
        x, y = out[:, 0].copy(), out[:, 1].copy()
        out[:, 0] = c * x - s * y
        out[:, 1] = s * x + c * y
    for j in range(params.joints - 1, -1, -1):
        pivot = (j + 1) * params.seg_len
        w = _smoothstep((rest_z - (pivot - params.blend))
                        / (2.0 * params.blend))
        a = angles[j] * w
        c, s = np.cos(a), np.sin(a)
        y = out[:, 1].copy()
        z = out[:, 2] - pivot
        out[:, 1] = c * y - s * z
        out[:, 2] = s * y + c * z + pivot
    return TriangleMesh(out, faces)


def chain_angle_tracks(params, n_frames, amp=0.45, harmonics=3, seed=0):
    """Per-joint angle histories mixing a few incommensurate sinusoids."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_frames) / n_frames
    tracks = np.zeros((params.joints, n_frames))
    for j in range(params.joints):
        freqs = rng.integers(1, 7, size=harmonics)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=harmonics)
        weights = rng.uniform(0.4, 1.0, size=harmonics)
        weights *= amp / weights.sum()
        for f, p, wgt in zip(freqs, phases, weights):
            tracks[j] += wgt * np.sin(2.0 * np.pi * f * t + p)
    return tracks


def chain_clip(params, n_frames, amp=0.45, harmonics=3, seed=0,
               twist_amp=0.0, fps=24.0):
    """Many-joint articulated sequence with identity correspondence.

    ``twist_amp`` adds an axial roll whose tip angle follows its own
    two-sinusoid history; every height along the tube then sweeps a
    different fraction of that angle, which no small linear basis of
    temporal modes captures well.
    """
    tracks = chain_angle_tracks(params, n_frames, amp, harmonics, seed)
    t = np.arange(n_frames) / n_frames
    rng = np.random.default_rng(seed + 1)
    twist = np.zeros(n_frames)
    if twist_amp:
        for _ in range(2):
            f = rng.integers(1, 5)
            p = rng.uniform(0.0, 2.0 * np.pi)
            twist += rng.uniform(0.5, 1.0) * np.sin(2.0 * np.pi * f * t + p)
        twist *= twist_amp / np.abs(twist).max()
    frames = [chain_pose(params, tracks[:, n], twist=twist[n])
              for n in range(n_frames)]
    return MeshSequence(frames=frames, fps=fps)
