"""Software rasterizer producing panoramic depth maps, plus PDM file I/O.

Triangles are projected per vertex and filled with barycentric interpolation
of depth and 3D position over pixel centers, against a per-pixel min-depth
z-buffer (depth ties keep the lower triangle index). Triangles spanning the
azimuth seam are unwrapped past the image edge and emitted modulo W, which
covers exactly the same pixels as splitting at the seam. The projection is
nonlinear, so triangles covering a wide angular extent (large faces, or any
face passing near the camera axis) are subdivided at 3D edge midpoints until
each piece is small enough for straight-edge interpolation to hold.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .camera import CMCamera, pixel_rays, project_points, check_inside_ring
from .errors import CameraMismatchError, FormatError

LABEL_INVALID = 65535  # label PNG sentinel for invalid pixels

# subdivision kicks in above these angular extents (fractions of the image
# span; the projection is close enough to linear below them)
_MAX_COL_SPAN_FRAC = 1.0 / 32.0
_MAX_ROW_SPAN_FRAC = 1.0 / 8.0
_MAX_SUBDIV_DEPTH = 12


@dataclass
class PDMImage:
    """One rendered panoramic depth map.

    ``depth`` holds 0 at invalid pixels; ``point_map`` the interpolated
    surface point per valid pixel; ``face_index`` the winning triangle
    (-1 where invalid). ``label_map`` uses -1 where invalid or absent.
    """

    camera: CMCamera
    depth: np.ndarray
    valid: np.ndarray
    point_map: np.ndarray
    face_index: np.ndarray
    label_map: np.ndarray = None

    @property
    def shape(self):
        return self.depth.shape


def render_pdm(cam, mesh, segmentation=None):
    """Rasterize a mesh into a PDM. The mesh must sit inside the ring."""
    check_inside_ring(cam, mesh)
    H, W = cam.height, cam.width
    zbuf = np.full((H, W), np.inf)
    fbuf = np.full((H, W), -1, dtype=np.int64)
    pbuf = np.zeros((H, W, 3))

    if mesh.face_count:
        cols, rows, depths, _ = project_points(cam, mesh.vertices)
        verts = mesh.vertices
        max_span = (W * _MAX_COL_SPAN_FRAC, H * _MAX_ROW_SPAN_FRAC)
        for fi in range(mesh.face_count):
            i0, i1, i2 = mesh.faces[fi]
            tri = (
                (cols[i0], rows[i0], depths[i0], verts[i0]),
                (cols[i1], rows[i1], depths[i1], verts[i1]),
                (cols[i2], rows[i2], depths[i2], verts[i2]),
            )
            _raster_tri(cam, tri, fi, zbuf, fbuf, pbuf, max_span,
                        _MAX_SUBDIV_DEPTH)

    valid = np.isfinite(zbuf)
    depth = np.where(valid, zbuf, 0.0)
    pdm = PDMImage(camera=cam, depth=depth, valid=valid, point_map=pbuf,
                   face_index=np.where(valid, fbuf, -1))
    if segmentation is not None:
        pdm.label_map = label_map_for(pdm, mesh, segmentation.labels)
    return pdm


def _unwrap(c0, c1, c2, width):
    cs = np.array([c0, c1, c2])
    if cs.max() - cs.min() > 0.5 * width:
        cs = np.where(cs < 0.5 * width, cs + width, cs)
    return cs


def _raster_tri(cam, tri, face_id, zbuf, fbuf, pbuf, max_span, depth_left):
    (c0, r0, d0, v0), (c1, r1, d1, v1), (c2, r2, d2, v2) = tri
    W = cam.width
    cs = _unwrap(c0, c1, c2, W)
    rspan = max(r0, r1, r2) - min(r0, r1, r2)
    if cs.max() - cs.min() > max_span[0] or rspan > max_span[1]:
        if depth_left <= 0:
            # residual sliver around the camera axis; area ~ 4^-depth of the
            # original triangle, safely below pixel size
            return
        mids = [0.5 * (v0 + v1), 0.5 * (v1 + v2), 0.5 * (v2 + v0)]
        mc, mr, md, _ = project_points(cam, np.asarray(mids))
        m01 = (mc[0], mr[0], md[0], mids[0])
        m12 = (mc[1], mr[1], md[1], mids[1])
        m20 = (mc[2], mr[2], md[2], mids[2])
        a, b, c = tri
        for sub in ((a, m01, m20), (m01, b, m12), (m20, m12, c),
                    (m01, m12, m20)):
            _raster_tri(cam, sub, face_id, zbuf, fbuf, pbuf, max_span,
                        depth_left - 1)
        return

    H = zbuf.shape[0]
    x0, x1, x2 = cs
    den = (r1 - r2) * (x0 - x2) + (x2 - x1) * (r0 - r2)
    if den == 0.0:
        return
    clo = int(np.floor(min(x0, x1, x2) - 0.5))
    chi = int(np.ceil(max(x0, x1, x2) - 0.5))
    rlo = max(0, int(np.floor(min(r0, r1, r2) - 0.5)))
    rhi = min(H - 1, int(np.ceil(max(r0, r1, r2) - 0.5)))
    if rlo > rhi:
        return
    ci = np.arange(clo, chi + 1)
    ri = np.arange(rlo, rhi + 1)
    px = ci[None, :] + 0.5
    py = ri[:, None] + 0.5
    l0 = ((r1 - r2) * (px - x2) + (x2 - x1) * (py - r2)) / den
    l1 = ((r2 - r0) * (px - x2) + (x0 - x2) * (py - r2)) / den
    l2 = 1.0 - l0 - l1
    inside = (l0 >= 0.0) & (l1 >= 0.0) & (l2 >= 0.0)
    if not inside.any():
        return
    d = l0 * d0 + l1 * d1 + l2 * d2
    cwrapped = np.mod(ci, zbuf.shape[1])
    cgrid = np.broadcast_to(cwrapped[None, :], inside.shape)
    rgrid = np.broadcast_to(ri[:, None], inside.shape)
    rs = rgrid[inside]
    csel = cgrid[inside]
    dsel = d[inside]
    better = dsel < zbuf[rs, csel]
    if not better.any():
        return
    rs, csel, dsel = rs[better], csel[better], dsel[better]
    w0 = l0[inside][better]
    w1 = l1[inside][better]
    w2 = l2[inside][better]
    zbuf[rs, csel] = dsel
    fbuf[rs, csel] = face_id
    pbuf[rs, csel] = (w0[:, None] * v0 + w1[:, None] * v1 + w2[:, None] * v2)


def label_map_for(pdm, mesh, labels):
    """Per-pixel label of the winning triangle's nearest vertex.

    Works for any vertex labeling, so one render serves several
    segmentations. Ties pick the lowest vertex index. Invalid pixels get -1.
    """
    labels = np.asarray(labels, dtype=np.int64)
    out = np.full(pdm.shape, -1, dtype=np.int64)
    v = pdm.valid
    if not v.any():
        return out
    fidx = pdm.face_index[v]
    tri_verts = mesh.faces[fidx]                      # (P, 3) vertex ids
    pts = pdm.point_map[v]                            # (P, 3)
    d = np.linalg.norm(mesh.vertices[tri_verts] - pts[:, None, :], axis=2)
    min_d = d.min(axis=1, keepdims=True)
    tied = d == min_d
    nearest = np.where(tied, tri_verts, np.iinfo(np.int64).max).min(axis=1)
    out[v] = labels[nearest]
    return out


def reproject(cam, pdm):
    """3D points of the valid pixels in row-major order.

    Returns ``(points, pixels)`` where ``pixels`` is the (row, col) index of
    each point. Raises when the PDM was rendered with a different camera.
    """
    if pdm.camera != cam:
        raise CameraMismatchError(
            "PDM was rendered with a different camera than the one supplied")
    pix = np.argwhere(pdm.valid)
    return pdm.point_map[pdm.valid], pix


# ---------------------------------------------------------------------------
# File I/O: PFM depth + JSON sidecar + 16-bit PNG labels

_SIDECAR_FORMAT = "pdm-sidecar/1"


def save_pdm(pdm, stem):
    """Write ``{stem}.pfm``, ``{stem}.json`` and, when labels are present,
    ``{stem}_labels.png``. Returns the list of paths written."""
    paths = []
    pfm_path = f"{stem}.pfm"
    _write_pfm(pfm_path, pdm.depth)
    paths.append(pfm_path)
    sidecar = {
        "format": _SIDECAR_FORMAT,
        "camera": pdm.camera.to_dict(),
    }
    json_path = f"{stem}.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    paths.append(json_path)
    if pdm.label_map is not None:
        png_path = f"{stem}_labels.png"
        arr = np.where(pdm.label_map < 0, LABEL_INVALID, pdm.label_map)
        Image.fromarray(arr.astype(np.uint16)).save(png_path)
        paths.append(png_path)
    return paths


def load_pdm(stem):
    """Read a PDM written by ``save_pdm``.

    The point map is rebuilt in closed form from depth and camera (pixel
    ray times stored depth), which matches the rendered interpolation to
    within the interpolation tolerance. The face index is lost (-1).
    """
    depth = _read_pfm(f"{stem}.pfm")
    with open(f"{stem}.json", "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    if sidecar.get("format") != _SIDECAR_FORMAT:
        raise FormatError(f"{stem}.json: unknown sidecar format")
    cam = CMCamera.from_dict(sidecar["camera"])
    if depth.shape != (cam.height, cam.width):
        raise FormatError(
            f"{stem}.pfm: image is {depth.shape[::-1]}, camera says "
            f"{cam.width}x{cam.height}")
    valid = depth > 0.0
    point_map = np.zeros(depth.shape + (3,))
    if valid.any():
        rows, cols = np.nonzero(valid)
        origins, dirs = pixel_rays(cam, rows, cols)
        point_map[rows, cols] = origins + depth[valid][:, None] * dirs
    label_path = f"{stem}_labels.png"
    label_map = None
    if os.path.exists(label_path):
        arr = np.asarray(Image.open(label_path), dtype=np.int64)
        label_map = np.where(arr == LABEL_INVALID, -1, arr)
    return PDMImage(camera=cam, depth=depth, valid=valid,
                    point_map=point_map,
                    face_index=np.full(depth.shape, -1, dtype=np.int64),
                    label_map=label_map)


def _write_pfm(path, depth):
    H, W = depth.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{W} {H}\n".encode("ascii"))
        fh.write(b"-1.0\n")  # negative scale marks little-endian
        fh.write(np.flipud(depth).astype("<f4").tobytes())


def _read_pfm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"Pf":
            raise FormatError(f"{path}: not a grayscale PFM")
        try:
            W, H = (int(t) for t in fh.readline().split())
            scale = float(fh.readline())
        except ValueError:
            raise FormatError(f"{path}: malformed PFM header") from None
        count = W * H
        dtype = "<f4" if scale < 0 else ">f4"
        raw = fh.read(count * 4)
        if len(raw) != count * 4:
            raise FormatError(f"{path}: truncated PFM payload")
        data = np.frombuffer(raw, dtype=dtype)
    return np.flipud(data.reshape(H, W)).astype(np.float64)
