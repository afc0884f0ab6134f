"""Inward-viewing concentric ring camera: projection model and default rig.

A camera is a full circle of viewpoints at radius R around a center, tilted
by an inclination angle above the horizontal plane of the world-up axis.
Every image column is one azimuth: the viewpoint for a 3D point is the ring
point sharing the point's azimuth, so each point projects to exactly one
pixel. The row encodes the signed in-plane angle between the ray to the ring
center and the ray to the point; depth is the Euclidean distance from the
ring point (which makes unprojection closed-form: see ``pixel_rays``).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ProjectionError, RingIntersectionError

DEFAULT_INCLINATIONS_DEG = (0.0, 20.0, 30.0, 40.0, 50.0, 60.0)
DEFAULT_RADIUS_SCALE = 2.5
DEFAULT_HALF_FOV_DEG = 30.0


@dataclass(frozen=True)
class CMCamera:
    """One ring camera producing a W x H panoramic depth map."""

    center: tuple
    radius: float
    inclination_deg: float
    width: int
    height: int
    half_fov_deg: float = DEFAULT_HALF_FOV_DEG
    up: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "center",
                           tuple(float(c) for c in self.center))
        object.__setattr__(self, "up", tuple(float(c) for c in self.up))
        if self.radius <= 0:
            raise ValueError("ring radius must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        if not 0 < self.half_fov_deg < 90:
            raise ValueError("half_fov_deg must lie in (0, 90)")
        if np.linalg.norm(self.up) == 0:
            raise ValueError("up axis must be nonzero")

    @property
    def inclination(self):
        return math.radians(self.inclination_deg)

    @property
    def half_fov(self):
        return math.radians(self.half_fov_deg)

    def frame(self):
        """Deterministic orthonormal frame (e1, e2, w) with w = unit up."""
        w = np.asarray(self.up, dtype=np.float64)
        w = w / np.linalg.norm(w)
        # reference axis: the coordinate axis least aligned with up; for the
        # default z-up this yields e1 = x, e2 = y, so azimuth is the plain
        # atan2(y - cy, x - cx) convention
        a = np.zeros(3)
        a[int(np.argmin(np.abs(w)))] = 1.0
        e1 = a - (a @ w) * w
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(w, e1)
        return e1, e2, w

    def ring_points(self, azimuths):
        """3D viewpoints p(alpha) for an array of azimuths."""
        e1, e2, w = self.frame()
        az = np.atleast_1d(np.asarray(azimuths, dtype=np.float64))
        ct, st = math.cos(self.inclination), math.sin(self.inclination)
        p = (np.asarray(self.center)
             + self.radius * (ct * np.cos(az)[:, None] * e1
                              + ct * np.sin(az)[:, None] * e2
                              + st * w))
        return p

    def to_dict(self):
        return {
            "center": list(self.center),
            "radius": self.radius,
            "inclination_deg": self.inclination_deg,
            "width": self.width,
            "height": self.height,
            "half_fov_deg": self.half_fov_deg,
            "up": list(self.up),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(center=tuple(d["center"]), radius=float(d["radius"]),
                   inclination_deg=float(d["inclination_deg"]),
                   width=int(d["width"]), height=int(d["height"]),
                   half_fov_deg=float(d["half_fov_deg"]),
                   up=tuple(d.get("up", (0.0, 0.0, 1.0))))


def project_points(cam, points):
    """Project 3D points through the ring camera.

    Returns ``(cols, rows, depths, in_frame)``. Columns are real-valued in
    [0, W); rows are real-valued and may fall outside [0, H] (flagged via
    ``in_frame``, never clamped). Raises ``ProjectionError`` for points on
    the camera axis, where azimuth is undefined.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    e1, e2, w = cam.frame()
    q = pts - np.asarray(cam.center)
    x = q @ e1
    y = q @ e2
    z = q @ w
    rho = np.hypot(x, y)
    if (rho == 0.0).any():
        bad = int(np.flatnonzero(rho == 0.0)[0])
        raise ProjectionError(
            f"point {bad} lies on the camera axis; azimuth undefined")
    phi = np.arctan2(y, x)
    phi = np.where(phi < 0.0, phi + 2.0 * np.pi, phi)
    # guard against arctan2 returning exactly 2*pi after the wrap
    phi = np.where(phi >= 2.0 * np.pi, 0.0, phi)
    cols = phi * (cam.width / (2.0 * np.pi))

    ct, st = math.cos(cam.inclination), math.sin(cam.inclination)
    # signed in-plane angle at p(phi) between the ray to the center and the
    # ray to the point; positive beta looks below the ring's view center
    du = rho - cam.radius * ct
    dw = z - cam.radius * st
    beta = np.arctan2(st * rho - ct * z, cam.radius - ct * rho - st * z)
    rows = 0.5 * cam.height * (1.0 + beta / cam.half_fov)
    depths = np.hypot(du, dw)
    in_frame = np.abs(beta) <= cam.half_fov
    return cols, rows, depths, in_frame


def project_vertex(cam, point):
    """Scalar projection: ``(column, row, depth)`` for one 3D point."""
    cols, rows, depths, _ = project_points(cam, np.asarray(point)[None, :])
    return float(cols[0]), float(rows[0]), float(depths[0])


def pixel_rays(cam, rows, cols):
    """Ray origin and unit direction for pixel centers.

    ``rows``/``cols`` are integer pixel indices; the ray passes through the
    pixel center. This is the exact inverse of the projection: a point at
    ``origin + depth * direction`` projects back to that pixel.
    """
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    phi = (cols + 0.5) * (2.0 * np.pi / cam.width)
    beta = ((rows + 0.5) * 2.0 / cam.height - 1.0) * cam.half_fov
    e1, e2, w = cam.frame()
    ct, st = math.cos(cam.inclination), math.sin(cam.inclination)
    origins = cam.ring_points(phi)
    # unit vector toward the ring center, rotated by beta in the meridian
    # plane (u = horizontal radial direction, w = up)
    d0u, d0w = -ct, -st
    cb, sb = np.cos(beta), np.sin(beta)
    du = cb * d0u - sb * d0w
    dw = sb * d0u + cb * d0w
    radial = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
    dirs = du[:, None] * radial + dw[:, None] * w
    return origins, dirs


def check_inside_ring(cam, mesh):
    """Raise unless every vertex lies strictly inside the ring sphere."""
    d = np.linalg.norm(mesh.vertices - np.asarray(cam.center), axis=1)
    if len(d) and d.max() >= cam.radius:
        raise RingIntersectionError(
            f"mesh reaches {d.max():.6g} from the ring center; "
            f"ring radius is {cam.radius:.6g}")


def default_rig(mesh, width=512, height=512,
                half_fov_deg=DEFAULT_HALF_FOV_DEG,
                radius_scale=DEFAULT_RADIUS_SCALE,
                inclinations_deg=DEFAULT_INCLINATIONS_DEG):
    """Ring cameras around the mesh bounding sphere, one per inclination.

    The ring center is the bounding-sphere center and the radius is
    ``radius_scale`` times the bounding-sphere radius.
    """
    center, r = mesh.bounding_sphere()
    return [CMCamera(center=tuple(center), radius=radius_scale * r,
                     inclination_deg=float(th), width=width, height=height,
                     half_fov_deg=half_fov_deg)
            for th in inclinations_deg]
