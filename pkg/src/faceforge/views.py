"""Multi-view rendering of scans with self-occlusion.

Cameras sit on a hemisphere in front of the face (longitude = yaw,
latitude = pitch, both in degrees) looking at the centroid. Points the
camera cannot see are dropped by spherical-flipping hidden point removal:
flip every point radially outside a large sphere around the viewpoint and
keep exactly those on the convex hull of the flipped set plus the origin.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .core import PointCloud, apply_rigid
from .errors import DegenerateHull, InvalidCustomPose
from .io import save_cloud

DEFAULT_RADIUS_MM = 800.0
DEFAULT_RADIUS_EXPONENT = 2.0

# cross layout: yaw sweep at zero pitch plus a pitch sweep at zero yaw
_PAPER15_LONGITUDES = (-90, -60, -45, -30, -15, 0, 15, 30, 45, 60, 90)
_PAPER15_LATITUDES = (-30, -15, 15, 30)


@dataclass(frozen=True)
class CameraPose:
    longitude: float
    latitude: float
    radius: float = DEFAULT_RADIUS_MM

    def __post_init__(self):
        if not -90 <= self.longitude <= 90:
            raise InvalidCustomPose(f"longitude {self.longitude} outside [-90, 90]")
        if not -30 <= self.latitude <= 30:
            raise InvalidCustomPose(f"latitude {self.latitude} outside [-30, 30]")
        if self.longitude % 15 or self.latitude % 15:
            raise InvalidCustomPose("pose angles must be multiples of 15 degrees")
        if abs(self.longitude) == 75:
            raise InvalidCustomPose("longitude +/-75 is excluded from the layout")
        if self.radius <= 0:
            raise InvalidCustomPose("radius must be positive")

    def label(self) -> str:
        return f"lon{int(self.longitude):+03d}_lat{int(self.latitude):+03d}"


@dataclass(frozen=True)
class ViewCloud:
    cloud: PointCloud
    pose: CameraPose
    visible_indices: np.ndarray
    source_ref: str

    def __post_init__(self):
        idx = np.asarray(self.visible_indices, dtype=np.intp)
        if np.any(np.diff(idx) <= 0):
            raise ValueError("visible_indices must be strictly increasing")
        object.__setattr__(self, "visible_indices", idx)


def camera_poses(layout="paper15", radius: float = DEFAULT_RADIUS_MM) -> list[CameraPose]:
    """The 15-pose hemisphere layout, or validated custom (lon, lat) pairs."""
    if layout == "paper15":
        poses = [CameraPose(lon, 0.0, radius) for lon in _PAPER15_LONGITUDES]
        poses += [CameraPose(0.0, lat, radius) for lat in _PAPER15_LATITUDES]
        return poses
    return [CameraPose(lon, lat, radius) for lon, lat in layout]


def hidden_point_removal(cloud: PointCloud, viewpoint,
                         radius_exponent: float = DEFAULT_RADIUS_EXPONENT) -> np.ndarray:
    """Indices of points visible from `viewpoint` (spherical flipping).

    With the cloud translated so the viewpoint is the origin, each point p
    maps to p + 2(R - |p|) p/|p| with R = 10^radius_exponent * max|p|; a
    point is visible iff it lands on the convex hull of the flipped set
    plus the origin. Degenerate hulls (e.g. coplanar input) fall back to
    marking everything visible, with a warning.
    """
    vp = np.asarray(viewpoint, dtype=np.float64).reshape(3)
    q = cloud.points - vp
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("viewpoint coincides with a cloud point")

    big_r = 10.0 ** radius_exponent * norms.max()
    flipped = q + 2.0 * (big_r - norms)[:, None] * (q / norms[:, None])
    padded = np.vstack([flipped, np.zeros(3)])
    try:
        hull = ConvexHull(padded)
    except QhullError:
        warnings.warn(
            "convex hull failed (degenerate cloud); marking all points visible",
            DegenerateHull,
        )
        return np.arange(len(cloud), dtype=np.intp)
    visible = hull.vertices[hull.vertices < len(cloud)]
    return np.sort(visible).astype(np.intp)


def camera_rotation(pose: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """(R, direction): world->camera rotation rows and the unit vector from
    the target toward the camera. Camera frame: x right, y up, z toward
    the camera, so geometry in front of the camera has negative z."""
    lon = np.deg2rad(pose.longitude)
    lat = np.deg2rad(pose.latitude)
    back = np.array([
        np.sin(lon) * np.cos(lat),
        np.sin(lat),
        np.cos(lon) * np.cos(lat),
    ])
    up_world = np.array([0.0, 1.0, 0.0])
    right = np.cross(up_world, back)
    right /= np.linalg.norm(right)
    up = np.cross(back, right)
    return np.vstack([right, up, back]), back


def render_view(scan: PointCloud, pose: CameraPose,
                radius_exponent: float = DEFAULT_RADIUS_EXPONENT,
                source_ref: str = "") -> ViewCloud:
    """Rotate a scan into the camera frame and drop self-occluded points."""
    center = scan.centroid()
    rot, back = camera_rotation(pose)
    cam_pos = center + pose.radius * back

    visible = hidden_point_removal(scan, cam_pos, radius_exponent)
    in_camera = apply_rigid(scan, rot, -rot @ cam_pos)
    return ViewCloud(
        cloud=in_camera.select(visible),
        pose=pose,
        visible_indices=visible,
        source_ref=source_ref,
    )


def save_view(view: ViewCloud, outdir, stem: str) -> Path:
    """PLY of the visible camera-frame points plus a JSON pose sidecar."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    ply = outdir / f"{stem}.ply"
    save_cloud(view.cloud, ply)
    sidecar = {
        "scan_id": view.source_ref,
        "longitude": view.pose.longitude,
        "latitude": view.pose.latitude,
        "radius": view.pose.radius,
        "visible_count": int(len(view.visible_indices)),
    }
    with open(outdir / f"{stem}.json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return ply
