"""Polyline projection and disc-collision helpers shared by generation and metrics."""

from __future__ import annotations

import numpy as np

EGO_RADIUS = 1.0


def project_to_polyline(points: np.ndarray, poly: np.ndarray):
    """Project points [N, 2] onto polyline [M, 2].

    Returns (distance [N], arc length [N], signed lateral offset [N]); the
    lateral offset is positive to the left of the polyline direction.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    a = poly[:-1]
    seg = poly[1:] - a
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    rel = pts[:, None, :] - a[None, :, :]
    u = (rel * seg[None]).sum(-1) / (seg_len**2)[None]
    u = np.clip(u, 0.0, 1.0)
    foot = a[None] + u[..., None] * seg[None]
    diff = pts[:, None, :] - foot
    dist = np.hypot(diff[..., 0], diff[..., 1])
    j = dist.argmin(axis=1)
    idx = np.arange(len(pts))
    cross = seg[j, 0] * diff[idx, j, 1] - seg[j, 1] * diff[idx, j, 0]
    s = cum[j] + u[idx, j] * seg_len[j]
    return dist[idx, j], s, np.sign(cross) * dist[idx, j]


def polyline_arclength(poly: np.ndarray) -> np.ndarray:
    d = np.diff(poly, axis=0)
    return np.concatenate([[0.0], np.cumsum(np.hypot(d[:, 0], d[:, 1]))])


def point_at_arclength(poly: np.ndarray, s: float) -> tuple[np.ndarray, np.ndarray]:
    """Interpolated point and unit tangent at arc length ``s`` (clamped to the ends)."""
    cum = polyline_arclength(poly)
    s = min(max(s, 0.0), cum[-1])
    j = int(np.searchsorted(cum, s, side="right") - 1)
    j = min(max(j, 0), len(poly) - 2)
    seg = poly[j + 1] - poly[j]
    L = cum[j + 1] - cum[j]
    u = (s - cum[j]) / L
    return poly[j] + u * seg, seg / L


def interpolate_motion(start_xy: np.ndarray, xy: np.ndarray, dt: float, substeps: int = 10):
    """Densify start + T waypoints to ``substeps`` samples per step.

    Returns (points [T*substeps+1, 2], times [T*substeps+1]).
    """
    pts = np.vstack([np.asarray(start_xy, dtype=np.float64)[None, :2], xy[:, :2]])
    f = np.arange(substeps) / substeps
    seg = pts[:-1, None, :] + f[None, :, None] * (pts[1:] - pts[:-1])[:, None, :]
    dense = np.vstack([seg.reshape(-1, 2), pts[-1:]])
    times = np.arange(len(dense)) * (dt / substeps)
    return dense, times


def obstacle_clearance(points: np.ndarray, times: np.ndarray, centers: np.ndarray,
                       radii: np.ndarray, velocities: np.ndarray,
                       ego_radius: float = EGO_RADIUS) -> float:
    """Minimum gap between the ego disc and any (moving) obstacle disc."""
    if len(centers) == 0:
        return np.inf
    obs = centers[None, :, :] + times[:, None, None] * velocities[None, :, :]
    d = np.hypot(*(points[:, None, :] - obs).transpose(2, 0, 1))
    return float((d - radii[None, :] - ego_radius).min())
