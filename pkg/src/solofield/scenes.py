"""Analytic desk-scale scenes: ground truth for oracle providers and metrics.

The textured sphere is a constant-density ball with a soft edge and a smooth
direction-dependent albedo. Its renders use the same emission-absorption
quadrature as the engine but query closed-form fields at high sample counts,
so they serve as independent targets for training and evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .render import Camera, RenderOutput, camera_from_spherical, camera_ray_batch, composite


@dataclass
class SphereScene:
    radius: float = 0.25
    peak_density: float = 40.0
    edge_width: float = 0.012
    color_amp: float = 0.3
    background: float = 0.5
    bbox_half_extent: float = 0.375

    def density(self, points: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(points, axis=-1)
        x = (self.radius - r) / self.edge_width
        return self.peak_density / (1.0 + np.exp(-np.clip(x, -60, 60)))

    def albedo(self, points: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(points, axis=-1, keepdims=True)
        unit = np.divide(points, r, out=np.zeros_like(points), where=r > 1e-12)
        return 0.5 + self.color_amp * unit

    def surface_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v * self.radius


def render_scene(scene: SphereScene, camera: Camera, n_samples: int = 384) -> RenderOutput:
    """Reference-quality render of the analytic scene (no jitter)."""
    origin, dirs, near, far, hit = camera_ray_batch(camera, scene.bbox_half_extent)
    R = dirs.shape[0]
    rgb = np.full((R, 3), scene.background, dtype=np.float64)
    opacity = np.zeros(R)
    depth = np.zeros(R)
    rows = np.nonzero(hit)[0]
    if rows.size:
        nr, fr = near[rows], far[rows]
        delta = (fr - nr) / n_samples
        ts = nr[:, None] + (np.arange(n_samples) + 0.5) * delta[:, None]
        pts = origin + ts[..., None] * dirs[rows][:, None, :]
        sig = scene.density(pts)
        col = scene.albedo(pts)
        rgb_fg, op, dep, _ = composite(sig, col, delta, ts=ts)
        rgb[rows] = rgb_fg + (1 - op[:, None]) * scene.background
        opacity[rows] = op
        depth[rows] = dep
    H, W = camera.height, camera.width
    return RenderOutput(
        rgb=rgb.reshape(H, W, 3), opacity=opacity.reshape(H, W),
        depth=depth.reshape(H, W), normals=np.zeros((H, W, 3)),
        weights=np.zeros((H, W, 1)), dirs=dirs.reshape(H, W, 3),
        hit=hit.reshape(H, W))


def reference_view(scene: SphereScene, distance: float = 1.8, azimuth: float = 0.0,
                   elevation: float = 15.0, fov: float = 40.0, res: int = 64):
    """Returns (camera, image, binary mask) for the fixed reconstruction view."""
    cam = camera_from_spherical(distance, azimuth, elevation, fov, res, res)
    out = render_scene(scene, cam)
    mask = (out.opacity >= 0.5).astype(np.float64)
    return cam, out.rgb, mask


def stored_view_cameras(distance: float = 1.8, fov: float = 40.0, res: int = 64):
    """26 cameras covering the viewing sphere: rings at elevations 0/35/70
    plus a top view."""
    cams = []
    for elevation, count in ((0.0, 10), (35.0, 8), (70.0, 7)):
        for k in range(count):
            cams.append(camera_from_spherical(distance, 360.0 * k / count, elevation,
                                              fov, res, res))
    cams.append(camera_from_spherical(distance, 0.0, 90.0, fov, res, res))
    return cams


def stored_views(scene: SphereScene, distance: float = 1.8, fov: float = 40.0,
                 res: int = 64, n_samples: int = 384):
    return [(cam, render_scene(scene, cam, n_samples).rgb)
            for cam in stored_view_cameras(distance, fov, res)]


def held_out_cameras(distance: float = 1.8, fov: float = 40.0, res: int = 64,
                     elevation: float = 15.0, count: int = 8):
    return [camera_from_spherical(distance, 22.5 + 360.0 * k / count, elevation,
                                  fov, res, res)
            for k in range(count)]
