"""Cameras, ray sampling, emission-absorption compositing, shading, background.

Rendering composites per-sample contributions with weights
w_i = T_i (1 - exp(-sigma_i * delta)), T_i = exp(-delta * sum_{j<i} sigma_j),
so that sum_i w_i + T_{N+1} = 1 per ray. The backward pass mirrors the
forward chunk-by-chunk, recomputing intermediates instead of caching whole
images, and accumulates parameter gradients in a fixed order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from . import field as field_mod
from .field import FieldModel, GradBuffers, _sigmoid
from .seeding import rng_for

NEAR_MIN = 0.01
FAR_MAX = 6.0

_UP_FALLBACK = np.array([0.0, 0.0, 1.0])


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    up: np.ndarray = dc_field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    fov_deg: float = 60.0
    width: int = 96
    height: int = 96

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.look_at = np.asarray(self.look_at, dtype=float)
        self.up = np.asarray(self.up, dtype=float)
        if not 0.0 < self.fov_deg < 180.0:
            raise ValueError("fov_deg must be in (0, 180)")
        if np.allclose(self.position, self.look_at):
            raise ValueError("camera position coincides with look_at")

    def basis(self):
        """Right-handed frame (right, up, back); forward is -back."""
        back = self.position - self.look_at
        back = back / np.linalg.norm(back)
        right = np.cross(self.up, back)
        n = np.linalg.norm(right)
        if n < 1e-8:
            right = np.cross(_UP_FALLBACK, back)
            n = np.linalg.norm(right)
        right = right / n
        up = np.cross(back, right)
        return right, up, back

    def resized(self, width: int, height: int) -> "Camera":
        return Camera(self.position.copy(), self.look_at.copy(), self.up.copy(),
                      self.fov_deg, width, height)


def camera_from_spherical(distance: float, azimuth_deg: float, elevation_deg: float,
                          fov_deg: float = 60.0, width: int = 96, height: int = 96,
                          look_at=None) -> Camera:
    """Camera on a sphere around look_at; y is up, azimuth 0 sits on +z."""
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    offset = np.array([
        math.cos(el) * math.sin(az),
        math.sin(el),
        math.cos(el) * math.cos(az),
    ]) * distance
    center = np.zeros(3) if look_at is None else np.asarray(look_at, dtype=float)
    return Camera(position=center + offset, look_at=center,
                  fov_deg=fov_deg, width=width, height=height)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float


@dataclass
class ShadingSpec:
    mode: str = "albedo"            # albedo | diffuse | textureless
    light_position: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    light_color: float = 0.9        # point-light intensity
    ambient: float = 0.1

    def __post_init__(self):
        if self.mode not in ("albedo", "diffuse", "textureless"):
            raise ValueError(f"unknown shading mode {self.mode!r}")
        if self.light_color < 0 or self.ambient < 0:
            raise ValueError("light intensities must be nonnegative")
        self.light_position = np.asarray(self.light_position, dtype=float)

    @property
    def needs_normals(self) -> bool:
        return self.mode != "albedo"


ALBEDO_SHADING = ShadingSpec(mode="albedo", ambient=1.0, light_color=0.0)


@dataclass
class RenderOutput:
    rgb: np.ndarray               # (H, W, 3) final image incl. background
    opacity: np.ndarray           # (H, W)
    depth: np.ndarray             # (H, W)
    normals: np.ndarray           # (H, W, 3) weight-aggregated, |n| <= opacity
    weights: np.ndarray           # (H, W, N) compositing weights
    dirs: np.ndarray              # (H, W, 3) ray directions
    hit: np.ndarray               # (H, W) rays that intersect the bbox
    sample_normals: Optional[np.ndarray] = None   # (H, W, N, 3) when requested

    @property
    def resolution(self):
        return self.rgb.shape[0], self.rgb.shape[1]


@dataclass
class ViewGrads:
    """Upstream pixel/sample-level gradients fed into render_view_backward."""
    d_rgb: Optional[np.ndarray] = None             # (H, W, 3)
    d_opacity: Optional[np.ndarray] = None         # (H, W)
    d_normal_map: Optional[np.ndarray] = None      # (H, W, 3)
    d_weights: Optional[np.ndarray] = None         # (H, W, N)
    d_sample_normals: Optional[np.ndarray] = None  # (H, W, N, 3)


# ---------------------------------------------------------------------------
# rays

def _pixel_grid(width: int, height: int):
    px, py = np.meshgrid(np.arange(width), np.arange(height))
    return px.ravel(), py.ravel()


def camera_ray_batch(camera: Camera, half_extent: float, pixels=None):
    """Rays through pixel centers with near/far from the bbox intersection.

    Returns (origin (3,), dirs (R,3), near (R,), far (R,), hit (R,)).
    """
    if pixels is None:
        px, py = _pixel_grid(camera.width, camera.height)
    else:
        pixels = np.atleast_2d(np.asarray(pixels))
        px, py = pixels[:, 0].astype(float), pixels[:, 1].astype(float)
    right, up, back = camera.basis()
    tan_w = math.tan(math.radians(camera.fov_deg) / 2.0)
    tan_h = tan_w * camera.height / camera.width
    x = ((px + 0.5) / camera.width * 2.0 - 1.0) * tan_w
    y = (1.0 - (py + 0.5) / camera.height * 2.0) * tan_h
    dirs = x[:, None] * right + y[:, None] * up - back
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    o = camera.position
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (-half_extent - o) * inv
        t2 = (half_extent - o) * inv
    t_enter = np.minimum(t1, t2).max(axis=1)
    t_exit = np.maximum(t1, t2).min(axis=1)
    near = np.clip(t_enter, NEAR_MIN, FAR_MAX)
    far = np.clip(t_exit, NEAR_MIN, FAR_MAX)
    hit = (t_exit >= t_enter) & (far > near)
    return o, dirs, near, far, hit


def camera_ray(camera: Camera, pixel, half_extent: float = 0.375) -> Ray:
    """Single-pixel ray; near/far clamped to the bbox slab interval."""
    px, py = pixel
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise ValueError(f"pixel {pixel} outside {camera.width}x{camera.height} image")
    o, dirs, near, far, hit = camera_ray_batch(camera, half_extent, pixels=[(px, py)])
    return Ray(origin=o, direction=dirs[0], near=float(near[0]), far=float(far[0]))


def sample_ray(ray: Ray, n: int, stratified: bool = False, rng=None):
    """N positions along a ray at constant spacing; jitter stays inside bins."""
    if n < 2:
        raise ValueError("need at least 2 samples per ray")
    delta = (ray.far - ray.near) / n
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        u = rng.random(n)
    else:
        u = np.full(n, 0.5)
    ts = ray.near + (np.arange(n) + u) * delta
    return ts, delta


# ---------------------------------------------------------------------------
# compositing

def composite(sigmas: np.ndarray, colors: np.ndarray, delta, ts=None):
    """Emission-absorption quadrature along each ray.

    sigmas (R,N) >= 0, colors (R,N,3), delta scalar or (R,).
    Returns (rgb (R,3), opacity (R,), depth (R,), weights (R,N)).
    """
    single = np.ndim(sigmas) == 1
    sigmas = np.atleast_2d(sigmas)
    colors = np.asarray(colors)
    if colors.ndim == 2:
        colors = colors[None]
    if not np.all(np.isfinite(sigmas)) or not np.all(np.isfinite(colors)):
        raise ValueError("non-finite compositing inputs")
    if np.any(sigmas < 0):
        raise ValueError("negative densities")
    R, N = sigmas.shape
    d = np.broadcast_to(np.asarray(delta, dtype=sigmas.dtype), (R,))[:, None]
    tau = sigmas * d
    csum = np.cumsum(tau, axis=1)
    T = np.exp(-(csum - tau))                  # T_i, exclusive prefix
    alpha = -np.expm1(-tau)
    weights = T * alpha
    opacity = 1.0 - np.exp(-csum[:, -1])
    rgb = np.einsum("rn,rnc->rc", weights, colors)
    if ts is None:
        ts = (np.arange(N, dtype=sigmas.dtype)[None, :] + 0.5) * d
    depth = np.sum(weights * np.atleast_2d(ts), axis=1)
    if single:
        return rgb[0], opacity[0], depth[0], weights[0]
    return rgb, opacity, depth, weights


def composite_backward(sigmas, delta, weights, g_weights):
    """d(loss)/d(sigma_i) given total per-weight gradients G_i.

    Uses dL/dsigma_i = delta * (T_{i+1} G_i - sum_{j>i} w_j G_j).
    """
    R, N = sigmas.shape
    d = np.broadcast_to(np.asarray(delta, dtype=sigmas.dtype), (R,))[:, None]
    tau = sigmas * d
    csum = np.cumsum(tau, axis=1)
    T_next = np.exp(-csum)                     # T_{i+1}
    wg = weights * g_weights
    suffix = np.flip(np.cumsum(np.flip(wg, axis=1), axis=1), axis=1) - wg
    return d * (T_next * g_weights - suffix)


def composite_normals(sample_normals: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Aggregate per-sample normals with compositing weights (not renormalized)."""
    return np.einsum("rn,rnc->rc", weights, sample_normals)


# ---------------------------------------------------------------------------
# shading

def shade(albedo: np.ndarray, points: np.ndarray, normals: np.ndarray,
          spec: ShadingSpec) -> np.ndarray:
    """Per-sample shading; diffuse/textureless use a point light plus ambient."""
    if spec.mode == "albedo":
        return albedo
    to_light = spec.light_position.astype(albedo.dtype) - points
    to_light /= np.linalg.norm(to_light, axis=-1, keepdims=True)
    lam = np.maximum(np.sum(normals * to_light, axis=-1), 0.0)
    factor = (spec.light_color * lam + spec.ambient)[..., None]
    base = albedo if spec.mode == "diffuse" else np.ones_like(albedo)
    return np.clip(base * factor, 0.0, 1.0)


def _shade_backward(albedo, points, normals, spec: ShadingSpec, shaded, d_shaded):
    """Returns (d_albedo, d_normals); samples pinned by the output clamp pass
    no gradient. With the standard lights (ambient > 0, ambient + light <= 1)
    the clamp never binds."""
    if spec.mode == "albedo":
        return d_shaded, None
    to_light = spec.light_position.astype(albedo.dtype) - points
    to_light /= np.linalg.norm(to_light, axis=-1, keepdims=True)
    ndl = np.sum(normals * to_light, axis=-1)
    factor = spec.light_color * np.maximum(ndl, 0.0) + spec.ambient
    base = albedo if spec.mode == "diffuse" else np.ones_like(albedo)
    raw = base * factor[..., None]
    d_eff = d_shaded.copy()
    d_eff[(raw <= 0.0) | (raw >= 1.0)] = 0.0
    d_albedo = d_eff * factor[..., None] if spec.mode == "diffuse" else None
    d_factor = np.sum(d_eff * base, axis=-1)
    d_ndl = d_factor * spec.light_color * (ndl > 0.0)
    d_normals = d_ndl[..., None] * to_light
    return d_albedo, d_normals


# ---------------------------------------------------------------------------
# background

@dataclass
class BackgroundModel:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def dtype(self):
        return self.w1.dtype

    def tensors(self):
        yield "bg_w1", self.w1
        yield "bg_b1", self.b1
        yield "bg_w2", self.w2
        yield "bg_b2", self.b2

    def copy(self) -> "BackgroundModel":
        return BackgroundModel(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


@dataclass
class BackgroundGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @staticmethod
    def zeros_like(bg: BackgroundModel) -> "BackgroundGrads":
        return BackgroundGrads(np.zeros_like(bg.w1), np.zeros_like(bg.b1),
                               np.zeros_like(bg.w2), np.zeros_like(bg.b2))

    def tensors(self):
        yield "bg_w1", self.w1
        yield "bg_b1", self.b1
        yield "bg_w2", self.w2
        yield "bg_b2", self.b2

    def add(self, other: "BackgroundGrads") -> None:
        self.w1 += other.w1
        self.b1 += other.b1
        self.w2 += other.w2
        self.b2 += other.b2


def init_background(seed: int, hidden: int = 16, dtype=np.float32,
                    zero: bool = False) -> BackgroundModel:
    """Deliberately weak view-direction MLP (2 layers, sigmoid output)."""
    if zero:
        return BackgroundModel(
            w1=np.zeros((3, hidden), dtype=dtype), b1=np.zeros(hidden, dtype=dtype),
            w2=np.zeros((hidden, 3), dtype=dtype), b2=np.zeros(3, dtype=dtype))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB6]))
    s1, s2 = 1.0 / np.sqrt(3.0), 1.0 / np.sqrt(hidden)
    return BackgroundModel(
        w1=rng.uniform(-s1, s1, (3, hidden)).astype(dtype),
        b1=rng.uniform(-s1, s1, hidden).astype(dtype),
        w2=rng.uniform(-s2, s2, (hidden, 3)).astype(dtype),
        b2=rng.uniform(-s2, s2, 3).astype(dtype))


def background_eval(bg: BackgroundModel, dirs: np.ndarray) -> np.ndarray:
    d = np.atleast_2d(dirs).astype(bg.dtype, copy=False)
    h = np.maximum(d @ bg.w1 + bg.b1, 0.0)
    return _sigmoid(h @ bg.w2 + bg.b2)


def background_backward(bg: BackgroundModel, dirs: np.ndarray, d_rgb: np.ndarray,
                        grads: BackgroundGrads) -> None:
    d = np.atleast_2d(dirs).astype(bg.dtype, copy=False)
    h = np.maximum(d @ bg.w1 + bg.b1, 0.0)
    out = _sigmoid(h @ bg.w2 + bg.b2)
    dz2 = d_rgb * out * (1.0 - out)
    grads.w2 += h.T @ dz2
    grads.b2 += dz2.sum(axis=0)
    dh = dz2 @ bg.w2.T
    dh[h <= 0] = 0.0
    grads.w1 += d.T @ dh
    grads.b1 += dh.sum(axis=0)


# ---------------------------------------------------------------------------
# full-view rendering

def _ray_jitter(seed: int, n_rays: int, n_samples: int, stratified: bool, dtype):
    if not stratified:
        return np.full((n_rays, n_samples), 0.5, dtype=dtype)
    return rng_for(seed, "jitter").random((n_rays, n_samples), dtype=np.float64).astype(dtype)


def _chunk_slices(n: int, chunk: int):
    for start in range(0, n, chunk):
        yield slice(start, min(start + chunk, n))


def render_view(model: FieldModel, camera: Camera, spec: ShadingSpec = ALBEDO_SHADING,
                bg: Optional[BackgroundModel] = None, n_samples: int = 64,
                stratified: bool = False, seed: int = 0,
                want_normals: bool = False, want_sample_normals: bool = False,
                chunk_rays: int = 2048) -> RenderOutput:
    """Render a full image; per-sample shading, additive background."""
    H, W = camera.height, camera.width
    dtype = model.dtype
    half = model.config.bbox_half_extent
    origin, dirs, near, far, hit = camera_ray_batch(camera, half)
    R = dirs.shape[0]
    dirs = dirs.astype(dtype)

    need_normals = want_normals or want_sample_normals or spec.needs_normals

    rgb_fg = np.zeros((R, 3), dtype=dtype)
    opacity = np.zeros(R, dtype=dtype)
    depth = np.zeros(R, dtype=dtype)
    nmap = np.zeros((R, 3), dtype=dtype)
    weights = np.zeros((R, n_samples), dtype=dtype)
    s_normals = np.zeros((R, n_samples, 3), dtype=dtype) if want_sample_normals else None

    jitter = _ray_jitter(seed, R, n_samples, stratified, dtype)
    hit_idx = np.nonzero(hit)[0]
    arange = np.arange(n_samples, dtype=dtype)

    for sl in _chunk_slices(hit_idx.size, chunk_rays):
        rows = hit_idx[sl]
        nr, fr = near[rows].astype(dtype), far[rows].astype(dtype)
        delta = (fr - nr) / n_samples
        ts = nr[:, None] + (arange[None, :] + jitter[rows]) * delta[:, None]
        pts = origin.astype(dtype) + ts[..., None] * dirs[rows][:, None, :]
        flat = pts.reshape(-1, 3)

        sigma, albedo, _ = field_mod._field_forward(model, flat)
        if need_normals:
            g, _ = field_mod._fd_density_gradient(model, flat, model.config.normal_fd_eps)
            normals, _ = field_mod._normalize_neg_gradient(g)
        else:
            normals = None

        colors = shade(albedo, flat, normals, spec).reshape(len(rows), n_samples, 3)
        sig = sigma.reshape(len(rows), n_samples)
        rgb_c, op_c, dep_c, w_c = composite(sig, colors, delta, ts=ts)
        rgb_fg[rows] = rgb_c
        opacity[rows] = op_c
        depth[rows] = dep_c
        weights[rows] = w_c
        if need_normals:
            ns = normals.reshape(len(rows), n_samples, 3)
            nmap[rows] = composite_normals(ns, w_c)
            if want_sample_normals:
                s_normals[rows] = ns

    if bg is not None:
        bg_rgb = background_eval(bg, dirs)
    else:
        bg_rgb = np.zeros((R, 3), dtype=dtype)
    rgb = rgb_fg + (1.0 - opacity[:, None]) * bg_rgb

    return RenderOutput(
        rgb=rgb.reshape(H, W, 3),
        opacity=opacity.reshape(H, W),
        depth=depth.reshape(H, W),
        normals=nmap.reshape(H, W, 3),
        weights=weights.reshape(H, W, n_samples),
        dirs=dirs.reshape(H, W, 3),
        hit=hit.reshape(H, W),
        sample_normals=None if s_normals is None else s_normals.reshape(H, W, n_samples, 3),
    )


def render_view_backward(model: FieldModel, camera: Camera, grads_in: ViewGrads,
                         spec: ShadingSpec = ALBEDO_SHADING,
                         bg: Optional[BackgroundModel] = None, n_samples: int = 64,
                         stratified: bool = False, seed: int = 0,
                         chunk_rays: int = 1024):
    """Reverse-mode through a render_view call with identical arguments.

    Recomputes forward intermediates chunk by chunk and accumulates parameter
    gradients; returns (GradBuffers, BackgroundGrads | None).
    """
    H, W = camera.height, camera.width
    dtype = model.dtype
    half = model.config.bbox_half_extent
    origin, dirs, near, far, hit = camera_ray_batch(camera, half)
    R = dirs.shape[0]
    dirs = dirs.astype(dtype)
    jitter = _ray_jitter(seed, R, n_samples, stratified, dtype)

    d_rgb = None if grads_in.d_rgb is None else grads_in.d_rgb.reshape(R, 3).astype(dtype)
    d_op = None if grads_in.d_opacity is None else grads_in.d_opacity.reshape(R).astype(dtype)
    d_nmap = (None if grads_in.d_normal_map is None
              else grads_in.d_normal_map.reshape(R, 3).astype(dtype))
    d_w = (None if grads_in.d_weights is None
           else grads_in.d_weights.reshape(R, n_samples).astype(dtype))
    d_sn = (None if grads_in.d_sample_normals is None
            else grads_in.d_sample_normals.reshape(R, n_samples, 3).astype(dtype))

    grads = GradBuffers.zeros_like(model)
    bg_grads = BackgroundGrads.zeros_like(bg) if bg is not None else None

    # background path: rgb = rgb_fg + (1 - O) bg(d). Needs per-ray opacity.
    need_normals = spec.needs_normals or d_nmap is not None or d_sn is not None
    d_op_total = np.zeros(R, dtype=dtype) if (d_op is not None or
                                              (bg is not None and d_rgb is not None)) else None
    if d_op is not None:
        d_op_total += d_op

    hit_idx = np.nonzero(hit)[0]
    arange = np.arange(n_samples, dtype=dtype)
    eps = model.config.normal_fd_eps

    if bg is not None and d_rgb is not None:
        # opacity term of the bg path is handled per-chunk below; the bg-net
        # term needs all rays (missed rays show pure background).
        bg_rgb = background_eval(bg, dirs)
        opac_full = np.zeros(R, dtype=dtype)
        # opacities of hit rays are recomputed per chunk and filled in here
    else:
        bg_rgb = None
        opac_full = None

    for sl in _chunk_slices(hit_idx.size, chunk_rays):
        rows = hit_idx[sl]
        nrows = len(rows)
        nr, fr = near[rows].astype(dtype), far[rows].astype(dtype)
        delta = (fr - nr) / n_samples
        ts = nr[:, None] + (arange[None, :] + jitter[rows]) * delta[:, None]
        pts = origin.astype(dtype) + ts[..., None] * dirs[rows][:, None, :]
        flat = pts.reshape(-1, 3)

        sigma, albedo, cache = field_mod._field_forward(model, flat, want_cache=True)
        if need_normals:
            g, n_caches = field_mod._fd_density_gradient(model, flat, eps, want_caches=True)
            normals, degen = field_mod._normalize_neg_gradient(g)
        else:
            normals = None

        shaded = shade(albedo, flat, normals, spec)
        colors = shaded.reshape(nrows, n_samples, 3)
        sig = sigma.reshape(nrows, n_samples)
        _, op_c, _, w_c = composite(sig, colors, delta, ts=ts)
        if opac_full is not None:
            opac_full[rows] = op_c

        # aggregate per-weight gradient G_i
        G = np.zeros((nrows, n_samples), dtype=dtype)
        if d_rgb is not None:
            G += np.einsum("rc,rnc->rn", d_rgb[rows], colors)
        if d_op_total is not None:
            dop = d_op_total[rows].copy()
            if bg_rgb is not None:
                dop -= np.einsum("rc,rc->r", d_rgb[rows], bg_rgb[rows])
            G += dop[:, None]
        if d_w is not None:
            G += d_w[rows]
        ns = normals.reshape(nrows, n_samples, 3) if need_normals else None
        if d_nmap is not None:
            G += np.einsum("rc,rnc->rn", d_nmap[rows], ns)

        # per-sample colors
        d_colors = None
        if d_rgb is not None:
            d_colors = w_c[..., None] * d_rgb[rows][:, None, :]

        # per-sample normals
        d_ns = None
        if need_normals:
            d_ns = np.zeros((nrows, n_samples, 3), dtype=dtype)
            if d_sn is not None:
                d_ns += d_sn[rows]
            if d_nmap is not None:
                d_ns += w_c[..., None] * d_nmap[rows][:, None, :]

        d_albedo_flat = None
        if d_colors is not None:
            d_alb, d_n_shade = _shade_backward(
                albedo, flat, normals, spec, shaded, d_colors.reshape(-1, 3))
            d_albedo_flat = d_alb
            if d_n_shade is not None:
                if d_ns is None:
                    d_ns = d_n_shade.reshape(nrows, n_samples, 3)
                else:
                    d_ns += d_n_shade.reshape(nrows, n_samples, 3)

        d_sigma_flat = composite_backward(sig, delta, w_c, G).reshape(-1)
        field_mod._field_backward(model, cache, d_sigma_flat, d_albedo_flat, grads)

        if d_ns is not None:
            field_mod._fd_normal_backward(model, n_caches, g, normals, degen,
                                          d_ns.reshape(-1, 3), eps, grads)

    if bg is not None and d_rgb is not None:
        d_bg_rgb = (1.0 - opac_full[:, None]) * d_rgb
        background_backward(bg, dirs, d_bg_rgb, bg_grads)

    return grads, bg_grads
