"""Multi-resolution dense feature grids with a small decoder network.

The field maps 3D points inside a bounding box to (density, albedo). Features
are trilinearly interpolated from a stack of dense grids whose resolutions
form a geometric progression, concatenated, and decoded by a small ReLU MLP.
A Gaussian density blob at the origin is added to the decoded density to give
early optimization something to carve from. All gradients are hand-derived
reverse-mode (no autodiff framework), which keeps every path checkable
against finite differences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np

_CKPT_MAGIC = b"SFCK"
_CKPT_VERSION = 1


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(np.zeros((), dtype=x.dtype), x)


@dataclass
class FieldConfig:
    num_levels: int = 16
    feature_dim: int = 2
    base_resolution: int = 16
    max_resolution: int = 2048
    grid_cap: int = 128            # dense storage cap per axis
    bbox_half_extent: float = 0.375
    decoder_hidden: int = 64
    decoder_layers: int = 3
    blob_lambda: float = 5.0
    blob_nu: float = 0.2
    blob_enabled: bool = True
    normal_fd_eps: float = 0.75 / 256.0
    # raw-density offset before the softplus: a fresh field decodes to
    # near-zero density everywhere, so scenes start empty except the blob
    density_offset: float = -3.0

    def validate(self) -> None:
        if self.num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.base_resolution < 2:
            raise ValueError("base_resolution must be >= 2")
        if self.base_resolution > self.max_resolution:
            raise ValueError(
                f"base_resolution {self.base_resolution} exceeds "
                f"max_resolution {self.max_resolution}"
            )
        if self.bbox_half_extent <= 0:
            raise ValueError("bbox_half_extent must be positive")
        if self.decoder_layers < 1:
            raise ValueError("decoder_layers must be >= 1")


def level_resolutions(config: FieldConfig) -> list[int]:
    """Nominal per-level resolutions: geometric progression base..max."""
    L = config.num_levels
    if L == 1:
        return [config.base_resolution]
    logs = np.linspace(np.log(config.base_resolution), np.log(config.max_resolution), L)
    res = np.rint(np.exp(logs)).astype(int)
    res[0] = config.base_resolution
    res[-1] = config.max_resolution
    return [int(r) for r in res]


def stored_resolutions(config: FieldConfig) -> list[int]:
    """Per-level resolutions actually allocated (nominal capped at grid_cap)."""
    return [min(r, config.grid_cap) for r in level_resolutions(config)]


@dataclass
class FieldSample:
    density: np.ndarray   # (P,)  nonnegative
    albedo: np.ndarray    # (P,3) in [0,1]


@dataclass
class FieldModel:
    grids: list[np.ndarray]        # per level (r, r, r, F)
    decoder_w: list[np.ndarray]    # per layer (in, out)
    decoder_b: list[np.ndarray]    # per layer (out,)
    active_levels: int
    config: FieldConfig

    @property
    def dtype(self):
        return self.grids[0].dtype

    @property
    def num_levels(self) -> int:
        return len(self.grids)

    @property
    def feature_in_dim(self) -> int:
        return self.config.num_levels * self.config.feature_dim

    def density(self, points: np.ndarray) -> np.ndarray:
        return field_query(self, points).density

    def copy(self) -> "FieldModel":
        return FieldModel(
            grids=[g.copy() for g in self.grids],
            decoder_w=[w.copy() for w in self.decoder_w],
            decoder_b=[b.copy() for b in self.decoder_b],
            active_levels=self.active_levels,
            config=self.config,
        )


def _decoder_dims(config: FieldConfig) -> list[tuple[int, int]]:
    in_dim = config.num_levels * config.feature_dim
    dims = []
    prev = in_dim
    for i in range(config.decoder_layers):
        out = 4 if i == config.decoder_layers - 1 else config.decoder_hidden
        dims.append((prev, out))
        prev = out
    return dims


def grid_init(config: FieldConfig, seed: int, dtype=np.float32) -> FieldModel:
    """Fresh model: grid features ~ U(-1e-4, 1e-4), fan-in-scaled decoder."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    grids = []
    for res in stored_resolutions(config):
        g = rng.uniform(-1e-4, 1e-4, size=(res, res, res, config.feature_dim))
        grids.append(g.astype(dtype))
    ws, bs = [], []
    for fan_in, fan_out in _decoder_dims(config):
        bound = 1.0 / np.sqrt(fan_in)
        ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        bs.append(rng.uniform(-bound, bound, size=(fan_out,)).astype(dtype))
    return FieldModel(grids=grids, decoder_w=ws, decoder_b=bs,
                      active_levels=config.num_levels, config=config)


def set_active_levels(model: FieldModel, n: int) -> None:
    if not 1 <= n <= model.num_levels:
        raise ValueError(f"active_levels must be in [1, {model.num_levels}], got {n}")
    model.active_levels = n


def density_bias(points: np.ndarray, lam: float, nu: float) -> np.ndarray:
    """Gaussian density blob lam * exp(-|p|^2 / (2 nu^2)), added in density space."""
    p = np.asarray(points, dtype=float)
    sq = np.sum(np.square(p), axis=-1)
    return lam * np.exp(-sq / (2.0 * nu * nu))


def _trilinear_setup(points: np.ndarray, res: int, half: float):
    """Corner flat indices (P,8) and trilinear weights (P,8) for in-box points."""
    dtype = points.dtype
    u = (points + half) * ((res - 1) / (2.0 * half))
    i0 = np.floor(u).astype(np.int64)
    np.clip(i0, 0, res - 2, out=i0)
    f = np.clip(u - i0, 0.0, 1.0).astype(dtype)
    one = np.ones((), dtype=dtype)
    wx = np.stack([one - f[:, 0], f[:, 0]], axis=1)   # (P,2)
    wy = np.stack([one - f[:, 1], f[:, 1]], axis=1)
    wz = np.stack([one - f[:, 2], f[:, 2]], axis=1)
    # corner order c = 4*dx + 2*dy + dz
    w = (wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]).reshape(-1, 8)
    base = (i0[:, 0] * res + i0[:, 1]) * res + i0[:, 2]
    offs = np.array([((dx * res) + dy) * res + dz
                     for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)], dtype=np.int64)
    idx = base[:, None] + offs[None, :]
    return idx, w


def interpolate_level(grid: np.ndarray, points: np.ndarray, half_extent: float) -> np.ndarray:
    """Trilinear interpolation on one level; out-of-box points clamp to the surface."""
    res = grid.shape[0]
    pts = np.clip(np.asarray(points, dtype=grid.dtype), -half_extent, half_extent)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    idx, w = _trilinear_setup(pts, res, half_extent)
    flat = grid.reshape(-1, grid.shape[-1])
    feat = np.einsum("pc,pcf->pf", w, flat[idx])
    return feat[0] if single else feat


class _QueryCache:
    """Intermediates retained for one forward batch, consumed by the backward pass."""

    __slots__ = ("n_points", "inside", "setups", "level_res", "hs", "raw_sigma",
                 "albedo", "sig_raw_sigma")

    def __init__(self):
        self.setups = {}


def _field_forward(model: FieldModel, points: np.ndarray, want_cache: bool = False):
    """Query density/albedo for (P,3) points; outside the box both are zero.

    Returns (sigma, albedo, cache-or-None).
    """
    cfg = model.config
    pts = np.asarray(points)
    if pts.ndim == 1:
        pts = pts[None, :]
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite point coordinates")
    pts = pts.astype(model.dtype, copy=False)
    dtype = model.dtype
    P = pts.shape[0]
    half = cfg.bbox_half_extent

    inside = np.all(np.abs(pts) <= half, axis=1)
    pin = pts[inside]
    n_in = pin.shape[0]

    sigma = np.zeros(P, dtype=dtype)
    albedo = np.zeros((P, 3), dtype=dtype)
    cache = _QueryCache() if want_cache else None
    if want_cache:
        cache.n_points = P
        cache.inside = inside

    if n_in:
        F = cfg.feature_dim
        h0 = np.zeros((n_in, model.feature_in_dim), dtype=dtype)
        setups = {}
        res_list = stored_resolutions(cfg)
        for lvl in range(model.active_levels):
            res = res_list[lvl]
            if res not in setups:
                setups[res] = _trilinear_setup(pin, res, half)
            idx, w = setups[res]
            flat = model.grids[lvl].reshape(-1, F)
            h0[:, lvl * F:(lvl + 1) * F] = np.einsum("pc,pcf->pf", w, flat[idx])

        hs = [h0]
        h = h0
        n_layers = len(model.decoder_w)
        for i in range(n_layers):
            h = h @ model.decoder_w[i] + model.decoder_b[i]
            if i < n_layers - 1:
                np.maximum(h, 0, out=h)
                hs.append(h)
        raw_sigma = h[:, 0] + np.asarray(cfg.density_offset, dtype=dtype)
        raw_albedo = h[:, 1:4]

        sig_rs = _sigmoid(raw_sigma)
        sigma_in = _softplus(raw_sigma)
        if cfg.blob_enabled:
            sigma_in = sigma_in + density_bias(pin, cfg.blob_lambda, cfg.blob_nu).astype(dtype)
        albedo_in = _sigmoid(raw_albedo)

        sigma[inside] = sigma_in
        albedo[inside] = albedo_in
        if want_cache:
            cache.setups = setups
            cache.level_res = res_list
            cache.hs = hs
            cache.raw_sigma = raw_sigma
            cache.sig_raw_sigma = sig_rs
            cache.albedo = albedo_in
    elif want_cache:
        cache.setups = {}
        cache.hs = None

    return sigma, albedo, cache


def field_query(model: FieldModel, points: np.ndarray) -> FieldSample:
    sigma, albedo, _ = _field_forward(model, points)
    return FieldSample(density=sigma, albedo=albedo)


@dataclass
class GradBuffers:
    """Parameter-gradient accumulators matching a FieldModel's tensors."""

    grids: list[np.ndarray]
    decoder_w: list[np.ndarray]
    decoder_b: list[np.ndarray]

    @staticmethod
    def zeros_like(model: FieldModel) -> "GradBuffers":
        return GradBuffers(
            grids=[np.zeros_like(g) for g in model.grids],
            decoder_w=[np.zeros_like(w) for w in model.decoder_w],
            decoder_b=[np.zeros_like(b) for b in model.decoder_b],
        )

    def tensors(self):
        for i, g in enumerate(self.grids):
            yield f"grid{i}", g
        for i, w in enumerate(self.decoder_w):
            yield f"dec_w{i}", w
        for i, b in enumerate(self.decoder_b):
            yield f"dec_b{i}", b

    def add(self, other: "GradBuffers") -> None:
        for a, b in zip(self.grids, other.grids):
            a += b
        for a, b in zip(self.decoder_w, other.decoder_w):
            a += b
        for a, b in zip(self.decoder_b, other.decoder_b):
            a += b


def _scatter_grid_grad(buf: np.ndarray, idx: np.ndarray, w: np.ndarray,
                       d_feat: np.ndarray) -> None:
    """buf[idx_c] += w_c * d_feat, accumulated exactly (bincount per channel)."""
    F = buf.shape[-1]
    flat_idx = idx.ravel()
    size = buf.size // F
    flat = buf.reshape(-1, F)
    for c in range(F):
        wd = (w * d_feat[:, c:c + 1]).ravel()
        flat[:, c] += np.bincount(flat_idx, weights=wd, minlength=size).astype(buf.dtype)


def _field_backward(model: FieldModel, cache: _QueryCache, d_sigma, d_albedo,
                    grads: GradBuffers) -> None:
    """Accumulate dL/dparams given dL/dsigma (P,) and dL/dalbedo (P,3)."""
    if cache.hs is None:
        return
    inside = cache.inside
    cfg = model.config
    F = cfg.feature_dim
    dtype = model.dtype

    d_raw = np.zeros((cache.hs[0].shape[0], 4), dtype=dtype)
    if d_sigma is not None:
        d_raw[:, 0] = d_sigma[inside] * cache.sig_raw_sigma
    if d_albedo is not None:
        alb = cache.albedo
        d_raw[:, 1:4] = d_albedo[inside] * alb * (1.0 - alb)

    n_layers = len(model.decoder_w)
    dh = d_raw
    for i in range(n_layers - 1, -1, -1):
        h_in = cache.hs[i]
        grads.decoder_w[i] += h_in.T @ dh
        grads.decoder_b[i] += dh.sum(axis=0)
        if i > 0:
            dh = dh @ model.decoder_w[i].T
            dh[cache.hs[i] <= 0] = 0.0
    dh0 = dh @ model.decoder_w[0].T if n_layers > 0 else dh

    for lvl in range(model.active_levels):
        res = cache.level_res[lvl]
        idx, w = cache.setups[res]
        _scatter_grid_grad(grads.grids[lvl], idx, w, dh0[:, lvl * F:(lvl + 1) * F])


def _sigma_forward(model: FieldModel, points: np.ndarray, want_cache: bool = False):
    sigma, _, cache = _field_forward(model, points, want_cache=want_cache)
    return sigma, cache


_FD_OFFSETS = np.array([
    [1, 0, 0], [-1, 0, 0],
    [0, 1, 0], [0, -1, 0],
    [0, 0, 1], [0, 0, -1],
], dtype=float)

DEGENERATE_NORM_EPS = 1e-8


def finite_diff_normal(model: FieldModel, points: np.ndarray, eps: float | None = None):
    """Surface normals as the normalized negative density gradient.

    Central finite differences with step eps along each axis. Where the
    gradient norm falls below DEGENERATE_NORM_EPS the normal is the zero
    vector and the degenerate flag is set.

    Returns (normals (P,3), degenerate (P,) bool).
    """
    if eps is None:
        eps = model.config.normal_fd_eps
    pts = np.atleast_2d(np.asarray(points, dtype=model.dtype))
    g = _fd_density_gradient(model, pts, eps)[0]
    return _normalize_neg_gradient(g)


def _fd_density_gradient(model: FieldModel, pts: np.ndarray, eps: float,
                         want_caches: bool = False):
    """Density gradient (P,3) by central differences; optionally keeps the six
    offset-query caches for reverse mode."""
    P = pts.shape[0]
    g = np.empty((P, 3), dtype=model.dtype)
    caches = [] if want_caches else None
    for k in range(3):
        sp, cp = _sigma_forward(model, pts + eps * _FD_OFFSETS[2 * k].astype(model.dtype),
                                want_cache=want_caches)
        sm, cm = _sigma_forward(model, pts + eps * _FD_OFFSETS[2 * k + 1].astype(model.dtype),
                                want_cache=want_caches)
        g[:, k] = (sp - sm) / (2.0 * eps)
        if want_caches:
            caches.append((cp, cm))
    return g, caches


def _normalize_neg_gradient(g: np.ndarray):
    norm = np.linalg.norm(g, axis=1)
    degenerate = norm < DEGENERATE_NORM_EPS
    safe = np.where(degenerate, 1.0, norm)
    n = -g / safe[:, None]
    n[degenerate] = 0.0
    return n, degenerate


def _fd_normal_backward(model: FieldModel, caches, g: np.ndarray, normals: np.ndarray,
                        degenerate: np.ndarray, d_normals: np.ndarray, eps: float,
                        grads: GradBuffers) -> None:
    """Backprop d_normals through n = -g/|g| and the six offset density queries."""
    norm = np.linalg.norm(g, axis=1)
    safe = np.where(degenerate, 1.0, norm)
    # dn/dg = (-I + ghat ghat^T)/|g|; rows for degenerate samples are zero
    ghat = g / safe[:, None]
    dot = np.sum(d_normals * ghat, axis=1)
    dg = (ghat * dot[:, None] - d_normals) / safe[:, None]
    dg[degenerate] = 0.0
    inv = 1.0 / (2.0 * eps)
    for k in range(3):
        cp, cm = caches[k]
        d = dg[:, k] * inv
        _field_backward(model, cp, d, None, grads)
        _field_backward(model, cm, -d, None, grads)


# ---------------------------------------------------------------------------
# checkpoint container

def save_field(model: FieldModel, path) -> None:
    """Write the versioned binary checkpoint (header, per-level f32 arrays,
    decoder weights layer by layer; all little-endian, z-fastest)."""
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack(
            "<8i", cfg.num_levels, cfg.feature_dim, cfg.base_resolution,
            cfg.max_resolution, cfg.grid_cap, cfg.decoder_hidden,
            cfg.decoder_layers, model.active_levels))
        fh.write(struct.pack(
            "<5dB", cfg.bbox_half_extent, cfg.blob_lambda, cfg.blob_nu,
            cfg.normal_fd_eps, cfg.density_offset, 1 if cfg.blob_enabled else 0))
        for g in model.grids:
            fh.write(struct.pack("<I", g.shape[0]))
            fh.write(np.ascontiguousarray(g, dtype="<f4").tobytes())
        for w, b in zip(model.decoder_w, model.decoder_b):
            fh.write(struct.pack("<II", w.shape[0], w.shape[1]))
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_field(path) -> FieldModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a field checkpoint: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (L, F, base, maxr, cap, hidden, layers, active) = struct.unpack("<8i", fh.read(32))
        half, lam, nu, fd_eps, dz, blob_on = struct.unpack("<5dB", fh.read(41))
        cfg = FieldConfig(
            num_levels=L, feature_dim=F, base_resolution=base, max_resolution=maxr,
            grid_cap=cap, bbox_half_extent=half, decoder_hidden=hidden,
            decoder_layers=layers, blob_lambda=lam, blob_nu=nu,
            blob_enabled=bool(blob_on), normal_fd_eps=fd_eps, density_offset=dz)
        grids = []
        for _ in range(L):
            (res,) = struct.unpack("<I", fh.read(4))
            n = res * res * res * F
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(res, res, res, F)
            grids.append(data.astype(np.float32))
        ws, bs = [], []
        for _ in range(layers):
            din, dout = struct.unpack("<II", fh.read(8))
            ws.append(np.frombuffer(fh.read(4 * din * dout), dtype="<f4")
                      .reshape(din, dout).astype(np.float32))
            bs.append(np.frombuffer(fh.read(4 * dout), dtype="<f4").astype(np.float32))
    return FieldModel(grids=grids, decoder_w=ws, decoder_b=bs,
                      active_levels=active, config=cfg)
