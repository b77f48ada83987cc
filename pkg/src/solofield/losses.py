"""Objective terms and their combination into one parameter gradient.

Pixel-space losses are evaluated on full rendered images first; their
gradients are then pushed through the two renders (reference view, prior
view) by the reverse-mode renderer. The normal-smoothness term treats its
blurred branch as a constant (stop-gradient), and the score-distillation
term is injected as a precomputed pixel gradient rather than differentiated.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .field import FieldModel, GradBuffers
from .render import (
    BackgroundGrads,
    BackgroundModel,
    Camera,
    RenderOutput,
    ShadingSpec,
    ViewGrads,
    render_view_backward,
)

_LN2 = float(np.log(2.0))
_W_CLIP = 1e-7


@dataclass
class LossWeights:
    lambda_image: float = 5.0
    lambda_mask: float = 0.5
    lambda_normals: float = 0.5
    lambda_orient: float = 0.01
    lambda_entropy: float = 1e-3
    blur_kernel: int = 9
    blur_sigma: float = 3.0
    entropy_min_opacity: float = 1e-3

    def __post_init__(self):
        for name in ("lambda_image", "lambda_mask", "lambda_normals",
                     "lambda_orient", "lambda_entropy"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.blur_kernel % 2 == 0:
            raise ValueError("blur_kernel must be odd")


def loss_rec(rgb: np.ndarray, target: np.ndarray):
    """Mean squared reconstruction error over pixels and channels."""
    if rgb.shape != target.shape:
        raise ValueError(f"shape mismatch {rgb.shape} vs {target.shape}")
    diff = rgb - target
    n = diff.size
    return float(np.mean(diff * diff)), (2.0 / n) * diff


def loss_mask(opacity: np.ndarray, mask: np.ndarray):
    """Mean squared difference between rendered opacity and the object mask."""
    if opacity.shape != mask.shape:
        raise ValueError(f"shape mismatch {opacity.shape} vs {mask.shape}")
    diff = opacity - mask
    n = diff.size
    return float(np.mean(diff * diff)), (2.0 / n) * diff


def gaussian_kernel(k: int, sigma: float) -> np.ndarray:
    if k % 2 == 0:
        raise ValueError("kernel size must be odd")
    x = np.arange(k, dtype=float) - (k - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def gaussian_blur(img: np.ndarray, k: int = 9, sigma: float = 3.0) -> np.ndarray:
    """Separable Gaussian blur with reflect padding on the two leading axes."""
    if k > min(img.shape[0], img.shape[1]):
        raise ValueError("kernel larger than image")
    g = gaussian_kernel(k, sigma).astype(img.dtype)
    r = k // 2
    out = img
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="reflect")
        acc = np.zeros_like(out)
        for i in range(k):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(i, i + out.shape[axis])
            acc += g[i] * padded[tuple(sl)]
        out = acc
    return out


def loss_normals(normal_map: np.ndarray, weights: LossWeights):
    """Smoothness penalty |N - stopgrad(blur(N))|^2 (mean).

    The gradient flows only through the first branch: 2 (N - blur(N)) / n.
    """
    blurred = gaussian_blur(normal_map, weights.blur_kernel, weights.blur_sigma)
    diff = normal_map - blurred
    n = diff.size
    return float(np.mean(diff * diff)), (2.0 / n) * diff


def loss_entropy(weights: np.ndarray, min_opacity: float = 1e-3):
    """Mean binary entropy (bits) of per-ray opacity-renormalized weights.

    Rays whose total weight falls below min_opacity are skipped so the term
    measures distribution sharpness rather than emptiness.
    """
    w = np.asarray(weights, dtype=float)
    flat = w.reshape(-1, w.shape[-1])
    opac = flat.sum(axis=1)
    keep = opac >= min_opacity
    grad = np.zeros_like(flat)
    if not np.any(keep):
        return 0.0, grad.reshape(w.shape)
    wk = flat[keep]
    ok = opac[keep][:, None]
    wt = np.clip(wk / ok, _W_CLIP, 1.0 - _W_CLIP)
    h = -(wt * np.log2(wt) + (1 - wt) * np.log2(1 - wt))
    m = h.size
    val = float(h.sum() / m)
    hp = np.log2((1 - wt) / wt)
    inner = (hp * wt).sum(axis=1, keepdims=True)
    grad[keep] = (hp - inner) / (m * ok)
    return val, grad.reshape(w.shape)


def loss_orientation(sample_normals: np.ndarray, dirs: np.ndarray, weights: np.ndarray):
    """Ref-NeRF style penalty on normals that face away from the camera.

    sum_i w_i max(0, n_i . d)^2, averaged over rays. Returns
    (value, d/d_weights, d/d_normals).
    """
    n_rays = weights.size // weights.shape[-1]
    ndl = np.einsum("...nc,...c->...n", sample_normals, dirs)
    relu = np.maximum(ndl, 0.0)
    per = weights * relu * relu
    val = float(per.sum() / n_rays)
    d_w = relu * relu / n_rays
    d_n = (2.0 / n_rays) * (weights * relu)[..., None] * dirs[..., None, :]
    return val, d_w, d_n


@dataclass
class RenderedView:
    """A rendered view plus the arguments needed to re-walk it in reverse."""
    camera: Camera
    output: RenderOutput
    spec: ShadingSpec
    seed: int
    n_samples: int
    stratified: bool = True


def total_gradient(model: FieldModel, bg: Optional[BackgroundModel],
                   ref: RenderedView, target_image: np.ndarray, target_mask: np.ndarray,
                   prior: Optional[RenderedView], sds_grad: Optional[np.ndarray],
                   weights: LossWeights):
    """Combine all objective terms into one parameter gradient.

    Reference view: lambda_image * L_rec + lambda_mask * L_mask.
    Prior view: injected SDS pixel gradient + lambda_normals * L_normals
    + lambda_entropy * L_entropy + lambda_orient * L_orient.

    Returns (field_grads, bg_grads, scalars dict).
    """
    grads = GradBuffers.zeros_like(model)
    bg_grads = BackgroundGrads.zeros_like(bg) if bg is not None else None
    scalars = {"l_rec": 0.0, "l_mask": 0.0, "l_norm": 0.0, "l_ent": 0.0,
               "l_orient": 0.0, "sds_grad_norm": 0.0}

    ref_grads = ViewGrads()
    l_rec, g_rec = loss_rec(ref.output.rgb, target_image)
    l_mask, g_mask = loss_mask(ref.output.opacity, target_mask)
    scalars["l_rec"] = l_rec
    scalars["l_mask"] = l_mask
    if weights.lambda_image > 0:
        ref_grads.d_rgb = weights.lambda_image * g_rec
    if weights.lambda_mask > 0:
        ref_grads.d_opacity = weights.lambda_mask * g_mask
    if ref_grads.d_rgb is not None or ref_grads.d_opacity is not None:
        g, bgg = render_view_backward(
            model, ref.camera, ref_grads, spec=ref.spec, bg=bg,
            n_samples=ref.n_samples, stratified=ref.stratified, seed=ref.seed)
        grads.add(g)
        if bg_grads is not None and bgg is not None:
            bg_grads.add(bgg)

    if prior is not None:
        pg = ViewGrads()
        out = prior.output
        if sds_grad is not None:
            if sds_grad.shape != out.rgb.shape:
                raise ValueError("SDS gradient shape mismatch")
            pg.d_rgb = sds_grad
            scalars["sds_grad_norm"] = float(np.linalg.norm(sds_grad))
        if weights.lambda_normals > 0:
            l_n, g_n = loss_normals(out.normals, weights)
            scalars["l_norm"] = l_n
            pg.d_normal_map = weights.lambda_normals * g_n
        if weights.lambda_entropy > 0:
            l_e, g_e = loss_entropy(out.weights, weights.entropy_min_opacity)
            scalars["l_ent"] = l_e
            pg.d_weights = weights.lambda_entropy * g_e
        if weights.lambda_orient > 0:
            if out.sample_normals is None:
                raise ValueError("orientation loss needs per-sample normals")
            l_o, g_ow, g_on = loss_orientation(out.sample_normals, out.dirs, out.weights)
            scalars["l_orient"] = l_o
            if pg.d_weights is None:
                pg.d_weights = weights.lambda_orient * g_ow
            else:
                pg.d_weights = pg.d_weights + weights.lambda_orient * g_ow
            pg.d_sample_normals = weights.lambda_orient * g_on
        if any(x is not None for x in (pg.d_rgb, pg.d_normal_map, pg.d_weights,
                                       pg.d_sample_normals)):
            g, bgg = render_view_backward(
                model, prior.camera, pg, spec=prior.spec, bg=bg,
                n_samples=prior.n_samples, stratified=prior.stratified, seed=prior.seed)
            grads.add(g)
            if bg_grads is not None and bgg is not None:
                bg_grads.add(bgg)

    return grads, bg_grads, scalars


class LossLog:
    """Append-only CSV loss log: one row per training step."""

    FIELDS = ["step", "l_rec", "l_mask", "l_norm", "l_ent", "l_orient", "sds_grad_norm"]

    def __init__(self, path, append: bool = False):
        self.path = path
        if append and os.path.exists(path):
            return
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(self.FIELDS)

    def append(self, step: int, scalars: dict) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(
                [step] + [f"{scalars.get(k, 0.0):.8g}" for k in self.FIELDS[1:]])


def read_loss_log(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return rows
