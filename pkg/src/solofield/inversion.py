"""Single-image textual inversion: heavy augmentations stand in for the
missing alternative views, and a conditioning embedding is optimized against
the denoising objective while the provider stays frozen."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np

from .images import LUMA, bilinear_resize
from .losses import gaussian_blur
from .optim import AdamState, adam_step
from .prior import DiffusionSchedule, ProviderError, ScoreProvider, add_noise
from .seeding import rng_for

_EMB_MAGIC = b"SFEM"


@dataclass
class AugmentationSpec:
    rotation_p: float = 0.75
    rotation_max_deg: float = 10.0
    rotation_fill: float = 1.0           # white
    crop_scale: tuple = (0.70, 1.3)      # area factor range
    crop_ratio: tuple = (3.0 / 4.0, 4.0 / 3.0)
    jitter_p: float = 0.75
    jitter_strength: float = 0.04        # brightness/contrast/saturation/hue
    grayscale_p: float = 0.10
    blur_p: float = 0.10
    blur_kernel: int = 5
    blur_sigma: tuple = (0.1, 2.0)
    hflip_p: float = 0.5
    out_size: int = 64

    def __post_init__(self):
        for name in ("rotation_p", "jitter_p", "grayscale_p", "blur_p", "hflip_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.crop_scale[0] <= 0:
            raise ValueError("crop scale must be positive")


IDENTITY_AUGMENTATIONS = AugmentationSpec(
    rotation_p=0.0, crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), jitter_p=0.0,
    grayscale_p=0.0, blur_p=0.0, hflip_p=0.0)


def _rotate_bilinear(img: np.ndarray, deg: float, fill: float) -> np.ndarray:
    """Rotate about the image center, bilinear, constant fill outside."""
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rad = np.radians(deg)
    c, s = np.cos(rad), np.sin(rad)
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float),
                         indexing="ij")
    # inverse map: output pixel -> source location
    sx = c * (xx - cx) + s * (yy - cy) + cx
    sy = -s * (xx - cx) + c * (yy - cy) + cy
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx = sx - x0
    fy = sy - y0
    out = np.full(img.shape, fill, dtype=img.dtype)
    valid = (sx >= -1) & (sx <= w) & (sy >= -1) & (sy <= h)

    def tap(yi, xi):
        inb = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        val = np.full(img.shape, fill, dtype=img.dtype)
        val[inb] = img[yi[inb], xi[inb]]
        return val

    interp = (tap(y0, x0) * ((1 - fy) * (1 - fx))[..., None]
              + tap(y0, x0 + 1) * ((1 - fy) * fx)[..., None]
              + tap(y0 + 1, x0) * (fy * (1 - fx))[..., None]
              + tap(y0 + 1, x0 + 1) * (fy * fx)[..., None])
    out[valid] = interp[valid]
    return out


def _hue_rotate(img: np.ndarray, amount: float) -> np.ndarray:
    """Rotate the chroma plane (YIQ) by amount turns; luma is preserved."""
    theta = 2.0 * np.pi * amount
    to_yiq = np.array([[0.299, 0.587, 0.114],
                       [0.595716, -0.274453, -0.321263],
                       [0.211456, -0.522591, 0.311135]])
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])
    m = np.linalg.inv(to_yiq) @ rot @ to_yiq
    return img @ m.T


def sample_augmentation(image: np.ndarray, spec: AugmentationSpec,
                        rng: np.random.Generator) -> np.ndarray:
    """One pseudo-alternative view: rotate, resized-crop, jitter, grayscale,
    blur, hflip (in that order), returned at out_size.

    Every random quantity is drawn unconditionally so draws stay aligned
    across probability branches.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]

    u_rot = rng.random()
    angle = rng.uniform(-spec.rotation_max_deg, spec.rotation_max_deg)
    if u_rot < spec.rotation_p and angle != 0.0:
        img = _rotate_bilinear(img, angle, spec.rotation_fill)

    area = h * w * rng.uniform(*spec.crop_scale)
    ratio = np.exp(rng.uniform(np.log(spec.crop_ratio[0]), np.log(spec.crop_ratio[1])))
    cw = int(np.clip(round(np.sqrt(area * ratio)), 1, w))
    ch = int(np.clip(round(np.sqrt(area / ratio)), 1, h))
    x0 = int(rng.integers(0, w - cw + 1))
    y0 = int(rng.integers(0, h - ch + 1))
    img = bilinear_resize(img[y0:y0 + ch, x0:x0 + cw], spec.out_size, spec.out_size)

    u_jit = rng.random()
    s = spec.jitter_strength
    fb = rng.uniform(1 - s, 1 + s)
    fc = rng.uniform(1 - s, 1 + s)
    fs = rng.uniform(1 - s, 1 + s)
    fh = rng.uniform(-s, s)
    if u_jit < spec.jitter_p and s > 0:
        img = img * fb
        mean = float((img @ LUMA).mean())
        img = (img - mean) * fc + mean
        luma = (img @ LUMA)[..., None]
        img = luma + (img - luma) * fs
        img = _hue_rotate(img, fh)

    u_gray = rng.random()
    if u_gray < spec.grayscale_p:
        img = np.repeat((img @ LUMA)[..., None], 3, axis=-1)

    u_blur = rng.random()
    sigma = rng.uniform(*spec.blur_sigma)
    if u_blur < spec.blur_p:
        img = gaussian_blur(img, spec.blur_kernel, sigma)

    u_flip = rng.random()
    if u_flip < spec.hflip_p:
        img = img[:, ::-1]

    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# vocabulary and embedding files

@dataclass
class VocabularyEntry:
    token: str
    embedding: np.ndarray
    anchor: Optional[np.ndarray] = None


def load_vocabulary(path, dim: Optional[int] = None) -> list[VocabularyEntry]:
    """Whitespace-separated rows: token, D floats, optionally D more floats."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            token, vals = parts[0], [float(x) for x in parts[1:]]
            d = dim if dim is not None else len(vals)
            if len(vals) == d:
                entries.append(VocabularyEntry(token, np.array(vals)))
            elif len(vals) == 2 * d:
                entries.append(VocabularyEntry(token, np.array(vals[:d]),
                                               np.array(vals[d:])))
            else:
                raise ValueError(f"{path}:{ln}: expected {d} or {2 * d} floats, "
                                 f"got {len(vals)}")
    if dim is None and entries:
        d0 = entries[0].embedding.size
        if any(e.embedding.size != d0 for e in entries):
            raise ValueError("inconsistent embedding dimensions in vocabulary")
    return entries


def init_embedding(mode: str, dim: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None,
                   vocab: Optional[Sequence[VocabularyEntry]] = None,
                   token: Optional[str] = None,
                   image_embedding: Optional[np.ndarray] = None) -> np.ndarray:
    """random | manual (vocabulary token) | nearest (cosine to an image anchor)."""
    if mode == "random":
        if rng is None or dim is None:
            raise ValueError("random init needs rng and dim")
        return rng.normal(0.0, 0.02, size=dim)
    if mode == "manual":
        if vocab is None or token is None:
            raise ValueError("manual init needs a vocabulary and token")
        for e in vocab:
            if e.token == token:
                return e.embedding.copy()
        raise ValueError(f"token {token!r} not in vocabulary")
    if mode == "nearest":
        if vocab is None or image_embedding is None:
            raise ValueError("nearest init needs a vocabulary and an image embedding")
        sims = []
        for e in vocab:
            ref = e.anchor if e.anchor is not None else e.embedding
            sims.append(float(np.dot(ref, image_embedding)
                              / (np.linalg.norm(ref) * np.linalg.norm(image_embedding)
                                 + 1e-12)))
        return vocab[int(np.argmax(sims))].embedding.copy()
    raise ValueError(f"unknown init mode {mode!r}")


def save_embedding(embedding: np.ndarray, path) -> None:
    e = np.asarray(embedding, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_EMB_MAGIC)
        fh.write(struct.pack("<I", e.size))
        fh.write(e.tobytes())


def load_embedding(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != _EMB_MAGIC:
            raise ValueError("not an embedding file")
        (dim,) = struct.unpack("<I", fh.read(4))
        return np.frombuffer(fh.read(4 * dim), dtype="<f4").astype(np.float64)


# ---------------------------------------------------------------------------
# inversion loop

def invert_embedding(provider: ScoreProvider, image: np.ndarray,
                     spec: AugmentationSpec, steps: int, lr: float, batch: int,
                     schedule: DiffusionSchedule, seed: int = 0,
                     init: Optional[np.ndarray] = None,
                     weight_decay: float = 0.0):
    """Optimize a conditioning embedding so the frozen provider denoises
    augmentations of the input image; returns (embedding, loss history)."""
    if not hasattr(provider, "embedding_backward"):
        raise ProviderError(
            "provider is not embedding-differentiable; use its remote "
            "invert_token op instead")
    e = (np.zeros(provider.embedding_dim) if init is None
         else np.asarray(init, dtype=np.float64).copy())
    if e.size != provider.embedding_dim:
        raise ValueError("init dimension does not match the provider")
    state = AdamState()
    history = []
    for step in range(steps):
        grad = np.zeros_like(e)
        loss = 0.0
        for i in range(batch):
            rng = rng_for(seed, step, i, "aug")
            aug = sample_augmentation(image, spec, rng)
            t = int(rng.integers(1, schedule.T + 1))
            eps = rng.standard_normal(aug.shape)
            noisy = add_noise(aug, t, eps, schedule)
            eps_hat = provider.predict_epsilon(noisy, t, e, schedule)
            resid = eps_hat - eps
            loss += float(np.mean(resid * resid))
            d_eps = (2.0 / resid.size) * resid
            grad += provider.embedding_backward(noisy, t, e, schedule, d_eps)
        grad /= batch
        history.append(loss / batch)
        adam_step([("e", e)], {"e": grad}, state, lr)
        if weight_decay > 0:
            e -= lr * weight_decay * e
    return e, history
