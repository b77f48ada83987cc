"""The outer optimization loop: camera/light sampling, shading schedule,
view-dependent prompt selection, coarse-to-fine switching, Adam updates,
checkpoints, and run-directory bookkeeping."""

from __future__ import annotations

import enum
import logging
import math
import os
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .field import (
    FieldConfig,
    FieldModel,
    grid_init,
    load_field,
    save_field,
    set_active_levels,
)
from .losses import LossLog, LossWeights, RenderedView, total_gradient
from .optim import AdamState, adam_step, clip_grads_  # noqa: F401 (re-export)
from .prior import (
    DiffusionSchedule,
    ProviderError,
    ScoreProvider,
    make_schedule,
    remote_sds_gradient,
    sample_t,
    sds_pixel_gradient,
)
from .render import (
    ALBEDO_SHADING,
    BackgroundModel,
    Camera,
    ShadingSpec,
    camera_from_spherical,
    init_background,
    render_view,
)
from .seeding import rng_for

log = logging.getLogger(__name__)


class ViewSuffix(str, enum.Enum):
    FRONT = "front"
    SIDE = "side"
    BACK = "back"
    OVERHEAD = "overhead"
    BOTTOM = "bottom"


@dataclass
class TrainConfig:
    iters: int = 5000
    lr: float = 1e-3
    seed: int = 0
    # reference camera
    ref_distance: float = 1.8
    ref_elevation: float = 15.0          # 40 degrees for clearly-overhead subjects
    ref_azimuth: float = 0.0
    ref_fov: float = 40.0
    # rendering
    render_res: int = 96
    n_samples: int = 64
    stratified: bool = True
    bg_hidden: int = 16
    # prior-view camera distribution
    prior_distance: tuple = (1.0, 1.5)
    fov_range: tuple = (40.0, 70.0)
    elevation_range: tuple = (-10.0, 90.0)
    elevation_uniform_p: float = 0.5
    near_ref_every: int = 10             # 0 disables
    # shading schedule
    albedo_warmup: int = 1000
    shading_probs: tuple = (0.2, 0.4, 0.4)   # albedo, diffuse, textureless
    light_ambient: float = 0.1
    light_diffuse: float = 0.9
    light_noise: float = 1.0
    # prior objective
    guidance: float = 100.0
    weight_mode: str = "sigma2"
    t_range: tuple = (0.02, 0.98)
    # coarse-to-fine
    coarse_levels: int = 8
    switch_step: Optional[int] = None    # default iters // 2
    # optimization hygiene
    clip_grad_norm: float = 10.0         # 0 disables
    checkpoint_every: int = 500
    # losses and field
    weights: LossWeights = dc_field(default_factory=LossWeights)
    field: FieldConfig = dc_field(default_factory=FieldConfig)

    def __post_init__(self):
        if abs(sum(self.shading_probs) - 1.0) > 1e-9:
            raise ValueError("shading probabilities must sum to 1")
        switch = self.resolved_switch_step()
        if not 0 <= switch <= self.iters:
            raise ValueError("switch_step must lie in [0, iters]")

    def resolved_switch_step(self) -> int:
        return self.iters // 2 if self.switch_step is None else self.switch_step

    def ref_camera(self) -> Camera:
        return camera_from_spherical(self.ref_distance, self.ref_azimuth,
                                     self.ref_elevation, self.ref_fov,
                                     self.render_res, self.render_res)


# ---------------------------------------------------------------------------
# sampling ops

def sample_prior_camera(rng: np.random.Generator, cfg: TrainConfig, step: int):
    """Random novel-view camera; every near_ref_every-th step sits near the
    reference camera instead. Returns (camera, near_ref_flag)."""
    distance = rng.uniform(*cfg.prior_distance)
    azimuth = rng.uniform(0.0, 360.0)
    if rng.random() < cfg.elevation_uniform_p:
        elevation = rng.uniform(*cfg.elevation_range)
    else:
        elevation = math.degrees(math.asin(rng.random()))  # area-uniform upper half
    fov = rng.uniform(*cfg.fov_range)
    near_ref = cfg.near_ref_every > 0 and step % cfg.near_ref_every == 0
    if near_ref:
        pos = cfg.ref_camera().position + rng.standard_normal(3)
        cam = Camera(position=pos, fov_deg=fov,
                     width=cfg.render_res, height=cfg.render_res)
    else:
        cam = camera_from_spherical(distance, azimuth, elevation, fov,
                                    cfg.render_res, cfg.render_res)
    return cam, near_ref


def sample_light(camera: Camera, rng: np.random.Generator, scale: float = 1.0):
    """Point light near the prior camera: position + N(0, scale^2 I)."""
    return camera.position + scale * rng.standard_normal(3)


def _spherical_of(camera: Camera):
    rel = camera.position - camera.look_at
    r = np.linalg.norm(rel)
    elevation = math.degrees(math.asin(np.clip(rel[1] / r, -1.0, 1.0)))
    azimuth = math.degrees(math.atan2(rel[0], rel[2]))
    return azimuth, elevation


def view_prompt_suffix(prior_cam: Camera, ref_cam: Camera) -> ViewSuffix:
    """Suffix from the prior camera's pose relative to the reference camera."""
    az_p, el_p = _spherical_of(prior_cam)
    az_r, _ = _spherical_of(ref_cam)
    if el_p > 60.0:
        return ViewSuffix.OVERHEAD
    if el_p < 0.0:
        return ViewSuffix.BOTTOM
    delta = abs((az_p - az_r + 180.0) % 360.0 - 180.0)
    if delta <= 30.0:
        return ViewSuffix.FRONT
    if delta <= 90.0:
        return ViewSuffix.SIDE
    return ViewSuffix.BACK


def shading_for_step(step: int, rng: np.random.Generator, cfg: TrainConfig) -> ShadingSpec:
    """Prior-view shading: albedo during warmup, then stochastic mode choice.
    (The reconstruction view always uses albedo shading.)"""
    if step <= cfg.albedo_warmup:
        return ShadingSpec(mode="albedo", ambient=1.0, light_color=0.0)
    mode = ["albedo", "diffuse", "textureless"][
        int(rng.choice(3, p=np.asarray(cfg.shading_probs)))]
    return ShadingSpec(mode=mode, ambient=cfg.light_ambient,
                       light_color=cfg.light_diffuse)


# ---------------------------------------------------------------------------
# parameters as named tensors

def model_params(model: FieldModel, bg: Optional[BackgroundModel]):
    for i, g in enumerate(model.grids):
        yield f"grid{i}", g
    for i, w in enumerate(model.decoder_w):
        yield f"dec_w{i}", w
    for i, b in enumerate(model.decoder_b):
        yield f"dec_b{i}", b
    if bg is not None:
        yield from bg.tensors()


def _grad_items(grads, bg_grads):
    items = list(grads.tensors())
    if bg_grads is not None:
        items.extend(bg_grads.tensors())
    return items


def _derive_seed(*keys) -> int:
    return int(rng_for(*keys).integers(0, 2**31 - 1))


# ---------------------------------------------------------------------------
# run directory and checkpoints

def config_text(cfg: TrainConfig) -> str:
    lines = []

    def emit(prefix, obj):
        for name, val in vars(obj).items():
            if isinstance(val, (LossWeights, FieldConfig)):
                emit(f"{name}.", val)
            elif isinstance(val, tuple):
                lines.append(f"{prefix}{name}={','.join(repr(v) for v in val)}")
            else:
                lines.append(f"{prefix}{name}={val!r}")

    emit("", cfg)
    return "\n".join(lines) + "\n"


def save_checkpoint(path, model: FieldModel, bg: BackgroundModel,
                    adam: AdamState, step: int) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_field(model, path / "field.ckpt")
    arrays = {"step": np.array(step), "adam_step": np.array(adam.step)}
    for name, arr in bg.tensors():
        arrays[name] = arr
    for key, arr in adam.m.items():
        arrays[f"adam_m::{key}"] = arr
    for key, arr in adam.v.items():
        arrays[f"adam_v::{key}"] = arr
    np.savez(path / "state.npz", **arrays)


def load_checkpoint(path):
    """Returns (model, bg, adam, step)."""
    path = Path(path)
    model = load_field(path / "field.ckpt")
    with np.load(path / "state.npz") as data:
        bg = BackgroundModel(w1=data["bg_w1"].copy(), b1=data["bg_b1"].copy(),
                             w2=data["bg_w2"].copy(), b2=data["bg_b2"].copy())
        adam = AdamState(step=int(data["adam_step"]))
        for key in data.files:
            if key.startswith("adam_m::"):
                adam.m[key[8:]] = data[key].copy()
            elif key.startswith("adam_v::"):
                adam.v[key[8:]] = data[key].copy()
        step = int(data["step"])
    return model, bg, adam, step


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainInputs:
    image: np.ndarray                 # (res, res, 3) reference view
    mask: np.ndarray                  # (res, res) in [0, 1]
    embedding: Optional[np.ndarray] = None
    token_id: Optional[str] = None    # remote-provider conditioning handle


@dataclass
class TrainResult:
    model: FieldModel
    bg: BackgroundModel
    history: list
    out_dir: Optional[Path] = None


def train(inputs: TrainInputs, cfg: TrainConfig, provider: ScoreProvider,
          schedule: Optional[DiffusionSchedule] = None, out_dir=None,
          resume_from=None, grad_hook=None) -> TrainResult:
    """Optimize the field against the reference view and the score prior.

    Deterministic per cfg.seed: every stochastic choice derives from
    (seed, step, purpose), so interrupted runs resume bit-exactly from
    checkpoints.
    """
    res = cfg.render_res
    if inputs.image.shape != (res, res, 3):
        raise ValueError(f"reference image must be {(res, res, 3)}, "
                         f"got {inputs.image.shape}")
    if inputs.mask.shape != (res, res):
        raise ValueError("mask shape must match the render resolution")
    schedule = schedule or make_schedule()
    embedding = (np.zeros(getattr(provider, "embedding_dim", 16))
                 if inputs.embedding is None else inputs.embedding)

    if resume_from is not None:
        model, bg, adam, start_step = load_checkpoint(resume_from)
    else:
        model = grid_init(cfg.field, cfg.seed)
        bg = init_background(cfg.seed, hidden=cfg.bg_hidden)
        adam = AdamState()
        start_step = 0

    out_dir = Path(out_dir) if out_dir is not None else None
    loss_log = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(config_text(cfg))
        loss_log = LossLog(out_dir / "losses.csv", append=resume_from is not None)

    ref_cam = cfg.ref_camera()
    switch = cfg.resolved_switch_step()
    L = cfg.field.num_levels
    w = cfg.weights
    history = []

    target_image = np.asarray(inputs.image, dtype=np.float64)
    target_mask = np.asarray(inputs.mask, dtype=np.float64)

    for step in range(start_step + 1, cfg.iters + 1):
        set_active_levels(model, min(cfg.coarse_levels, L) if step <= switch else L)

        ref_seed = _derive_seed(cfg.seed, step, "ref")
        ref_out = render_view(model, ref_cam, spec=ALBEDO_SHADING, bg=bg,
                              n_samples=cfg.n_samples, stratified=cfg.stratified,
                              seed=ref_seed)
        ref_view = RenderedView(ref_cam, ref_out, ALBEDO_SHADING, ref_seed,
                                cfg.n_samples, cfg.stratified)

        pose_rng = rng_for(cfg.seed, step, "pose")
        prior_cam, _ = sample_prior_camera(pose_rng, cfg, step)
        shade_spec = shading_for_step(step, pose_rng, cfg)
        shade_spec.light_position = sample_light(prior_cam, pose_rng, cfg.light_noise)
        suffix = view_prompt_suffix(prior_cam, ref_cam)

        prior_seed = _derive_seed(cfg.seed, step, "prior")
        want_normals = w.lambda_normals > 0 or w.lambda_orient > 0
        prior_out = render_view(model, prior_cam, spec=shade_spec, bg=bg,
                                n_samples=cfg.n_samples, stratified=cfg.stratified,
                                seed=prior_seed, want_normals=want_normals,
                                want_sample_normals=w.lambda_orient > 0)
        prior_view = RenderedView(prior_cam, prior_out, shade_spec, prior_seed,
                                  cfg.n_samples, cfg.stratified)

        sds_rng = rng_for(cfg.seed, step, "sds")
        try:
            if provider.direct_sds_gradient:
                t = sample_t(sds_rng, schedule, *cfg.t_range)
                sds = remote_sds_gradient(
                    provider, prior_out.rgb, t / schedule.T,
                    inputs.token_id or "", view_suffix=suffix.value,
                    guidance=cfg.guidance, seed=_derive_seed(cfg.seed, step, "rsds"))
            else:
                sds = sds_pixel_gradient(
                    provider, prior_out.rgb, embedding, schedule, sds_rng,
                    weight_mode=cfg.weight_mode, guidance=cfg.guidance,
                    camera=prior_cam, t_range=cfg.t_range)
        except ProviderError:
            if out_dir is not None:
                save_checkpoint(out_dir / "ckpt_abort", model, bg, adam, step - 1)
                log.error("provider failed at step %d; wrote resumable checkpoint", step)
            raise

        grads, bg_grads, scalars = total_gradient(
            model, bg, ref_view, target_image, target_mask, prior_view,
            sds.grad, w)
        if grad_hook is not None:
            grad_hook(step, grads, bg_grads)

        items = _grad_items(grads, bg_grads)
        if cfg.clip_grad_norm and cfg.clip_grad_norm > 0:
            clip_grads_(items, cfg.clip_grad_norm)
        adam_step(model_params(model, bg), items, adam, cfg.lr)

        scalars["step"] = step
        history.append(scalars)
        if loss_log is not None:
            loss_log.append(step, scalars)
        if out_dir is not None and cfg.checkpoint_every > 0 \
                and step % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"ckpt_step{step:06d}", model, bg, adam, step)

    set_active_levels(model, L if cfg.iters > switch else min(cfg.coarse_levels, L))
    if out_dir is not None:
        save_checkpoint(out_dir / "ckpt_final", model, bg, adam, cfg.iters)
    return TrainResult(model=model, bg=bg, history=history, out_dir=out_dir)
