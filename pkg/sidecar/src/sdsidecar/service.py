"""Protocol op handlers: health, encode_text, invert_token, sds_gradient.

Each handler is a pure function over (model, header, payload) so the HTTP
layer stays trivial and everything is testable in process.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torchvision.transforms as T

from . import protocol
from .model import NATIVE_RES, TinyLatentModel

log = logging.getLogger(__name__)

SIDECAR_VERSION = "0.1.0"


@dataclass
class SidecarConfig:
    model_id: str = "tiny"
    device: str = "cpu"
    guidance: float = 100.0
    t_lo: float = 0.02
    t_hi: float = 0.98
    host: str = "127.0.0.1"
    port: int = 7433
    seed: int = 0


def augmentation_pipeline(image_size: int) -> T.Compose:
    """Heavy augmentations for single-image inversion (rotation with white
    fill, resized crop, color jitter, grayscale, blur, horizontal flip)."""
    return T.Compose([
        T.RandomApply([T.RandomRotation(degrees=10, fill=255)], p=0.75),
        T.RandomResizedCrop(image_size, scale=(0.70, 1.3), antialias=True),
        T.RandomApply([T.ColorJitter(0.04, 0.04, 0.04, 0.04)], p=0.75),
        T.RandomGrayscale(p=0.10),
        T.RandomApply([T.GaussianBlur(5, (0.1, 2))], p=0.10),
        T.RandomHorizontalFlip(),
    ])


def _clamp_t(model: TinyLatentModel, cfg: SidecarConfig, t_norm: float) -> float:
    return float(np.clip(t_norm, cfg.t_lo, cfg.t_hi))


def op_health(model: TinyLatentModel, cfg: SidecarConfig, header, payload):
    return {"ok": True, "model_id": model.model_id,
            "sidecar_version": SIDECAR_VERSION}, None


def op_encode_text(model: TinyLatentModel, cfg: SidecarConfig, header, payload):
    text = header.get("text")
    if not isinstance(text, str):
        return {"ok": False, "error": "encode_text needs a 'text' field"}, None
    emb = model.embed_text(text)
    return {"ok": True}, emb.numpy().astype(np.float32)


def op_sds_gradient(model: TinyLatentModel, cfg: SidecarConfig, header, payload):
    """Pixel-space SDS gradient at the render resolution.

    Upsample to the native resolution, encode to latents, noise at t, run
    classifier-free guidance with the frozen denoiser, and backpropagate
    w(t) (eps_hat - eps) through the encoder back to the input pixels.
    """
    if payload is None or payload.ndim != 3 or payload.shape[-1] != 3:
        return {"ok": False, "error": "sds_gradient needs an (H, W, 3) image"}, None
    t_norm = _clamp_t(model, cfg, float(header.get("t", 0.5)))
    guidance = float(header.get("guidance", cfg.guidance))
    token_id = header.get("token_id", "")
    suffix = header.get("view_suffix", "")
    seed = header.get("seed")
    if token_id and token_id not in model.tokens:
        return {"ok": False, "error": f"unknown token_id {token_id!r}"}, None

    x = torch.from_numpy(np.ascontiguousarray(payload, dtype=np.float32))
    x = x.permute(2, 0, 1).unsqueeze(0).requires_grad_(True)
    z = model.encode_image(x)

    gen = torch.Generator()
    gen.manual_seed(int(seed) if seed is not None else torch.seed() % (2**63))
    eps = torch.randn(z.shape, generator=gen)
    ab = model.alpha_bar(t_norm)
    z_t = math.sqrt(ab) * z + math.sqrt(1.0 - ab) * eps

    with torch.no_grad():
        try:
            cond = model.prompt_embedding(token_id, suffix)
        except ValueError as exc:
            return {"ok": False, "error": str(exc)}, None
        eps_c = model.predict_eps(z_t, t_norm, cond)
        if guidance == 1.0:
            eps_hat = eps_c
        else:
            eps_u = model.predict_eps(z_t, t_norm, model.null_embedding())
            eps_hat = eps_u + guidance * (eps_c - eps_u)

    weight = 1.0 - ab
    grad_z = weight * (eps_hat - eps)
    (grad_x,) = torch.autograd.grad(z, x, grad_outputs=grad_z)
    out = grad_x[0].permute(1, 2, 0).numpy().astype(np.float32)
    if not np.all(np.isfinite(out)):
        return {"ok": False, "error": "non-finite gradient"}, None
    return {"ok": True, "t": t_norm, "weight": weight}, out


def op_invert_token(model: TinyLatentModel, cfg: SidecarConfig, header, payload):
    """Single-image textual inversion executed model-side.

    Optimizes a fresh token embedding against the latent denoising loss over
    heavy augmentations of the input image; the denoiser and encoder stay
    frozen. Returns the registered token handle and the embedding bytes.
    """
    if payload is None or payload.ndim != 3 or payload.shape[-1] != 3:
        return {"ok": False, "error": "invert_token needs an (H, W, 3) image"}, None
    steps = int(header.get("steps", 3000))
    lr = float(header.get("lr", 5e-4))
    batch = int(header.get("batch", 16))
    seed = int(header.get("seed", cfg.seed))
    weight_decay = float(header.get("weight_decay", 1e-2))

    torch.manual_seed(seed)
    img = torch.from_numpy(np.ascontiguousarray(payload, dtype=np.float32))
    img = img.permute(2, 0, 1)
    aug = augmentation_pipeline(NATIVE_RES)

    emb = torch.randn(model.null_embedding().shape) * 0.02
    emb.requires_grad_(True)
    if steps > 0:
        opt = torch.optim.AdamW([emb], lr=lr, weight_decay=weight_decay)
    losses = []
    digest_before = model.state_digest()
    T_steps = model.alpha_bars.shape[0]
    for _ in range(steps):
        views = torch.stack([aug(img) for _ in range(batch)]).clamp(0, 1)
        with torch.no_grad():
            z = model.encoder(torch.nn.functional.interpolate(
                views, size=(NATIVE_RES, NATIVE_RES), mode="bilinear",
                align_corners=False) * 2.0 - 1.0)
        t_norm = float(torch.randint(1, T_steps + 1, (1,))) / T_steps
        ab = model.alpha_bar(t_norm)
        eps = torch.randn(z.shape)
        z_t = math.sqrt(ab) * z + math.sqrt(1.0 - ab) * eps
        pred = model.predict_eps(z_t, t_norm, emb)
        loss = torch.mean((pred - eps) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    assert model.state_digest() == digest_before, "provider weights must stay frozen"

    token_id = model.register_token(emb.detach())
    out_losses = losses if header.get("return_losses") else losses[-8:]
    return ({"ok": True, "token_id": token_id, "steps": steps, "losses": out_losses},
            emb.detach().numpy().astype(np.float32))


def op_free_token(model: TinyLatentModel, cfg: SidecarConfig, header, payload):
    token_id = header.get("token_id", "")
    return {"ok": bool(model.free_token(token_id)), "token_id": token_id}, None


OPS = {
    "health": op_health,
    "encode_text": op_encode_text,
    "sds_gradient": op_sds_gradient,
    "invert_token": op_invert_token,
    "free_token": op_free_token,
}


def handle_request(model: TinyLatentModel, cfg: SidecarConfig, data: bytes) -> bytes:
    """Decode one envelope, dispatch, encode the response envelope."""
    try:
        header, payload = protocol.decode_message(data)
    except protocol.ProtocolError as exc:
        return protocol.encode_message({"ok": False, "error": f"bad request: {exc}"})
    if header.get("version") != protocol.PROTOCOL_VERSION:
        return protocol.encode_message(
            {"ok": False, "error": f"unsupported protocol version "
                                   f"{header.get('version')!r}"})
    op = header.get("op")
    fn = OPS.get(op)
    if fn is None:
        return protocol.encode_message({"ok": False, "error": f"unknown op {op!r}"})
    try:
        rheader, rpayload = fn(model, cfg, header, payload)
    except Exception as exc:   # op failure must become a protocol error frame
        log.exception("op %s failed", op)
        return protocol.encode_message({"ok": False, "error": f"{op} failed: {exc}"})
    return protocol.encode_message(rheader, rpayload)
