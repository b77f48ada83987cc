"""Diffusion schedule, score providers, and score-distillation pixel gradients.

Providers implement a frozen denoiser contract: given a noisy image, a
timestep, and a conditioning embedding they predict the injected noise.
Analytic providers work in pixel space and have closed forms (the optimal
denoiser of an isotropic Gaussian image prior); the remote provider defers
to a sidecar process over a small HTTP protocol and returns score-distillation
pixel gradients directly.
"""

from __future__ import annotations

import hashlib
import logging
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import protocol
from .render import Camera

log = logging.getLogger(__name__)


class ProviderError(RuntimeError):
    """Score-provider failure (transport, protocol, or capability)."""


# ---------------------------------------------------------------------------
# schedule

@dataclass
class DiffusionSchedule:
    betas: np.ndarray        # (T,) in (0,1)
    alphas: np.ndarray       # 1 - beta
    alpha_bars: np.ndarray   # cumulative products, strictly decreasing

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ValueError("betas must be a 1-D array")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must lie in (0, 1)")
        ab = np.asarray(self.alpha_bars)
        if np.any(np.diff(ab) >= 0):
            if ab.size > 1:
                raise ValueError("alpha_bar must be strictly decreasing")
        if ab[0] >= 1:
            raise ValueError("alpha_bar_1 must be < 1")

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def alpha_bar(self, t) -> np.ndarray:
        """alpha_bar at 1-indexed timestep(s) t."""
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]")
        return self.alpha_bars[t - 1]


def make_schedule(T: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012,
                  kind: str = "scaled_linear") -> DiffusionSchedule:
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if T < 1:
        raise ValueError("T must be >= 1")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T)
    elif kind == "scaled_linear":
        betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, T) ** 2
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return DiffusionSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def add_noise(image: np.ndarray, t: int, epsilon: np.ndarray,
              schedule: DiffusionSchedule) -> np.ndarray:
    """Forward noising: sqrt(ab_t) * I + sqrt(1 - ab_t) * eps."""
    if np.shape(image) != np.shape(epsilon):
        raise ValueError("epsilon shape must match image shape")
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * image + np.sqrt(1.0 - ab) * epsilon


def sample_t(rng: np.random.Generator, schedule: DiffusionSchedule,
             lo: float = 0.02, hi: float = 0.98) -> int:
    """Timestep from u ~ U(lo, hi): t = round(u * T), clamped to [1, T]."""
    u = rng.uniform(lo, hi)
    return int(np.clip(round(u * schedule.T), 1, schedule.T))


# ---------------------------------------------------------------------------
# providers

class ScoreProvider:
    """Frozen denoiser contract: epsilon prediction and/or direct SDS gradients."""

    epsilon_prediction: bool = False
    direct_sds_gradient: bool = False
    native_resolution: Optional[int] = None
    embedding_dim: int = 16

    def __init__(self):
        if not (self.epsilon_prediction or self.direct_sds_gradient):
            raise ProviderError("provider exposes no capability")

    def null_embedding(self) -> np.ndarray:
        return np.zeros(self.embedding_dim)

    def predict_epsilon(self, noisy, t, cond, schedule, camera=None) -> np.ndarray:
        raise NotImplementedError

    def _state_arrays(self) -> list[np.ndarray]:
        return []

    def state_digest(self) -> str:
        h = hashlib.sha256()
        for a in self._state_arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


class GaussianPriorProvider(ScoreProvider):
    """Optimal denoiser of an isotropic Gaussian image prior N(mu(cond), I).

    The conditioning embedding decodes to the prior mean: either a constant
    color broadcast from its first three components, or a stored image
    (in which case the all-zero null embedding decodes to a black image).
    """

    epsilon_prediction = True

    def __init__(self, mean_image: Optional[np.ndarray] = None, embedding_dim: int = 16):
        self.mean_image = None if mean_image is None else np.asarray(mean_image, dtype=float)
        self.embedding_dim = embedding_dim
        super().__init__()

    def decode_mean(self, cond: np.ndarray, shape) -> np.ndarray:
        cond = np.asarray(cond, dtype=float)
        if self.mean_image is not None:
            if np.any(cond != 0):
                return self.mean_image
            return np.zeros(shape)
        mu = np.zeros(shape)
        mu[...] = cond[:3]
        return mu

    def predict_epsilon(self, noisy, t, cond, schedule, camera=None) -> np.ndarray:
        ab = schedule.alpha_bar(t)
        mu = self.decode_mean(cond, np.shape(noisy))
        return (noisy - np.sqrt(ab) * mu) / np.sqrt(1.0 - ab)

    def embedding_backward(self, noisy, t, cond, schedule, d_eps) -> np.ndarray:
        """d(loss)/d(cond) given upstream d(loss)/d(eps_hat)."""
        if self.mean_image is not None:
            raise ProviderError("stored-image provider is not embedding-differentiable")
        ab = schedule.alpha_bar(t)
        d_mu = -np.sqrt(ab) / np.sqrt(1.0 - ab) * np.asarray(d_eps)
        grad = np.zeros(self.embedding_dim)
        grad[:3] = d_mu.reshape(-1, 3).sum(axis=0)
        return grad

    def _state_arrays(self):
        return [] if self.mean_image is None else [self.mean_image]


class OracleViewProvider(ScoreProvider):
    """Desk-scale stand-in for a model that can imagine novel views: the
    Gaussian-prior denoiser whose mean is the stored ground-truth image of
    the nearest camera (by angular distance of the view directions)."""

    epsilon_prediction = True

    def __init__(self, views: Sequence[tuple[Camera, np.ndarray]], embedding_dim: int = 16):
        if not views:
            raise ValueError("need at least one stored view")
        self.cameras = [v[0] for v in views]
        self.images = [np.asarray(v[1], dtype=float) for v in views]
        d = np.stack([c.position - c.look_at for c in self.cameras])
        self._units = d / np.linalg.norm(d, axis=1, keepdims=True)
        self.embedding_dim = embedding_dim
        super().__init__()

    def nearest_view(self, camera: Camera) -> int:
        u = camera.position - camera.look_at
        u = u / np.linalg.norm(u)
        return int(np.argmax(self._units @ u))

    def predict_epsilon(self, noisy, t, cond, schedule, camera=None) -> np.ndarray:
        if camera is None:
            raise ProviderError("oracle view provider needs the render camera")
        mu = self.images[self.nearest_view(camera)]
        ab = schedule.alpha_bar(t)
        return (noisy - np.sqrt(ab) * mu) / np.sqrt(1.0 - ab)

    def _state_arrays(self):
        return self.images


def guided_epsilon(provider: ScoreProvider, noisy, t, cond, schedule,
                   guidance: float = 1.0, camera=None) -> np.ndarray:
    """Classifier-free guidance: eps_u + s * (eps_c - eps_u)."""
    if not provider.epsilon_prediction:
        raise ProviderError("provider lacks epsilon prediction")
    eps_c = provider.predict_epsilon(noisy, t, cond, schedule, camera=camera)
    if guidance == 1.0:
        return eps_c
    eps_u = provider.predict_epsilon(noisy, t, provider.null_embedding(), schedule,
                                     camera=camera)
    return eps_u + guidance * (eps_c - eps_u)


@dataclass
class SDSGradient:
    grad: np.ndarray
    t_used: int
    weight_used: float


WEIGHT_MODES = ("uniform", "sigma2")


def sds_weight(schedule: DiffusionSchedule, t: int, mode: str) -> float:
    if mode == "uniform":
        return 1.0
    if mode == "sigma2":
        return float(1.0 - schedule.alpha_bar(t))
    raise ValueError(f"unknown weight mode {mode!r}")


def sds_pixel_gradient(provider: ScoreProvider, image: np.ndarray, cond,
                       schedule: DiffusionSchedule, rng: np.random.Generator,
                       weight_mode: str = "sigma2", guidance: float = 1.0,
                       camera=None, t_range=(0.02, 0.98)) -> SDSGradient:
    """One stochastic score-distillation pixel gradient w(t) (eps_hat - eps).

    Samples t and the injected noise, asks the frozen provider for a guided
    prediction, and returns the residual; nothing is differentiated through
    the provider.
    """
    if not np.all(np.isfinite(image)):
        raise ValueError("non-finite image")
    t = sample_t(rng, schedule, *t_range)
    eps = rng.standard_normal(np.shape(image))
    noisy = add_noise(image, t, eps, schedule)
    eps_hat = guided_epsilon(provider, noisy, t, cond, schedule,
                             guidance=guidance, camera=camera)
    w = sds_weight(schedule, t, weight_mode)
    grad = (w * (eps_hat - eps)).astype(np.asarray(image).dtype, copy=False)
    return SDSGradient(grad=grad, t_used=t, weight_used=w)


# ---------------------------------------------------------------------------
# remote provider

class RemoteScoreProvider(ScoreProvider):
    """Client for the sidecar wire protocol; exposes direct SDS gradients."""

    direct_sds_gradient = True

    def __init__(self, endpoint: str, timeout: float = 120.0, retries: int = 3,
                 backoff: float = 0.5):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        super().__init__()

    # -- transport ----------------------------------------------------------
    def _post(self, header: dict, payload=None):
        body = protocol.encode_message(header, payload)
        last = None
        for attempt in range(self.retries):
            try:
                req = urllib.request.Request(
                    self.endpoint, data=body,
                    headers={"Content-Type": "application/octet-stream"})
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    data = resp.read()
                break
            except (urllib.error.URLError, ConnectionError, TimeoutError, OSError) as exc:
                last = exc
                if attempt + 1 < self.retries:
                    delay = self.backoff * (2 ** attempt)
                    log.warning("provider request failed (%s); retrying in %.1fs",
                                exc, delay)
                    time.sleep(delay)
        else:
            raise ProviderError(f"transport failure after {self.retries} attempts: {last}")
        try:
            rheader, rpayload = protocol.decode_message(data)
        except protocol.ProtocolError as exc:
            raise ProviderError(f"malformed response: {exc}") from exc
        if rheader.get("version") != protocol.PROTOCOL_VERSION:
            raise ProviderError(f"protocol version mismatch: {rheader.get('version')}")
        if not rheader.get("ok", False):
            raise ProviderError(f"provider error: {rheader.get('error', 'unknown')}")
        return rheader, rpayload

    # -- ops ----------------------------------------------------------------
    def health(self) -> dict:
        header, _ = self._post({"op": "health"})
        return header

    def encode_text(self, text: str) -> np.ndarray:
        header, payload = self._post({"op": "encode_text", "text": text})
        if payload is None:
            raise ProviderError("encode_text returned no embedding")
        return payload

    def invert_token(self, image: np.ndarray, steps: int, lr: float,
                     batch: int = 16, seed: int = 0):
        header, payload = self._post(
            {"op": "invert_token", "steps": int(steps), "lr": float(lr),
             "batch": int(batch), "seed": int(seed)},
            np.asarray(image, dtype=np.float32))
        if "token_id" not in header or payload is None:
            raise ProviderError("invert_token response missing token or embedding")
        return header["token_id"], payload

    def sds_gradient(self, image: np.ndarray, t_norm: float, token_id: str,
                     view_suffix: str = "front", guidance: float = 100.0,
                     seed: Optional[int] = None):
        header = {"op": "sds_gradient", "t": float(t_norm), "guidance": float(guidance),
                  "token_id": token_id, "view_suffix": view_suffix}
        if seed is not None:
            header["seed"] = int(seed)
        rheader, payload = self._post(header, np.asarray(image, dtype=np.float32))
        if payload is None:
            raise ProviderError("sds_gradient returned no payload")
        if payload.shape != np.shape(image):
            raise ProviderError(
                f"gradient shape {payload.shape} does not match image {np.shape(image)}")
        return payload, float(rheader.get("weight", 1.0))


def remote_sds_gradient(endpoint, image: np.ndarray, t_norm: float, cond_token: str,
                        view_suffix: str = "front", guidance: float = 100.0,
                        seed: Optional[int] = None) -> SDSGradient:
    """Fetch a sidecar-computed pixel-space SDS gradient at render resolution.

    t_norm is the normalized timestep in (0, 1); the sidecar owns the mapping
    to its native schedule.
    """
    if not 0.0 < t_norm < 1.0:
        raise ValueError("t_norm must lie in (0, 1)")
    provider = endpoint if isinstance(endpoint, RemoteScoreProvider) \
        else RemoteScoreProvider(endpoint)
    grad, weight = provider.sds_gradient(image, t_norm, cond_token,
                                         view_suffix=view_suffix, guidance=guidance,
                                         seed=seed)
    grad = grad.astype(np.asarray(image).dtype, copy=False)
    return SDSGradient(grad=grad, t_used=int(round(t_norm * 1000)), weight_used=weight)
