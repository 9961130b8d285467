"""Noise schedule and the pluggable denoiser ("score provider") abstraction.

Providers estimate the noise inside a noised image. Two implementations
live here: an analytic one for a point-mass target distribution (the exact
optimal denoiser, used by tests and toy runs) and an HTTP client speaking
the sidecar wire protocol. Payloads on the wire are little-endian float32,
base64-wrapped inside a JSON envelope.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass

import numpy as np
import requests
import torch

from .cameras import CameraPose

DEFAULT_TIMEOUT_S = 120.0


class ProviderError(RuntimeError):
    """Base class for score-provider failures."""


class ProviderTimeout(ProviderError):
    pass


class ProviderHTTPError(ProviderError):
    pass


class ProviderShapeError(ProviderError):
    pass


class ProviderPayloadError(ProviderError):
    pass


@dataclass(frozen=True)
class Conditioning:
    """Opaque conditioning handed to providers.

    Remote providers use cond_id; the toy multi-view oracle reads the pose of
    the view being rendered; the analytic provider ignores both.
    """

    cond_id: str = "reference"
    pose: CameraPose | None = None


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear beta schedule with cached cumulative alpha products."""

    n_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError("need 0 < beta_start <= beta_end < 1")
        betas = np.linspace(self.beta_start, self.beta_end, self.n_steps, dtype=np.float64)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - betas))

    def alpha_bar(self, t: int) -> float:
        """Cumulative product of (1 - beta) up to timestep t (1-based)."""
        if not 1 <= t <= self.n_steps:
            raise ValueError(f"timestep {t} outside [1, {self.n_steps}]")
        return float(self.alpha_bars[t - 1])

    def noise_image(self, image: torch.Tensor, t: int, eps: torch.Tensor) -> torch.Tensor:
        a_bar = self.alpha_bar(t)
        return float(np.sqrt(a_bar)) * image + float(np.sqrt(1.0 - a_bar)) * eps


class DiracProvider:
    """Exact denoiser for a point-mass data distribution at `target`.

    eps_hat = (I_t - sqrt(abar_t) * target) / sqrt(1 - abar_t), which makes
    (eps_hat - eps) = sqrt(abar/(1-abar)) * (I - target) for any noise draw.
    """

    def __init__(self, target: torch.Tensor, schedule: DiffusionSchedule | None = None):
        self.target = target
        self.schedule = schedule or DiffusionSchedule()

    def predict_noise(self, noisy: torch.Tensor, t: int, cond=None,
                      epsilon: torch.Tensor | None = None) -> torch.Tensor:
        if noisy.shape != self.target.shape:
            raise ProviderShapeError(
                f"noisy image shape {tuple(noisy.shape)} != target {tuple(self.target.shape)}"
            )
        a_bar = self.schedule.alpha_bar(t)
        target = self.target.to(noisy.dtype)
        return (noisy - np.sqrt(a_bar) * target) / np.sqrt(1.0 - a_bar)


def encode_array(arr: torch.Tensor | np.ndarray) -> str:
    """Raw little-endian float32 bytes, base64-encoded."""
    np_arr = arr.detach().cpu().numpy() if isinstance(arr, torch.Tensor) else np.asarray(arr)
    return base64.b64encode(np.ascontiguousarray(np_arr, dtype="<f4").tobytes()).decode("ascii")


def decode_array(data: str, shape) -> np.ndarray:
    raw = base64.b64decode(data.encode("ascii"), validate=True)
    expected = 4 * int(np.prod(shape))
    if len(raw) != expected:
        raise ProviderShapeError(f"payload carries {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


class RemoteProvider:
    """HTTP client for a sidecar implementing the predict-noise protocol."""

    def __init__(self, base_url: str, timeout: float = DEFAULT_TIMEOUT_S,
                 guidance_scale: float | None = None, session=None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.guidance_scale = guidance_scale
        self.session = session or requests.Session()

    def predict_noise(self, noisy: torch.Tensor, t: int, cond=None,
                      epsilon: torch.Tensor | None = None) -> torch.Tensor:
        cond_id = cond.cond_id if isinstance(cond, Conditioning) else (cond or "")
        body = {
            "image_b64": encode_array(noisy),
            "shape": list(noisy.shape),
            "t": int(t),
            "cond_id": str(cond_id),
        }
        if self.guidance_scale is not None:
            body["guidance_scale"] = self.guidance_scale
        if epsilon is not None:
            body["epsilon_b64"] = encode_array(epsilon)
        try:
            resp = self.session.post(
                f"{self.base_url}/v1/predict_noise", json=body, timeout=self.timeout
            )
        except requests.Timeout as err:
            raise ProviderTimeout(f"predict_noise timed out after {self.timeout}s") from err
        except requests.RequestException as err:
            raise ProviderHTTPError(f"predict_noise transport failure: {err}") from err
        if resp.status_code != 200:
            raise ProviderHTTPError(f"predict_noise returned HTTP {resp.status_code}")
        try:
            payload = resp.json()
            eps = decode_array(payload["epsilon_b64"], payload["shape"])
        except ProviderShapeError:
            raise
        except Exception as err:
            raise ProviderShapeError(f"malformed predict_noise response: {err}") from err
        if tuple(eps.shape) != tuple(noisy.shape):
            raise ProviderShapeError(
                f"response shape {eps.shape} does not match request {tuple(noisy.shape)}"
            )
        if not np.isfinite(eps).all():
            raise ProviderPayloadError("response contains non-finite values")
        return torch.from_numpy(eps).to(noisy.dtype)

    def fetch_features(self, image: torch.Tensor) -> np.ndarray:
        """One unit-normalized feature row for an image via /v1/features."""
        body = {"image_b64": encode_array(image), "shape": list(image.shape)}
        resp = self.session.post(f"{self.base_url}/v1/features", json=body, timeout=self.timeout)
        if resp.status_code != 200:
            raise ProviderHTTPError(f"features returned HTTP {resp.status_code}")
        payload = resp.json()
        return decode_array(payload["features_b64"], (int(payload["dim"]),))
