"""Model backends behind the wire protocol.

Which models serve each endpoint is deployment configuration; the protocol
is the contract. Three weight-free backends ship here:

  echo   predict_noise returns the request's own epsilon (integration tests:
         the downstream score residual is exactly zero)
  dirac  analytic optimal denoiser for a fixed target image
  stub   deterministic image-derived outputs satisfying every contract
         (unit-norm features, [0,1] masks, relative depth, seeded noise)

A GPU deployment swaps in a backend wrapping real diffusion/feature/depth/
mask checkpoints; the app and schema do not change.
"""

from __future__ import annotations

import hashlib

import numpy as np

SCHEDULE_STEPS = 1000
BETA_START = 1e-4
BETA_END = 2e-2

_BETAS = np.linspace(BETA_START, BETA_END, SCHEDULE_STEPS, dtype=np.float64)
ALPHA_BARS = np.cumprod(1.0 - _BETAS)


def alpha_bar(t: int) -> float:
    if not 1 <= t <= SCHEDULE_STEPS:
        raise ValueError(f"timestep {t} outside [1, {SCHEDULE_STEPS}]")
    return float(ALPHA_BARS[t - 1])


def content_seed(*parts) -> int:
    """Stable 64-bit seed from request content."""
    digest = hashlib.sha256()
    for part in parts:
        if isinstance(part, np.ndarray):
            digest.update(np.ascontiguousarray(part, dtype="<f4").tobytes())
        else:
            digest.update(str(part).encode("utf-8"))
    return int.from_bytes(digest.digest()[:8], "little")


class StubBackend:
    """Weight-free deterministic implementations of every endpoint."""

    def __init__(self, feature_dim: int = 512, seed: int = 0):
        self.feature_dim = feature_dim
        self.seed = seed

    def predict_noise(self, noisy: np.ndarray, t: int, cond_id: str,
                      epsilon: np.ndarray | None = None,
                      guidance_scale: float | None = None) -> np.ndarray:
        rng = np.random.default_rng(content_seed(self.seed, "noise", noisy, t, cond_id))
        return rng.standard_normal(noisy.shape).astype(np.float32)

    def features(self, image: np.ndarray) -> np.ndarray:
        # fixed random projection of pixels, unit-normalized
        rng = np.random.default_rng(self.seed + 1)
        flat = image.reshape(-1).astype(np.float64)
        proj = rng.standard_normal((self.feature_dim, flat.size))
        vec = proj @ flat + 1e-8
        return (vec / np.linalg.norm(vec)).astype(np.float32)

    def depth(self, image: np.ndarray) -> np.ndarray:
        # relative depth stand-in: darker pixels read as farther
        lum = image[..., :3].mean(axis=-1) if image.ndim == 3 else image
        d = 1.0 - lum
        return (d - d.mean()).astype(np.float32)

    def mask(self, image: np.ndarray) -> np.ndarray:
        # foreground = dissimilarity to the median border color
        img = image if image.ndim == 3 else image[..., None]
        border = np.concatenate([
            img[0].reshape(-1, img.shape[-1]), img[-1].reshape(-1, img.shape[-1]),
            img[:, 0].reshape(-1, img.shape[-1]), img[:, -1].reshape(-1, img.shape[-1]),
        ])
        bg = np.median(border, axis=0)
        dist = np.abs(img - bg).mean(axis=-1)
        scale = max(float(dist.max()), 1e-6)
        return np.clip(dist / scale, 0.0, 1.0).astype(np.float32)


class EchoBackend(StubBackend):
    """predict_noise echoes the caller's epsilon; everything else is stub."""

    def predict_noise(self, noisy, t, cond_id, epsilon=None, guidance_scale=None):
        if epsilon is None:
            raise ValueError("echo mode requires epsilon_b64 in the request")
        return np.asarray(epsilon, dtype=np.float32)


class DiracBackend(StubBackend):
    """Analytic optimal denoiser for a point-mass distribution at `target`."""

    def __init__(self, target: np.ndarray, feature_dim: int = 512, seed: int = 0):
        super().__init__(feature_dim=feature_dim, seed=seed)
        self.target = np.asarray(target, dtype=np.float64)

    def predict_noise(self, noisy, t, cond_id, epsilon=None, guidance_scale=None):
        if noisy.shape != self.target.shape:
            raise ValueError(
                f"image shape {noisy.shape} does not match target {self.target.shape}"
            )
        a = alpha_bar(t)
        out = (noisy - np.sqrt(a) * self.target) / np.sqrt(1.0 - a)
        return out.astype(np.float32)


def make_backend(mode: str, dirac_target: np.ndarray | None = None,
                 feature_dim: int = 512, seed: int = 0):
    if mode == "stub":
        return StubBackend(feature_dim=feature_dim, seed=seed)
    if mode == "echo":
        return EchoBackend(feature_dim=feature_dim, seed=seed)
    if mode == "dirac":
        if dirac_target is None:
            raise ValueError("dirac mode needs a target image")
        return DiracBackend(dirac_target, feature_dim=feature_dim, seed=seed)
    if mode == "unavailable":
        return None
    raise ValueError(f"unknown backend mode {mode!r}")
