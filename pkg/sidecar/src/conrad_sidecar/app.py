"""HTTP service exposing denoiser scores, inversion, features, depth, masks.

Payloads are little-endian float32, base64-wrapped in JSON. Statuses: 400
malformed input, 404 unknown conditioning, 503 model not loaded.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .augment import AugmentationConfig
from .backends import make_backend
from .inversion import ConditioningRegistry
from .wire import WireError, decode_f32, encode_f32


@dataclass(frozen=True)
class SidecarSettings:
    mode: str = "stub"  # stub | echo | dirac | unavailable
    feature_dim: int = 512
    seed: int = 0
    require_registration: bool = False
    dirac_target_path: str | None = None


class PredictNoiseRequest(BaseModel):
    image_b64: str
    shape: list[int]
    t: int
    cond_id: str = ""
    guidance_scale: float | None = None
    epsilon_b64: str | None = None


class InvertRequest(BaseModel):
    images_b64: list[str]
    shape: list[int]
    init_label: str
    steps: int | None = None
    seed: int = 0
    sample_count: int = Field(default=16, ge=1, le=256)


class ImageRequest(BaseModel):
    image_b64: str
    shape: list[int]


def _decode_or_400(data: str, shape) -> np.ndarray:
    try:
        arr = decode_f32(data, shape)
    except WireError as err:
        raise HTTPException(status_code=400, detail=str(err))
    if not np.isfinite(arr).all():
        raise HTTPException(status_code=400, detail="payload contains non-finite values")
    return arr


def create_app(settings: SidecarSettings | None = None) -> FastAPI:
    settings = settings or SidecarSettings()
    dirac_target = None
    if settings.mode == "dirac" and settings.dirac_target_path:
        from PIL import Image

        img = Image.open(settings.dirac_target_path).convert("RGB")
        dirac_target = np.asarray(img, dtype=np.float32) / 255.0
    backend = make_backend(settings.mode, dirac_target=dirac_target,
                           feature_dim=settings.feature_dim, seed=settings.seed)
    registry = ConditioningRegistry()
    app = FastAPI(title="conrad-sidecar")
    app.state.settings = settings
    app.state.registry = registry

    def require_backend():
        if backend is None:
            raise HTTPException(status_code=503, detail="model not loaded")
        return backend

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "mode": settings.mode}

    @app.post("/v1/predict_noise")
    def predict_noise(req: PredictNoiseRequest):
        b = require_backend()
        image = _decode_or_400(req.image_b64, req.shape)
        epsilon = None
        if req.epsilon_b64 is not None:
            epsilon = _decode_or_400(req.epsilon_b64, req.shape)
        if settings.require_registration and req.cond_id not in registry:
            raise HTTPException(status_code=404, detail=f"unknown cond_id {req.cond_id!r}")
        try:
            eps_hat = b.predict_noise(image, req.t, req.cond_id, epsilon=epsilon,
                                      guidance_scale=req.guidance_scale)
        except ValueError as err:
            raise HTTPException(status_code=400, detail=str(err))
        return {"epsilon_b64": encode_f32(eps_hat), "shape": list(eps_hat.shape)}

    @app.post("/v1/invert")
    def invert(req: InvertRequest):
        require_backend()
        if not req.images_b64:
            raise HTTPException(status_code=400, detail="at least one image required")
        images = [_decode_or_400(i, req.shape) for i in req.images_b64]
        cfg = AugmentationConfig(sample_count=req.sample_count)
        job = registry.register(images, req.init_label, config=cfg,
                                seed=req.seed, steps=req.steps)
        return {"cond_id": job.cond_id}

    @app.post("/v1/features")
    def features(req: ImageRequest):
        b = require_backend()
        image = _decode_or_400(req.image_b64, req.shape)
        vec = b.features(image)
        return {"features_b64": encode_f32(vec), "dim": int(vec.shape[0])}

    @app.post("/v1/depth")
    def depth(req: ImageRequest):
        b = require_backend()
        image = _decode_or_400(req.image_b64, req.shape)
        d = b.depth(image)
        return {"depth_b64": encode_f32(d), "shape": list(d.shape)}

    @app.post("/v1/mask")
    def mask(req: ImageRequest):
        b = require_backend()
        image = _decode_or_400(req.image_b64, req.shape)
        m = b.mask(image)
        return {"mask_b64": encode_f32(m), "shape": list(m.shape)}

    return app


def main():
    import uvicorn

    parser = argparse.ArgumentParser(description="score-provider sidecar")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=9000)
    parser.add_argument("--mode", default="stub",
                        choices=["stub", "echo", "dirac", "unavailable"])
    parser.add_argument("--dirac-target", default=None)
    parser.add_argument("--feature-dim", type=int, default=512)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    app = create_app(SidecarSettings(
        mode=args.mode, feature_dim=args.feature_dim, seed=args.seed,
        dirac_target_path=args.dirac_target,
    ))
    uvicorn.run(app, host=args.host, port=args.port)


if __name__ == "__main__":
    main()
