"""Conditioning registry: textual-inversion jobs keyed by content hash.

The embedding optimization itself belongs to the model backend; what the
protocol guarantees is a stable cond_id per input content (idempotent
re-registration) and the augmentation stream feeding the job.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentationConfig, augment_batch


@dataclass
class InversionJob:
    cond_id: str
    init_label: str
    n_images: int
    augmentation: AugmentationConfig
    seed: int
    steps: int | None = None
    draws: list = field(default_factory=list)


class ConditioningRegistry:
    """Single-writer map from cond_id to inversion job metadata."""

    def __init__(self):
        self._jobs: dict[str, InversionJob] = {}
        self._lock = threading.Lock()

    @staticmethod
    def content_id(images: list[np.ndarray], init_label: str) -> str:
        digest = hashlib.sha256()
        digest.update(init_label.encode("utf-8"))
        for img in images:
            digest.update(np.ascontiguousarray(img, dtype="<f4").tobytes())
        return "ti-" + digest.hexdigest()[:20]

    def register(self, images: list[np.ndarray], init_label: str,
                 config: AugmentationConfig | None = None, seed: int = 0,
                 steps: int | None = None) -> InversionJob:
        cond_id = self.content_id(images, init_label)
        with self._lock:
            existing = self._jobs.get(cond_id)
            if existing is not None:
                return existing
            cfg = config or AugmentationConfig()
            draws = []
            for img in images:
                _, batch_draws = augment_batch(img, seed=seed, config=cfg)
                draws.extend(batch_draws)
            job = InversionJob(cond_id=cond_id, init_label=init_label,
                               n_images=len(images), augmentation=cfg, seed=seed,
                               steps=steps, draws=draws)
            self._jobs[cond_id] = job
            return job

    def get(self, cond_id: str) -> InversionJob | None:
        with self._lock:
            return self._jobs.get(cond_id)

    def __contains__(self, cond_id: str) -> bool:
        return self.get(cond_id) is not None
