"""Image loading shared by training and inference: decode, optional resize,
adaptive denoise, and a bounded in-memory cache keyed by manifest path."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .denoise import DenoiseConfig, adaptive_denoise
from .manifest import Manifest, SampleRecord


def load_rgb(path, image_size: int = 0) -> np.ndarray:
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        if image_size and rgb.size != (image_size, image_size):
            rgb = rgb.resize((image_size, image_size), Image.BILINEAR)
        return np.asarray(rgb, dtype=np.uint8)


class ImageStore:
    """Loads, denoises, and caches manifest images. Unreadable files raise
    OSError; callers decide whether that aborts the run or marks the sample."""

    def __init__(self, manifest: Manifest, denoise_config: DenoiseConfig | None = None,
                 image_size: int = 0, cache_limit: int = 5000):
        self.manifest = manifest
        self.denoise_config = denoise_config
        self.image_size = image_size
        self.cache_limit = cache_limit
        self._cache: dict[str, np.ndarray] = {}

    def get(self, record: SampleRecord) -> np.ndarray:
        key = record.image_path
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        arr = load_rgb(self.manifest.resolve_path(record), self.image_size)
        if self.denoise_config is not None:
            arr = adaptive_denoise(arr, self.denoise_config)
        if len(self._cache) < self.cache_limit:
            self._cache[key] = arr
        return arr
