"""Train-time augmentations, batch mixing, and deterministic TTA views.

Training augmentations emulate the corruptions seen in the wild: flips,
rotations, additive Gaussian noise, Gaussian and motion blur, and brightness /
contrast jitter. Each transform fires independently with its own probability
and all randomness comes from an explicit generator, so a fixed generator
state reproduces the output exactly.

Batch mixing implements mixup (convex pixel blend) and cutmix (box paste),
mutually exclusive within a batch. TTA views default to the eight dihedral
transforms, which are exact and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from .errors import AugmentError


@dataclass(frozen=True)
class AugmentConfig:
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rotate_p: float = 0.5
    rotation_range: float = 180.0          # degrees; angle ~ U(-range, range)
    noise_p: float = 0.3
    noise_sigma_range: tuple[float, float] = (2.0, 12.0)
    blur_p: float = 0.3
    blur_sigma_range: tuple[float, float] = (0.4, 1.6)
    motion_p: float = 0.3
    motion_length_range: tuple[int, int] = (3, 9)
    brightness_p: float = 0.3
    brightness_delta: float = 32.0         # additive, intensity units
    contrast_p: float = 0.3
    contrast_delta: float = 0.25           # multiplicative, about the image mean
    mix_prob: float = 0.15                 # per-batch, for each of cutmix / mixup
    mix_alpha: float = 1.0
    value_range: tuple[float, float] = (0.0, 255.0)

    def __post_init__(self):
        for name in ("hflip_p", "vflip_p", "rotate_p", "noise_p", "blur_p",
                     "motion_p", "brightness_p", "contrast_p", "mix_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise AugmentError(f"{name} must be in [0, 1], got {v}")
        for name in ("noise_sigma_range", "blur_sigma_range", "motion_length_range"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise AugmentError(f"{name} is empty: {(lo, hi)}")
        if self.mix_alpha <= 0:
            raise AugmentError(f"mix_alpha must be > 0, got {self.mix_alpha}")


class MixMode(str, Enum):
    NONE = "none"
    MIXUP = "mixup"
    CUTMIX = "cutmix"


@dataclass
class MixedBatch:
    images: np.ndarray          # B,H,W,C float64
    targets: np.ndarray         # B,C soft labels, rows sum to 1
    lam: float
    mode: MixMode
    box: tuple[int, int, int, int] | None = None   # cutmix paste box (y1, y2, x1, x2)


def _motion_kernel(length: int, angle_deg: float) -> np.ndarray:
    size = max(3, length | 1)
    kernel = np.zeros((size, size))
    kernel[size // 2, :] = 1.0
    kernel = ndimage.rotate(kernel, angle_deg, reshape=False, order=1)
    s = kernel.sum()
    return kernel / s if s > 0 else kernel


def train_augment(image: np.ndarray, rng: np.random.Generator, config: AugmentConfig) -> np.ndarray:
    """Apply each enabled transform with its probability. Shape preserved,
    values clipped to the configured range, dtype preserved."""
    arr = np.asarray(image)
    if arr.ndim not in (2, 3):
        raise AugmentError(f"expected HxW or HxWxC image, got shape {arr.shape}")
    out = arr.astype(np.float64, copy=True)
    lo, hi = config.value_range

    if config.hflip_p and rng.random() < config.hflip_p:
        out = np.flip(out, axis=1)
    if config.vflip_p and rng.random() < config.vflip_p:
        out = np.flip(out, axis=0)
    if config.rotate_p and rng.random() < config.rotate_p:
        angle = rng.uniform(-config.rotation_range, config.rotation_range)
        out = ndimage.rotate(out, angle, axes=(1, 0), reshape=False, order=1, mode="reflect")
    if config.noise_p and rng.random() < config.noise_p:
        sigma = rng.uniform(*config.noise_sigma_range)
        out = out + rng.normal(0.0, sigma, size=out.shape)
    if config.blur_p and rng.random() < config.blur_p:
        sigma = rng.uniform(*config.blur_sigma_range)
        sigmas = (sigma, sigma) if out.ndim == 2 else (sigma, sigma, 0.0)
        out = ndimage.gaussian_filter(out, sigmas, mode="reflect")
    if config.motion_p and rng.random() < config.motion_p:
        lo_len, hi_len = config.motion_length_range
        length = int(rng.integers(lo_len, hi_len + 1))
        kernel = _motion_kernel(length, rng.uniform(0.0, 180.0))
        if out.ndim == 2:
            out = ndimage.convolve(out, kernel, mode="reflect")
        else:
            for c in range(out.shape[2]):
                out[:, :, c] = ndimage.convolve(out[:, :, c], kernel, mode="reflect")
    if config.brightness_p and rng.random() < config.brightness_p:
        out = out + rng.uniform(-config.brightness_delta, config.brightness_delta)
    if config.contrast_p and rng.random() < config.contrast_p:
        factor = 1.0 + rng.uniform(-config.contrast_delta, config.contrast_delta)
        mean = out.mean()
        out = (out - mean) * factor + mean

    out = np.clip(out, lo, hi)
    if np.issubdtype(arr.dtype, np.integer):
        return np.rint(out).astype(arr.dtype)
    return out.astype(arr.dtype)


def _validate_batch(images: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    images = np.asarray(images, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if images.ndim != 4:
        raise AugmentError(f"expected a BxHxWxC image batch, got shape {images.shape}")
    if images.shape[0] < 2:
        raise AugmentError(f"batch mixing needs at least 2 samples, got {images.shape[0]}")
    if targets.ndim != 2 or targets.shape[0] != images.shape[0]:
        raise AugmentError(f"targets shape {targets.shape} does not match batch {images.shape[0]}")
    return images, targets


def mixup(images: np.ndarray, targets: np.ndarray, alpha: float,
          rng: np.random.Generator) -> MixedBatch:
    """Convex blend of the batch with a permuted copy of itself."""
    images, targets = _validate_batch(images, targets)
    lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(images.shape[0])
    mixed = lam * images + (1.0 - lam) * images[perm]
    mixed_t = lam * targets + (1.0 - lam) * targets[perm]
    return MixedBatch(images=mixed, targets=mixed_t, lam=lam, mode=MixMode.MIXUP)


def cutmix(images: np.ndarray, targets: np.ndarray, alpha: float,
           rng: np.random.Generator) -> MixedBatch:
    """Paste a box from a permuted partner; lambda is recomputed from the
    clipped box so targets mix exactly by pasted-area fraction."""
    images, targets = _validate_batch(images, targets)
    lam = float(rng.beta(alpha, alpha))
    b, height, width = images.shape[:3]
    cut_ratio = np.sqrt(1.0 - lam)
    cut_h = int(np.round(height * cut_ratio))
    cut_w = int(np.round(width * cut_ratio))
    cy = int(rng.integers(0, height))
    cx = int(rng.integers(0, width))
    y1 = max(cy - cut_h // 2, 0)
    y2 = min(cy + (cut_h + 1) // 2, height)
    x1 = max(cx - cut_w // 2, 0)
    x2 = min(cx + (cut_w + 1) // 2, width)
    perm = rng.permutation(b)
    mixed = images.copy()
    mixed[:, y1:y2, x1:x2] = images[perm][:, y1:y2, x1:x2]
    lam_adj = 1.0 - (y2 - y1) * (x2 - x1) / (height * width)
    mixed_t = lam_adj * targets + (1.0 - lam_adj) * targets[perm]
    return MixedBatch(images=mixed, targets=mixed_t, lam=lam_adj, mode=MixMode.CUTMIX,
                      box=(y1, y2, x1, x2))


def apply_batch_mixing(images: np.ndarray, targets: np.ndarray, config: AugmentConfig,
                       rng: np.random.Generator) -> MixedBatch:
    """Per-batch: cutmix with probability mix_prob, else mixup with probability
    mix_prob, else pass through. The two never both apply to one batch."""
    do_cutmix = rng.random() < config.mix_prob
    do_mixup = rng.random() < config.mix_prob
    if do_cutmix:
        return cutmix(images, targets, config.mix_alpha, rng)
    if do_mixup:
        return mixup(images, targets, config.mix_alpha, rng)
    images = np.asarray(images, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    return MixedBatch(images=images, targets=targets, lam=1.0, mode=MixMode.NONE)


# --- TTA views ---------------------------------------------------------------

DIHEDRAL_COUNT = 8


def dihedral(image: np.ndarray, index: int) -> np.ndarray:
    """The 8 exact square-symmetry transforms: indices 0-3 rotate by 90*index
    degrees, 4-7 additionally mirror left-right."""
    if not 0 <= index < DIHEDRAL_COUNT:
        raise AugmentError(f"dihedral index must be in [0, 8), got {index}")
    out = np.rot90(image, k=index % 4, axes=(0, 1))
    if index >= 4:
        out = np.flip(out, axis=1)
    return out.copy()


def dihedral_inverse_index(index: int) -> int:
    """Index of the transform undoing `dihedral(_, index)`; mirrored transforms
    are their own inverse."""
    if not 0 <= index < DIHEDRAL_COUNT:
        raise AugmentError(f"dihedral index must be in [0, 8), got {index}")
    return (4 - index) % 4 if index < 4 else index


def tta_views(image: np.ndarray, k: int, mode: str = "dihedral", seed: int = 0) -> list[np.ndarray]:
    """k deterministic views of an image; view 0 is always the identity.

    `dihedral` cycles the eight exact flip/rotation symmetries. `random` draws
    a flip plus a continuous rotation per view from a generator seeded with
    (seed, view index), so the views are a pure function of the arguments.
    """
    if k < 1:
        raise AugmentError(f"number of TTA views must be >= 1, got {k}")
    arr = np.asarray(image)
    views = [arr.copy()]
    if mode == "dihedral":
        for i in range(1, k):
            views.append(dihedral(arr, i % DIHEDRAL_COUNT))
    elif mode == "random":
        for i in range(1, k):
            rng = np.random.default_rng([seed, i])
            out = arr.astype(np.float64)
            if rng.random() < 0.5:
                out = np.flip(out, axis=1)
            if rng.random() < 0.5:
                out = np.flip(out, axis=0)
            angle = rng.uniform(-180.0, 180.0)
            out = ndimage.rotate(out, angle, axes=(1, 0), reshape=False, order=1, mode="reflect")
            if np.issubdtype(arr.dtype, np.integer):
                info = np.iinfo(arr.dtype)
                out = np.clip(np.rint(out), info.min, info.max)
            views.append(out.astype(arr.dtype))
    else:
        raise AugmentError(f"unknown TTA mode {mode!r}")
    return views
