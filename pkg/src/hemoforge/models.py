"""Model construction: backbones, the MLP classification head, weight providers.

A model is a feature backbone plus a freshly initialized MLP head of four
Linear-ReLU-Dropout(0.1) blocks and a final affine layer to the class count.
Backbones come from a registry keyed by id:

* paper-scale ids (``swinv2-tiny``, ``convnextv2-tiny``, ``dinobloom-small``)
  wrap published pretrained architectures and need a weight provider;
* desk-scale ids (``tiny-conv``, ``tiny-conv-wide``, ``tiny-mlp``) are small
  randomly initialized extractors for CPU-sized experiments.

Models take a float tensor batch (B, C, H, W) scaled to [0, 1] and return a
(B, num_classes) logit matrix.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import torch
from torch import nn

from .errors import (
    BackboneUnavailableError,
    ModelBuildError,
    WeightChecksumError,
    WeightFetchError,
)

CACHE_ENV_VAR = "HEMOFORGE_CACHE"


@dataclass(frozen=True)
class HeadSpec:
    hidden_dims: tuple[int, int, int, int] = (512, 256, 128, 64)
    dropout_rate: float = 0.1
    output_dim: int = 13

    def __post_init__(self):
        if len(self.hidden_dims) != 4:
            raise ModelBuildError(f"head must have exactly 4 hidden blocks, got {self.hidden_dims}")


@dataclass(frozen=True)
class ModelSpec:
    backbone_id: str
    embed_dim: int
    num_classes: int = 13
    head: HeadSpec = field(default_factory=HeadSpec)

    def __post_init__(self):
        if self.embed_dim <= 0:
            raise ModelBuildError(f"embed_dim must be > 0, got {self.embed_dim}")
        if self.head.output_dim != self.num_classes:
            raise ModelBuildError(
                f"head output_dim {self.head.output_dim} != num_classes {self.num_classes}"
            )

    @classmethod
    def for_backbone(cls, backbone_id: str, num_classes: int = 13,
                     head_dims: tuple[int, int, int, int] | None = None,
                     dropout_rate: float = 0.1) -> "ModelSpec":
        info = backbone_info(backbone_id)
        head = HeadSpec(hidden_dims=head_dims or HeadSpec().hidden_dims,
                        dropout_rate=dropout_rate, output_dim=num_classes)
        return cls(backbone_id=backbone_id, embed_dim=info.embed_dim,
                   num_classes=num_classes, head=head)

    def to_dict(self) -> dict:
        return {
            "backbone_id": self.backbone_id,
            "embed_dim": self.embed_dim,
            "num_classes": self.num_classes,
            "head_hidden_dims": list(self.head.hidden_dims),
            "head_dropout_rate": self.head.dropout_rate,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        head = HeadSpec(hidden_dims=tuple(data["head_hidden_dims"]),
                        dropout_rate=float(data["head_dropout_rate"]),
                        output_dim=int(data["num_classes"]))
        return cls(backbone_id=str(data["backbone_id"]),
                   embed_dim=int(data["embed_dim"]),
                   num_classes=int(data["num_classes"]), head=head)


class MlpHead(nn.Module):
    """Four Linear-ReLU-Dropout blocks followed by an affine layer to the logits."""

    def __init__(self, in_dim: int, spec: HeadSpec):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_dim
        for width in spec.hidden_dims:
            layers += [nn.Linear(prev, width), nn.ReLU(), nn.Dropout(spec.dropout_rate)]
            prev = width
        layers.append(nn.Linear(prev, spec.output_dim))
        self.blocks = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x)


class TinyConvBackbone(nn.Module):
    def __init__(self, widths=(16, 32), kernel=3):
        super().__init__()
        c_in = 3
        blocks = []
        for w in widths:
            blocks += [
                nn.Conv2d(c_in, w, kernel, stride=2, padding=kernel // 2),
                nn.GroupNorm(4, w),
                nn.ReLU(),
            ]
            c_in = w
        self.features = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.embed_dim = widths[-1]

    def forward(self, x):
        return self.pool(self.features(x)).flatten(1)


class TinyPatchMlpBackbone(nn.Module):
    """Pools to a coarse grid and runs a small MLP; no spatial weight sharing."""

    def __init__(self, grid=6, hidden=64, embed_dim=32):
        super().__init__()
        self.pool = nn.AdaptiveAvgPool2d(grid)
        self.mlp = nn.Sequential(
            nn.Linear(3 * grid * grid, hidden), nn.ReLU(), nn.Linear(hidden, embed_dim)
        )
        self.embed_dim = embed_dim

    def forward(self, x):
        return self.mlp(self.pool(x).flatten(1))


@dataclass(frozen=True)
class BackboneInfo:
    backbone_id: str
    factory: Callable[[], nn.Module]
    embed_dim: int
    pretrained: bool
    approx_params: int | None = None     # backbone + default head, when known


def _swinv2_tiny() -> nn.Module:
    try:
        from torchvision import models
    except ImportError as exc:
        raise BackboneUnavailableError(
            "swinv2-tiny requires torchvision; install hemoforge[backbones]"
        ) from exc
    model = models.swin_v2_t(weights=None)
    model.head = nn.Identity()
    return model


def _convnextv2_tiny() -> nn.Module:
    try:
        import timm
    except ImportError as exc:
        raise BackboneUnavailableError(
            "convnextv2-tiny requires the timm package, which is not installed"
        ) from exc
    return timm.create_model("convnextv2_tiny", pretrained=False, num_classes=0)


def _dinobloom_small() -> nn.Module:
    try:
        import timm
    except ImportError as exc:
        raise BackboneUnavailableError(
            "dinobloom-small requires the timm package, which is not installed"
        ) from exc
    return timm.create_model("vit_small_patch14_dinov2", pretrained=False, num_classes=0)


_BACKBONES: dict[str, BackboneInfo] = {
    "tiny-conv": BackboneInfo("tiny-conv", TinyConvBackbone, 32, pretrained=False),
    "tiny-conv-wide": BackboneInfo(
        "tiny-conv-wide", lambda: TinyConvBackbone(widths=(24, 48), kernel=5), 48, pretrained=False
    ),
    "tiny-mlp": BackboneInfo("tiny-mlp", TinyPatchMlpBackbone, 32, pretrained=False),
    "swinv2-tiny": BackboneInfo("swinv2-tiny", _swinv2_tiny, 768, pretrained=True,
                                approx_params=28_100_000),
    "convnextv2-tiny": BackboneInfo("convnextv2-tiny", _convnextv2_tiny, 768, pretrained=True,
                                    approx_params=28_400_000),
    "dinobloom-small": BackboneInfo("dinobloom-small", _dinobloom_small, 384, pretrained=True,
                                    approx_params=23_000_000),
}


def backbone_info(backbone_id: str) -> BackboneInfo:
    try:
        return _BACKBONES[backbone_id]
    except KeyError:
        raise ModelBuildError(
            f"unknown backbone {backbone_id!r}; registered: {sorted(_BACKBONES)}"
        ) from None


def registered_backbones() -> list[str]:
    return sorted(_BACKBONES)


class WeightProvider(Protocol):
    def fetch(self, backbone_id: str) -> Path:
        """Return a local path to a state-dict file for the backbone."""
        ...


class CacheWeightProvider:
    """Serves pretrained weights from a local cache directory.

    Layout: ``<root>/<backbone_id>.pt`` with an optional ``.sha256`` sidecar
    holding the expected hex digest. A missing file raises WeightFetchError
    (provisioning failure); a digest mismatch raises WeightChecksumError.
    The root defaults to $HEMOFORGE_CACHE, then ~/.cache/hemoforge.
    """

    def __init__(self, root: str | Path | None = None):
        if root is None:
            root = os.environ.get(CACHE_ENV_VAR) or Path.home() / ".cache" / "hemoforge"
        self.root = Path(root)

    def fetch(self, backbone_id: str) -> Path:
        path = self.root / f"{backbone_id}.pt"
        if not path.is_file():
            raise WeightFetchError(
                f"no cached weights for {backbone_id!r} at {path}; populate the cache "
                f"(set ${CACHE_ENV_VAR}) or pass a different provider"
            )
        digest_file = path.with_suffix(".sha256")
        if digest_file.is_file():
            expected = digest_file.read_text(encoding="utf-8").split()[0].strip()
            actual = hashlib.sha256(path.read_bytes()).hexdigest()
            if actual != expected:
                raise WeightChecksumError(
                    f"weight file {path} failed checksum: expected {expected}, got {actual}"
                )
        return path


class WbcClassifier(nn.Module):
    """Backbone features into the MLP head; forward returns logits."""

    def __init__(self, backbone: nn.Module, head: MlpHead, spec: ModelSpec):
        super().__init__()
        self.backbone = backbone
        self.head = head
        self.spec = spec

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))


def build_model(spec: ModelSpec, weight_provider: WeightProvider | None = None,
                seed: int = 0, load_pretrained: bool = True) -> WbcClassifier:
    """Construct backbone + head. Pretrained backbones load weights from the
    provider; desk-scale backbones are randomly initialized under `seed`.
    `load_pretrained=False` skips the fetch, for callers that immediately
    overwrite the weights from a checkpoint."""
    info = backbone_info(spec.backbone_id)
    if info.embed_dim != spec.embed_dim:
        raise ModelBuildError(
            f"spec embed_dim {spec.embed_dim} does not match backbone "
            f"{spec.backbone_id!r} ({info.embed_dim})"
        )
    torch.manual_seed(seed)
    backbone = info.factory()
    if info.pretrained and load_pretrained:
        if weight_provider is None:
            raise ModelBuildError(
                f"backbone {spec.backbone_id!r} is pretrained and needs a weight provider"
            )
        path = weight_provider.fetch(spec.backbone_id)
        state = torch.load(path, map_location="cpu", weights_only=True)
        backbone.load_state_dict(state)
    head = MlpHead(spec.embed_dim, spec.head)
    return WbcClassifier(backbone, head, spec)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
