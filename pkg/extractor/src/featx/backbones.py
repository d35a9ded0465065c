"""Frozen backbone registry and per-backbone preprocessing.

Every backbone id resolves to a checkpoint plus a fixed preprocessing recipe;
both are recorded in the archive sidecar so downstream runs are reproducible
from the archive alone. The tiny checkpoint ships with the package for
CPU-only integration tests; large pretrained models are pulled from their
usual distribution channels and are deliberately not vendored.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from PIL import Image
from torch import nn

CHECKPOINT_DIR = Path(__file__).parent / "checkpoints"


class BackboneError(Exception):
    pass


@dataclass(frozen=True)
class Preprocess:
    resize: int
    grayscale: bool
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "resize": self.resize,
            "grayscale": self.grayscale,
            "mean": list(self.mean),
            "std": list(self.std),
        }

    def __call__(self, img: Image.Image) -> torch.Tensor:
        img = img.convert("L" if self.grayscale else "RGB")
        img = img.resize((self.resize, self.resize), Image.Resampling.BILINEAR)
        array = np.asarray(img, dtype=np.float32) / 255.0
        if self.grayscale:
            array = array[None, :, :]
        else:
            array = array.transpose(2, 0, 1)
        mean = np.asarray(self.mean, dtype=np.float32)[:, None, None]
        std = np.asarray(self.std, dtype=np.float32)[:, None, None]
        return torch.from_numpy((array - mean) / std)


class TinyConvNet(nn.Module):
    """Three strided conv blocks and a linear projection; ~7k parameters."""

    def __init__(self, dim: int = 32):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, 8, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(8, 16, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
        )
        self.projection = nn.Linear(32, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = self.features(x).flatten(1)
        return self.projection(pooled)


def make_tiny_checkpoint(path: str | Path, dim: int = 32, seed: int = 20240501) -> Path:
    """Write the deterministic tiny checkpoint (used once at packaging time)."""
    torch.manual_seed(seed)
    model = TinyConvNet(dim=dim)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"dim": dim, "state_dict": model.state_dict()}, path)
    return path


@dataclass(frozen=True)
class BackboneSpec:
    id: str
    dim: int
    preprocess: Preprocess
    builder: Callable[[], nn.Module]


def _build_tiny() -> nn.Module:
    checkpoint_path = CHECKPOINT_DIR / "tiny-gray-32.pt"
    if not checkpoint_path.exists():
        raise BackboneError(f"checkpoint missing: {checkpoint_path}")
    payload = torch.load(checkpoint_path, map_location="cpu", weights_only=True)
    model = TinyConvNet(dim=payload["dim"])
    model.load_state_dict(payload["state_dict"])
    return model


def _build_resnet50() -> nn.Module:
    # Pulls pretrained weights from the torchvision hub on first use; meant
    # for workstation runs, not CI.
    try:
        from torchvision import models
    except ImportError as exc:
        raise BackboneError("resnet50 backbone needs torchvision installed") from exc
    resnet = models.resnet50(weights=models.ResNet50_Weights.IMAGENET1K_V2)
    resnet.fc = nn.Identity()
    return resnet


REGISTRY: dict[str, BackboneSpec] = {
    "tiny-gray-32": BackboneSpec(
        id="tiny-gray-32",
        dim=32,
        preprocess=Preprocess(resize=32, grayscale=True, mean=(0.5,), std=(0.5,)),
        builder=_build_tiny,
    ),
    "resnet50-imagenet": BackboneSpec(
        id="resnet50-imagenet",
        dim=2048,
        preprocess=Preprocess(
            resize=224, grayscale=False,
            mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225),
        ),
        builder=_build_resnet50,
    ),
}


def load_backbone(backbone_id: str) -> tuple[nn.Module, BackboneSpec]:
    spec = REGISTRY.get(backbone_id)
    if spec is None:
        raise BackboneError(f"unknown backbone {backbone_id!r}; known: {sorted(REGISTRY)}")
    model = spec.builder()
    model.eval()
    for parameter in model.parameters():
        parameter.requires_grad_(False)
    return model, spec
