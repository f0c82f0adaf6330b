"""Students sharing one structural contract: ordered ``blocks``, a ``head``, and a pooled feature tap."""
from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from .config import ModelConfig


class ConvStudent(nn.Module):
    """Small convnet for desk-scale runs; 8 blocks like ConvNeXt's ``features``."""

    def __init__(self, n_classes: int, widths: Sequence[int] = (16, 16, 32, 32, 64, 64, 64, 64)):
        super().__init__()
        blocks, c_in = [], 3
        for i, c in enumerate(widths):
            stride = 2 if i in (0, 2, 4) else 1
            layers = [nn.Conv2d(c_in, c, 3, stride=stride, padding=1), nn.GroupNorm(min(8, c), c)]
            if i < len(widths) - 1:
                layers.append(nn.ReLU())
            blocks.append(nn.Sequential(*layers))
            c_in = c
        self.blocks = nn.ModuleList(blocks)
        self.feature_dim = c_in
        self.head = nn.Linear(c_in, n_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        for b in self.blocks:
            x = b(x)
        return x.mean(dim=(2, 3))

    def forward_with_features(self, x):
        f = self.features(x)
        return self.head(f), f

    def forward(self, x):
        return self.forward_with_features(x)[0]


class ConvNeXtStudent(nn.Module):
    """torchvision ConvNeXt-tiny with its 8 ``features`` children exposed as blocks."""

    def __init__(self, n_classes: int, weights=None):
        super().__init__()
        import torchvision

        base = torchvision.models.convnext_tiny(weights=weights)
        self.blocks = base.features
        self.pool = base.avgpool
        norm = base.classifier[0]
        self.feature_dim = base.classifier[2].in_features
        self.head = nn.Sequential(norm, nn.Flatten(1), nn.Linear(self.feature_dim, n_classes))

    def features(self, x):
        for b in self.blocks:
            x = b(x)
        return self.pool(x)

    def forward_with_features(self, x):
        pooled = self.features(x)
        return self.head(pooled), pooled.flatten(1)

    def forward(self, x):
        return self.forward_with_features(x)[0]


def build_student(cfg: ModelConfig, n_classes: int) -> nn.Module:
    if cfg.kind == "convnext_tiny":
        return ConvNeXtStudent(n_classes, cfg.weights)
    return ConvStudent(n_classes, cfg.widths)
