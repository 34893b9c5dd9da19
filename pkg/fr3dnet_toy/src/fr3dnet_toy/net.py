"""Network definition: five conv stages over 160x160x3 geometry images.

Smooth 3D surfaces carry little texture at 3x3 scale, so the first two
stages use large kernels (7 by default, 3/5/9 for the kernel ablation).
Every convolution is followed by a rectifier; stages end in 2x max-pool.
Two fully-connected stages follow; FC7 is fixed at 1,024 units and its
activations are the face embedding. Dropout (0.5) sits after FC6 and FC7
during training only.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

INPUT_SIZE = 160
FEATURE_DIM = 1024


@dataclass(frozen=True)
class NetSpec:
    n_classes: int
    first_kernel: int = 7
    base_width: int = 32
    fc6_width: int = 2048
    dropout: float = 0.5

    def __post_init__(self):
        if self.first_kernel not in (3, 5, 7, 9):
            raise ValueError("first_kernel must be one of 3, 5, 7, 9")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def stage_widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * (2 ** i) for i in range(5))

    @property
    def stage_kernels(self) -> tuple[int, ...]:
        return (self.first_kernel, self.first_kernel, 3, 3, 3)


class GeometryImageNet(nn.Module):
    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        # per-channel training-set mean, subtracted from every input;
        # learned once in train(), carried in checkpoints, never tuned
        self.register_buffer("input_mean", torch.zeros(3, 1, 1))
        stages = []
        in_ch = 3
        for width, kernel in zip(spec.stage_widths, spec.stage_kernels):
            stages += [
                nn.Conv2d(in_ch, width, kernel, padding=kernel // 2),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            in_ch = width
        self.features = nn.Sequential(*stages)
        side = INPUT_SIZE // 2 ** 5
        self.fc6 = nn.Linear(in_ch * side * side, spec.fc6_width)
        self.drop6 = nn.Dropout(spec.dropout)
        self.fc7 = nn.Linear(spec.fc6_width, FEATURE_DIM)
        self.drop7 = nn.Dropout(spec.dropout)
        self.classifier = nn.Linear(FEATURE_DIM, spec.n_classes)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """FC7 activations, the 1,024-dim face embedding."""
        x = self.features(x - self.input_mean)
        x = torch.flatten(x, 1)
        x = self.drop6(torch.relu(self.fc6(x)))
        return torch.relu(self.fc7(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.drop7(self.embed(x)))


def build_model(spec: NetSpec, seed: int = 0) -> GeometryImageNet:
    """Model with zero-mean Gaussian weights, std per the fan-based rule."""
    torch.manual_seed(seed)
    model = GeometryImageNet(spec)
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            nn.init.xavier_normal_(module.weight)
            nn.init.zeros_(module.bias)
    return model


def replace_classifier(model: GeometryImageNet, n_classes: int,
                       seed: int = 0) -> None:
    torch.manual_seed(seed)
    model.classifier = nn.Linear(FEATURE_DIM, n_classes)
    nn.init.xavier_normal_(model.classifier.weight)
    nn.init.zeros_(model.classifier.bias)
