"""Small classifier zoo, each exposed as a feature extractor ``h`` and head ``g``
split after the last convolutional stage."""
from __future__ import annotations

import torch
import torch.nn as nn

from .errors import UsageError

ARCHS = ("tiny_cnn", "nin", "resnet18")


class SplitModel(nn.Module):
    def __init__(self, h: nn.Module, g: nn.Module, arch: str, num_classes: int, input_shape, split_layer: str):
        super().__init__()
        self.h = h
        self.g = g
        self.arch = arch
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.split_layer = split_layer
        self._inter_shape = None

    def forward(self, x):
        return self.g(self.h(x))

    @property
    def intermediate_shape(self) -> tuple[int, ...]:
        if self._inter_shape is None:
            was_training = self.training
            self.eval()
            with torch.no_grad():
                self._inter_shape = tuple(self.h(torch.zeros(1, *self.input_shape)).shape[1:])
            self.train(was_training)
        return self._inter_shape


def _tiny_cnn(k, c):
    h = nn.Sequential(
        nn.Conv2d(c, 32, 3, padding=1), nn.BatchNorm2d(32), nn.ReLU(inplace=True), nn.MaxPool2d(2),
        nn.Conv2d(32, 64, 3, padding=1), nn.BatchNorm2d(64), nn.ReLU(inplace=True), nn.MaxPool2d(2),
        nn.Conv2d(64, 64, 3, padding=1), nn.BatchNorm2d(64), nn.ReLU(inplace=True), nn.MaxPool2d(2),
    )
    g = nn.Sequential(nn.Flatten(), nn.Linear(64 * 4 * 4, 128), nn.ReLU(inplace=True), nn.Linear(128, k))
    return h, g, "conv3"


def _mlpconv(cin, cout, k, pad, mid=None):
    mid = mid or cout
    return [
        nn.Conv2d(cin, cout, k, padding=pad), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, mid, 1), nn.BatchNorm2d(mid), nn.ReLU(inplace=True),
        nn.Conv2d(mid, mid, 1), nn.BatchNorm2d(mid), nn.ReLU(inplace=True),
    ]


def _nin(k, c):
    h = nn.Sequential(
        *_mlpconv(c, 192, 5, 2, mid=160)[:6], nn.Conv2d(160, 96, 1), nn.BatchNorm2d(96), nn.ReLU(inplace=True),
        nn.MaxPool2d(3, stride=2, padding=1),
        *_mlpconv(96, 192, 5, 2),
        nn.AvgPool2d(3, stride=2, padding=1),
        nn.Conv2d(192, 192, 3, padding=1), nn.BatchNorm2d(192), nn.ReLU(inplace=True),
        nn.Conv2d(192, 192, 1), nn.BatchNorm2d(192), nn.ReLU(inplace=True),
    )
    # the final 1x1 class-map convolution stays in g: it is a per-location classifier
    g = nn.Sequential(nn.Conv2d(192, k, 1), nn.AdaptiveAvgPool2d(1), nn.Flatten())
    return h, g, "block3.conv2"


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


def _resnet18(k, c):
    layers, cin = [], 64
    for cout, stride in ((64, 1), (128, 2), (256, 2), (512, 2)):
        layers += [BasicBlock(cin, cout, stride), BasicBlock(cout, cout, 1)]
        cin = cout
    h = nn.Sequential(
        nn.Conv2d(c, 64, 3, padding=1, bias=False), nn.BatchNorm2d(64), nn.ReLU(inplace=True),
        *layers,
        nn.AdaptiveAvgPool2d(1),
    )
    g = nn.Sequential(nn.Flatten(), nn.Linear(512, k))
    return h, g, "layer4.1.conv2"


_BUILDERS = {"tiny_cnn": _tiny_cnn, "nin": _nin, "resnet18": _resnet18}


def build_model(arch: str, num_classes: int = 10, input_shape=(3, 32, 32), seed: int | None = None) -> SplitModel:
    if arch not in _BUILDERS:
        raise UsageError(f"unknown architecture {arch!r}; expected one of {ARCHS}")
    if seed is not None:
        torch.manual_seed(seed)
    h, g, split = _BUILDERS[arch](num_classes, input_shape[0])
    return SplitModel(h, g, arch, num_classes, input_shape, split)


def freeze(model: SplitModel) -> SplitModel:
    """Eval mode with gradients disabled on parameters; used by the inversion engines."""
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
