"""Residual backbones (ResNet-style presets) and a feature pyramid on top."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .config import BACKBONE_PRESETS, ModelConfig


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, width, stride=1):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = nn.Conv2d(cin, width, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.down is None else self.down(x)
        return F.relu(out + skip)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, width, stride=1):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = nn.Conv2d(cin, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, cout, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        skip = x if self.down is None else self.down(x)
        return F.relu(out + skip)


class ResNet(nn.Module):
    """Stem (stride 4) followed by residual stages at strides 4, 8, 16, ..."""

    def __init__(self, in_channels: int, preset: str, base_width: int):
        super().__init__()
        kind, blocks, mults = BACKBONE_PRESETS[preset]
        block = BasicBlock if kind == "basic" else Bottleneck
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, base_width, 7, 2, 3, bias=False),
            nn.BatchNorm2d(base_width),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1),
        )
        self.in_channels = in_channels
        cin = base_width
        self.stages = nn.ModuleList()
        self.out_channels = []
        for i, (n, m) in enumerate(zip(blocks, mults)):
            width = base_width * m
            layers = []
            for j in range(n):
                layers.append(block(cin, width, stride=2 if (i > 0 and j == 0) else 1))
                cin = width * block.expansion
            self.stages.append(nn.Sequential(*layers))
            self.out_channels.append(cin)
        self.strides = [2 ** (i + 2) for i in range(len(blocks))]

    def forward(self, x) -> list[torch.Tensor]:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class FPN(nn.Module):
    """Top-down pyramid over every backbone stage; emits only the requested strides."""

    def __init__(self, in_channels: list[int], strides: list[int], out_strides, width: int):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, width, 1) for c in in_channels)
        self.strides = list(strides)
        self.keep = [self.strides.index(s) for s in out_strides]
        self.smooth = nn.ModuleList(nn.Conv2d(width, width, 3, 1, 1) for _ in self.keep)

    def forward(self, feats):
        top = self.lateral[-1](feats[-1])
        merged = [top]
        for i in range(len(feats) - 2, -1, -1):
            lat = self.lateral[i](feats[i])
            top = lat + F.interpolate(top, size=lat.shape[-2:], mode="nearest")
            merged.insert(0, top)
        return [conv(merged[i]) for conv, i in zip(self.smooth, self.keep)]


def build_backbone(config: ModelConfig) -> tuple[ResNet, FPN]:
    body = ResNet(config.input_channels, config.backbone, config.base_width)
    fpn = FPN(body.out_channels, body.strides, config.fpn_strides, config.fpn_channels)
    return body, fpn
