"""U-Net segmentation network with a residual (ResNet-18 style) encoder.

Outputs three independent sigmoid maps in (artery, vein, vessel) order, so a
crossing pixel can be artery and vein at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_matching, read_state_dict


@dataclass(frozen=True)
class GeneratorConfig:
    encoder_stages: int = 5
    base_width: int = 16
    in_channels: int = 3
    out_channels: int = 3
    blocks_per_stage: int = 2
    stem_kernel: int = 7
    upsample: str = "bilinear"
    norm: str = "batch"
    seed: int = 0

    def __post_init__(self):
        if self.base_width < 4:
            raise ValueError("base_width must be >= 4")
        if self.encoder_stages < 2:
            raise ValueError("encoder_stages must be >= 2 (stem + one residual stage)")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        if self.upsample != "bilinear" or self.norm != "batch":
            raise ValueError("only bilinear upsampling with batch norm is implemented")

    def widths(self) -> list[int]:
        w = self.base_width
        return [w] + [w * 2 ** max(i - 1, 0) for i in range(1, self.encoder_stages)]


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout)
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class ResidualEncoder(nn.Module):
    """Parameter names follow torchvision's ResNet so its weights load directly."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        widths = cfg.widths()
        k = cfg.stem_kernel
        self.conv1 = nn.Conv2d(cfg.in_channels, widths[0], k, 2, k // 2, bias=False)
        self.bn1 = nn.BatchNorm2d(widths[0])
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        self.num_layers = cfg.encoder_stages - 1
        for i in range(1, cfg.encoder_stages):
            stride = 1 if i == 1 else 2
            blocks = [BasicBlock(widths[i - 1], widths[i], stride)]
            blocks += [BasicBlock(widths[i], widths[i]) for _ in range(cfg.blocks_per_stage - 1)]
            self.add_module(f"layer{i}", nn.Sequential(*blocks))

    def forward(self, x):
        x = self.relu(self.bn1(self.conv1(x)))
        feats = [x]
        x = self.maxpool(x)
        for i in range(1, self.num_layers + 1):
            x = getattr(self, f"layer{i}")(x)
            feats.append(x)
        return feats


def _conv_bn_relu(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, 1, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)
    )


class AVUNet(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.widths()
        self.encoder = ResidualEncoder(cfg)
        self.decoder = nn.ModuleList(
            _conv_bn_relu(widths[i + 1] + widths[i], widths[i])
            for i in reversed(range(cfg.encoder_stages - 1))
        )
        self.head = _conv_bn_relu(widths[0] + cfg.in_channels, widths[0])
        self.out = nn.Conv2d(widths[0], cfg.out_channels, 1)

    def forward(self, x):
        feats = self.encoder(x)
        d = feats[-1]
        for block, skip in zip(self.decoder, reversed(feats[:-1])):
            d = F.interpolate(d, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            d = block(torch.cat([d, skip], dim=1))
        d = F.interpolate(d, size=x.shape[-2:], mode="bilinear", align_corners=False)
        d = self.head(torch.cat([d, x], dim=1))
        return torch.sigmoid(self.out(d))


def init_generator(cfg: GeneratorConfig = GeneratorConfig(), encoder_weights=None) -> AVUNet:
    """Seeded construction; ``encoder_weights`` optionally loads a ResNet state dict."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = AVUNet(cfg)
    if encoder_weights is not None:
        state = read_state_dict(encoder_weights)
        load_matching(model.encoder, state, source=str(encoder_weights))
    return model


def generator_forward(x: torch.Tensor, model: AVUNet) -> torch.Tensor:
    """(B, 3, H, W) images in [0, 1] -> (B, 3, H, W) probabilities."""
    if x.ndim != 4 or x.shape[1] != model.cfg.in_channels:
        raise ValueError(f"expected (B, {model.cfg.in_channels}, H, W), got {tuple(x.shape)}")
    return model(x)


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """Stack (H, W, 3) arrays into a (B, 3, H, W) tensor."""
    t = torch.as_tensor(images, dtype=dtype)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2).contiguous()


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
