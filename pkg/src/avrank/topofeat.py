"""Frozen VGG-19 style feature pyramid and the topology-preserving triplet loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .checkpoint import load_matching, read_state_dict

# VGG-19 convolution widths, "M" = 2x2 max-pool
VGG19_LAYOUT = (64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
                512, 512, 512, 512, "M", 512, 512, 512, 512)


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 1.0
    num_levels: int = 4
    extractor_seed: int = 0
    width_scale: float = 1.0
    pretrained_weights: str | None = None

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if not 1 <= self.num_levels <= 8:
            raise ValueError("num_levels must be in [1, 8]")
        if self.width_scale <= 0:
            raise ValueError("width_scale must be positive")

    @property
    def level_convs(self) -> tuple[int, ...]:
        """1-based indices of the convolutions whose ReLU output is tapped."""
        return tuple(2 * (i + 1) for i in range(self.num_levels))


class FeatureExtractor(nn.Module):
    """Truncated VGG-19 ``features`` stack; indices match torchvision's layout."""

    def __init__(self, cfg: TripletConfig, in_channels: int = 3):
        super().__init__()
        last_conv = cfg.level_convs[-1]
        layers, taps = [], []
        cin, n_conv = in_channels, 0
        for item in VGG19_LAYOUT:
            if item == "M":
                layers.append(nn.MaxPool2d(2, 2))
                continue
            cout = max(1, int(round(item * cfg.width_scale)))
            layers += [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=False)]
            n_conv += 1
            cin = cout
            if n_conv in cfg.level_convs:
                taps.append(len(layers) - 1)
            if n_conv == last_conv:
                break
        self.features = nn.Sequential(*layers)
        self.taps = tuple(taps)
        for m in self.features:
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x):
        out = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.taps:
                out.append(x)
        return out


def init_extractor(cfg: TripletConfig = TripletConfig()) -> FeatureExtractor:
    """Seeded, frozen extractor; loads ``cfg.pretrained_weights`` when given."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.extractor_seed)
        model = FeatureExtractor(cfg)
    if cfg.pretrained_weights is not None:
        state = read_state_dict(cfg.pretrained_weights)
        load_matching(model, state, source=str(cfg.pretrained_weights))
    model.requires_grad_(False)
    return model.eval()


def extract_features(m: torch.Tensor, extractor: FeatureExtractor) -> list[torch.Tensor]:
    """Mask batch (B, 3, H, W) -> list of post-ReLU maps, shallow to deep."""
    if m.ndim != 4 or m.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W) masks, got {tuple(m.shape)}")
    return extractor(m)


def pyramid_shapes(cfg: TripletConfig, height: int, width: int) -> list[tuple[int, int, int]]:
    shapes, n_conv, c = [], 0, 3
    h, w = height, width
    for item in VGG19_LAYOUT:
        if item == "M":
            h, w = h // 2, w // 2
            continue
        n_conv += 1
        c = max(1, int(round(item * cfg.width_scale)))
        if n_conv in cfg.level_convs:
            shapes.append((c, h, w))
        if n_conv == cfg.level_convs[-1]:
            break
    return shapes


def level_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance divided by C*H*W.

    For batched (B, C, H, W) inputs one distance per sample is returned.
    """
    if a.shape != b.shape:
        raise ValueError(f"feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = (a - b).pow(2)
    if a.ndim == 4:
        return diff.flatten(1).mean(dim=1)
    return diff.mean()


def triplet_from_features(anchor, positive, negative, margin: float = 1.0) -> torch.Tensor:
    """Level-averaged hinge ``max(d(anchor, pos) - d(anchor, neg) + margin, 0)``."""
    if not len(anchor) == len(positive) == len(negative):
        raise ValueError("pyramids have different depths")
    hinges = []
    for fa, fp, fn in zip(anchor, positive, negative):
        d1 = level_distance(fa, fp)
        d2 = level_distance(fa, fn)
        hinges.append(torch.relu(d1 - d2 + margin))
    return torch.stack(hinges).mean(dim=0).mean()


def triplet_loss(anchor, positive, negative, cfg: TripletConfig, extractor) -> torch.Tensor:
    """Triplet loss on masks: ground truth anchors, generated positive, shuffled negative.

    Only the positive carries gradient.
    """
    if not anchor.shape == positive.shape == negative.shape:
        raise ValueError("anchor, positive and negative masks differ in shape")
    with torch.no_grad():
        fa = extract_features(anchor, extractor)
        fn = extract_features(negative, extractor)
    fp = extract_features(positive, extractor)
    return triplet_from_features(fa, fp, fn, cfg.margin)
