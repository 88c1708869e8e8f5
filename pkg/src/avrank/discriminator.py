"""Conditional PatchGAN ranking discriminator and the adversarial losses.

Connectivity rank is encoded ordinally with two monotone bits::

    shuffled      -> (0, 0)
    generated     -> (1, 0)
    ground truth  -> (1, 1)

Bit one answers "better than shuffled", bit two "better than generated".
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

EPS = 1e-7
RANKS = ("shuffled", "generated", "ground_truth")
_BITS = {"shuffled": (0, 0), "generated": (1, 0), "ground_truth": (1, 1)}


@dataclass(frozen=True)
class OrdinalTarget:
    bits: tuple[int, int]

    def __post_init__(self):
        if tuple(self.bits) not in _BITS.values():
            raise ValueError(f"{self.bits} is not a monotone ordinal code")

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(self.bits, dtype=dtype)


def ordinal_target(rank: str) -> OrdinalTarget:
    try:
        return OrdinalTarget(_BITS[rank])
    except KeyError:
        raise ValueError(f"unknown rank {rank!r}; expected one of {RANKS}") from None


def decode_rank(bits) -> str:
    """Threshold bit estimates at 0.5 and count how many ranks are beaten."""
    level = sum(float(b) >= 0.5 for b in bits)
    return RANKS[level]


@dataclass(frozen=True)
class DiscriminatorConfig:
    base_width: int = 64
    max_width: int = 512
    image_channels: int = 3
    mask_channels: int = 3
    out_bits: int = 2  # 1 for the plain real/fake discriminator
    seed: int = 0

    def __post_init__(self):
        if self.base_width < 1 or self.max_width < self.base_width:
            raise ValueError("need 1 <= base_width <= max_width")
        if self.out_bits not in (1, 2):
            raise ValueError("out_bits must be 1 or 2")


class PatchDiscriminator(nn.Module):
    """Six 4x4 convolutions: three stride-2, three stride-1, sigmoid score map.

    Hidden layers use instance normalization. Real, generated and shuffled
    masks pass through as separate batches, and batch statistics would let
    scores depend on batch composition instead of the individual sample.
    """

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        cin = cfg.image_channels + cfg.mask_channels
        widths = [min(cfg.base_width * 2 ** i, cfg.max_width) for i in (0, 1, 2, 3, 3)]
        layers = []
        for i, cout in enumerate(widths):
            stride = 2 if i < 3 else 1
            layers.append(nn.Conv2d(cin, cout, 4, stride, 1))
            if i > 0:
                layers.append(nn.InstanceNorm2d(cout, affine=True))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            cin = cout
        layers.append(nn.Conv2d(cin, cfg.out_bits, 4, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, image, mask):
        return torch.sigmoid(self.net(torch.cat([image, mask], dim=1)))


def score_map_size(n: int) -> int:
    for stride in (2, 2, 2, 1, 1, 1):
        n = (n + 2 - 4) // stride + 1
    return n


def init_discriminator(cfg: DiscriminatorConfig = DiscriminatorConfig()) -> PatchDiscriminator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return PatchDiscriminator(cfg)


def discriminator_forward(x, m, model: PatchDiscriminator) -> torch.Tensor:
    """Score map (B, bits, h, w) for images ``x`` conditioned on masks ``m``."""
    if x.shape[0] != m.shape[0] or x.shape[-2:] != m.shape[-2:]:
        raise ValueError(f"image {tuple(x.shape)} and mask {tuple(m.shape)} do not align")
    return model(x, m)


def _bce(score, target):
    score = score.clamp(EPS, 1 - EPS)
    return -(target * torch.log(score) + (1 - target) * torch.log(1 - score))


def ordinal_bce(score: torch.Tensor, target: OrdinalTarget) -> torch.Tensor:
    """Two-sided cross entropy of a (B, 2, h, w) map against broadcast bits."""
    t = target.tensor(score.dtype).view(1, -1, 1, 1)
    return _bce(score, t).mean()


def disc_loss(scores: dict, targets: dict | None = None) -> torch.Tensor:
    """Mean ordinal cross entropy over the shuffled, generated and ground-truth maps.

    ``scores`` maps rank name -> D output. The generated map must come from a
    detached G(x); nothing here routes gradient to the generator.
    """
    if targets is None:
        targets = {r: ordinal_target(r) for r in RANKS}
    shapes = {tuple(s.shape) for s in scores.values()}
    if len(shapes) != 1:
        raise ValueError(f"score maps differ in shape: {shapes}")
    terms = [ordinal_bce(scores[r], targets[r]) for r in RANKS]
    return torch.stack(terms).mean()


def gen_adv_loss(score: torch.Tensor) -> torch.Tensor:
    """-log D(x, G(x)) toward the ground-truth code (1, 1)."""
    return -torch.log(score.clamp(EPS, 1 - EPS)).mean()


def general_discriminator_loss(real_score, fake_score) -> torch.Tensor:
    """Plain real/fake cross entropy (real -> 1, fake -> 0) for the GD ablation."""
    return 0.5 * (_bce(real_score, torch.ones_like(real_score)).mean()
                  + _bce(fake_score, torch.zeros_like(fake_score)).mean())
