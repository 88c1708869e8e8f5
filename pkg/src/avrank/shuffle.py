"""Deliberate topology damage: remove, shift and A/V-swap operations on masks.

The shuffled mask is the lowest connectivity rank seen by the ranking
discriminator and the negative exemplar of the triplet loss.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import ARTERY, VEIN, VESSEL, AVMask

OP_KINDS = ("remove", "shift", "swap")
# window geometry is specified for 256 px patches and rescaled to the mask size
REFERENCE_SIDE = 256
MIN_VESSEL_PIXELS = 50


class ShuffleError(RuntimeError):
    """The perturbation budget could not be met within ``max_ops`` attempts."""


@dataclass(frozen=True)
class ShuffleConfig:
    budget_low: float = 0.05
    budget_high: float = 0.25
    window_side_range: tuple[int, int] = (32, 96)
    shift_range: tuple[int, int] = (-24, 24)
    max_ops: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.budget_low < self.budget_high < 1:
            raise ValueError("need 0 < budget_low < budget_high < 1")
        lo, hi = self.window_side_range
        if lo <= 0 or hi < lo:
            raise ValueError("window sides must be positive and ordered")
        if self.shift_range[0] > self.shift_range[1]:
            raise ValueError("shift_range must be ordered")
        if self.max_ops < 1:
            raise ValueError("max_ops must be >= 1")


@dataclass
class ShuffleReport:
    # each entry: (kind, (r0, r1, c0, c1), params)
    ops_applied: list = field(default_factory=list)
    final_fraction: float = 0.0
    attempts: int = 0

    def kinds(self) -> set[str]:
        return {op[0] for op in self.ops_applied}

    def to_dict(self) -> dict:
        """JSON-ready form with plain Python numbers."""
        d = asdict(self)
        d["final_fraction"] = float(self.final_fraction)
        d["ops_applied"] = [
            {"kind": k, "window": [int(v) for v in w],
             "params": {key: _plain(v) for key, v in dict(p).items()}}
            for k, w, p in self.ops_applied
        ]
        return d


def _plain(value):
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_plain(v) for v in value]
    return value.item() if isinstance(value, np.generic) else value


def _window_slices(window):
    r0, r1, c0, c1 = window
    return slice(r0, r1), slice(c0, c1)


def op_remove(mask: AVMask, window) -> AVMask:
    """Zero all three channels inside ``window`` = (r0, r1, c0, c1)."""
    out = mask.copy()
    rs, cs = _window_slices(window)
    out.data[:, rs, cs] = 0
    return out


def op_shift(mask: AVMask, window, offset) -> AVMask:
    """Move the window's content by ``offset``; the source is cleared and the
    (border-clipped) destination rectangle overwritten."""
    out = mask.copy()
    r0, r1, c0, c1 = window
    dr, dc = offset
    content = mask.data[:, r0:r1, c0:c1].copy()
    out.data[:, r0:r1, c0:c1] = 0
    h, w = mask.shape
    tr0, tr1 = max(r0 + dr, 0), min(r1 + dr, h)
    tc0, tc1 = max(c0 + dc, 0), min(c1 + dc, w)
    if tr0 < tr1 and tc0 < tc1:
        out.data[:, tr0:tr1, tc0:tc1] = content[
            :, tr0 - r0 - dr:tr1 - r0 - dr, tc0 - c0 - dc:tc1 - c0 - dc
        ]
    return out


def op_swap(mask: AVMask, window) -> AVMask:
    """Exchange artery and vein labels inside ``window``."""
    out = mask.copy()
    rs, cs = _window_slices(window)
    out.data[ARTERY, rs, cs] = mask.data[VEIN, rs, cs]
    out.data[VEIN, rs, cs] = mask.data[ARTERY, rs, cs]
    return out


def apply_op(mask: AVMask, kind: str, window, params) -> AVMask:
    if kind == "remove":
        return op_remove(mask, window)
    if kind == "shift":
        return op_shift(mask, window, params["offset"])
    if kind == "swap":
        return op_swap(mask, window)
    raise ValueError(f"unknown shuffle op {kind!r}")


def shuffle_fraction(original: AVMask, perturbed: AVMask) -> float:
    """Fraction of the original vessel pixels whose (artery, vein, vessel) label changed."""
    if original.shape != perturbed.shape:
        raise ValueError("masks differ in shape")
    on_vessel = original.vessel > 0.5
    n = int(on_vessel.sum())
    if n == 0:
        raise ValueError("original mask has no vessel pixels")
    changed = np.any(original.data != perturbed.data, axis=0)
    return float(np.count_nonzero(changed & on_vessel)) / n


def replay(mask: AVMask, report: ShuffleReport) -> AVMask:
    out = mask
    for kind, window, params in report.ops_applied:
        out = apply_op(out, kind, window, params)
    return out


def _window_around(center, side, shape):
    h, w = shape
    half = side // 2
    r0 = min(max(center[0] - half, 0), max(h - side, 0))
    c0 = min(max(center[1] - half, 0), max(w - side, 0))
    return (r0, min(r0 + side, h), c0, min(c0 + side, w))


def shuffle_mask(mask: AVMask, cfg: ShuffleConfig = ShuffleConfig(), rng=None):
    """Randomly damage ``mask`` until 5-25% (by default) of its vessel pixels changed.

    Returns ``(shuffled, report)``. ``rng`` overrides the generator seeded from
    ``cfg.seed``. Raises :class:`ShuffleError` when the budget is not reached.
    """
    if mask.kind != "binary":
        raise ValueError("shuffle_mask expects a binary mask")
    vessel_px = np.argwhere(mask.vessel > 0.5)
    if len(vessel_px) < MIN_VESSEL_PIXELS:
        raise ValueError(f"mask has {len(vessel_px)} vessel pixels, need {MIN_VESSEL_PIXELS}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    scale = min(mask.shape) / REFERENCE_SIDE
    side_lo = max(int(round(cfg.window_side_range[0] * scale)), 2)
    side_hi = max(int(round(cfg.window_side_range[1] * scale)), side_lo)
    shift_lo = int(np.floor(cfg.shift_range[0] * scale))
    shift_hi = int(np.ceil(cfg.shift_range[1] * scale))

    current = mask
    report = ShuffleReport()
    fraction = 0.0
    while report.attempts < cfg.max_ops:
        kind = OP_KINDS[int(rng.integers(len(OP_KINDS)))]
        center = vessel_px[int(rng.integers(len(vessel_px)))]
        side = int(rng.integers(side_lo, side_hi + 1))
        params = {}
        if kind == "shift":
            params["offset"] = (int(rng.integers(shift_lo, shift_hi + 1)),
                                int(rng.integers(shift_lo, shift_hi + 1)))
        while side >= 1 and report.attempts < cfg.max_ops:
            report.attempts += 1
            window = _window_around(center, side, mask.shape)
            candidate = apply_op(current, kind, window, params)
            frac = shuffle_fraction(mask, candidate)
            if frac <= cfg.budget_high:
                current, fraction = candidate, frac
                report.ops_applied.append((kind, window, params))
                break
            side //= 2  # overshoot: revert and retry smaller
        if cfg.budget_low <= fraction <= cfg.budget_high:
            report.final_fraction = fraction
            return current, report
    raise ShuffleError(
        f"fraction {fraction:.3f} not in [{cfg.budget_low}, {cfg.budget_high}] "
        f"after {report.attempts} attempts"
    )
