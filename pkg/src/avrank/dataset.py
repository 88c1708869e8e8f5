"""Fundus samples, artery/vein masks, AV-DRIVE I/O and synthetic vessel trees."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

# Canonical channel order of every mask array and network output.
CHANNELS = ("artery", "vein", "vessel")
ARTERY, VEIN, VESSEL = 0, 1, 2

IMAGE_SUFFIXES = (".tif", ".tiff", ".png")
MIN_SYNTH_SIZE = 64


class LoadError(RuntimeError):
    pass


@dataclass
class AVMask:
    """Three-channel artery/vein/vessel map.

    ``data`` has shape (3, H, W) in :data:`CHANNELS` order. ``ignore`` marks
    pixels whose A/V label is unknown (white "uncertain" annotations); they
    count as vessel but are left out of A/V metrics.
    """

    data: np.ndarray
    kind: str = "binary"
    ignore: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise ValueError(f"mask data must be (3, H, W), got {self.data.shape}")
        if self.kind not in ("binary", "probability"):
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if self.ignore is None:
            self.ignore = np.zeros(self.shape, dtype=bool)
        else:
            self.ignore = np.asarray(self.ignore, dtype=bool)
            if self.ignore.shape != self.shape:
                raise ValueError("ignore map must match mask H x W")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1:]

    @property
    def artery(self) -> np.ndarray:
        return self.data[ARTERY]

    @property
    def vein(self) -> np.ndarray:
        return self.data[VEIN]

    @property
    def vessel(self) -> np.ndarray:
        return self.data[VESSEL]

    @classmethod
    def from_channels(cls, artery, vein, vessel, kind="binary", ignore=None) -> AVMask:
        return cls(np.stack([artery, vein, vessel]), kind=kind, ignore=ignore)

    @classmethod
    def empty(cls, shape) -> AVMask:
        return cls(np.zeros((3, *shape), dtype=np.float32))

    def copy(self) -> AVMask:
        return AVMask(self.data.copy(), kind=self.kind, ignore=self.ignore.copy())

    def check(self) -> None:
        """Raise ``ValueError`` if the channel invariants are violated."""
        d = self.data
        if np.any(d < 0) or np.any(d > 1):
            raise ValueError("mask values outside [0, 1]")
        if self.kind == "binary":
            if not np.all((d == 0) | (d == 1)):
                raise ValueError("binary mask holds non-binary values")
            if np.any(((d[ARTERY] == 1) | (d[VEIN] == 1)) & (d[VESSEL] == 0)):
                raise ValueError("artery/vein pixel without vessel label")

    def is_valid(self) -> bool:
        try:
            self.check()
        except ValueError:
            return False
        return True


@dataclass
class FundusSample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: AVMask
    fov: np.ndarray = None
    id: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be (H, W, 3), got {self.image.shape}")
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError("image and mask differ in size")
        if self.fov is None:
            self.fov = np.ones(self.mask.shape, dtype=bool)
        self.fov = np.asarray(self.fov, dtype=bool)


@dataclass
class SamplePatch:
    image: np.ndarray
    mask: AVMask
    origin: tuple[int, int] = field(default=(0, 0))


# --------------------------------------------------------------------------
# color-coded ground truth

def decode_color(rgb: np.ndarray) -> AVMask:
    """Decode an RGB annotation (red artery, blue vein, green crossing, white uncertain)."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] < 3:
        raise ValueError("expected an RGB array")
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.rint(rgb * 255 if rgb.max() <= 1 else rgb), 0, 255).astype(np.uint8)
    r, g, b = (rgb[..., i] >= 128 for i in range(3))
    red = r & ~g & ~b
    green = g & ~r & ~b
    blue = b & ~r & ~g
    vessel = r | g | b
    artery = red | green
    vein = blue | green
    # any other lit color (white or stray hues) carries no usable A/V label
    ignore = vessel & ~artery & ~vein
    return AVMask.from_channels(artery, vein, vessel, ignore=ignore)


def encode_color(mask: AVMask) -> np.ndarray:
    """Inverse of :func:`decode_color`; returns uint8 (H, W, 3)."""
    a = mask.artery >= 0.5
    v = mask.vein >= 0.5
    ves = mask.vessel >= 0.5
    out = np.zeros((*mask.shape, 3), dtype=np.uint8)
    out[a & ~v] = (255, 0, 0)
    out[v & ~a] = (0, 0, 255)
    out[a & v] = (0, 255, 0)
    out[ves & ~a & ~v] = (255, 255, 255)
    return out


# --------------------------------------------------------------------------
# AV-DRIVE layout

_PREFIX = re.compile(r"^(\d+)")


def _index_by_prefix(folder: Path, suffixes) -> dict[int, Path]:
    found = {}
    for p in sorted(folder.iterdir()):
        if p.suffix.lower() not in suffixes:
            continue
        m = _PREFIX.match(p.name)
        if m:
            found[int(m.group(1))] = p
    return found


def _read_rgb(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc


def load_avdrive(root, split: str = "train") -> list[FundusSample]:
    """Load ``<root>/<split>/{images,av}`` pairs, matched by numeric filename prefix.

    An optional ``<split>/mask`` folder provides field-of-view masks.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    base = Path(root) / split
    img_dir, av_dir, fov_dir = base / "images", base / "av", base / "mask"
    for d in (img_dir, av_dir):
        if not d.is_dir():
            raise LoadError(f"missing directory {d}")
    images = _index_by_prefix(img_dir, IMAGE_SUFFIXES)
    labels = _index_by_prefix(av_dir, (".png",))
    if not images:
        raise LoadError(f"no images found in {img_dir}")
    fovs = _index_by_prefix(fov_dir, IMAGE_SUFFIXES + (".gif",)) if fov_dir.is_dir() else {}

    samples = []
    for key, img_path in images.items():
        if key not in labels:
            raise LoadError(f"no av annotation pairs with {img_path}")
        image = _read_rgb(img_path).astype(np.float32) / 255.0
        mask = decode_color(_read_rgb(labels[key]))
        if image.shape[:2] != mask.shape:
            raise LoadError(
                f"{labels[key]} is {mask.shape}, image {img_path.name} is {image.shape[:2]}"
            )
        fov = None
        if key in fovs:
            fov = _read_rgb(fovs[key])[..., 0] >= 128
            if fov.shape != mask.shape:
                raise LoadError(f"{fovs[key]} does not match image size")
        samples.append(FundusSample(image, mask, fov, id=img_path.stem))
    unpaired = set(labels) - set(images)
    if unpaired:
        raise LoadError(f"av annotations without image: {sorted(labels[k].name for k in unpaired)}")
    return samples


def export_avdrive(samples, root, split: str = "train") -> list[Path]:
    """Write samples in the AV-DRIVE layout read by :func:`load_avdrive`."""
    base = Path(root) / split
    written = []
    for sub in ("images", "av", "mask"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples, start=1):
        stem = f"{i:02d}_{s.id or 'sample'}"
        img = np.clip(np.rint(s.image * 255), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(base / "images" / f"{stem}.png")
        Image.fromarray(encode_color(s.mask)).save(base / "av" / f"{stem}.png")
        Image.fromarray(s.fov.astype(np.uint8) * 255).save(base / "mask" / f"{stem}.png")
        written.append(base / "images" / f"{stem}.png")
    return written


# --------------------------------------------------------------------------
# synthetic vessel trees

ARTERY_COLOR = np.array([0.95, 0.55, 0.35], dtype=np.float32)
VEIN_COLOR = np.array([0.45, 0.25, 0.75], dtype=np.float32)
BACKGROUND = np.array([0.12, 0.05, 0.03], dtype=np.float32)


def _stamp(canvas, r, c, width):
    h, w = canvas.shape
    lo = -(width // 2)
    hi = width + lo
    canvas[max(r + lo, 0):max(min(r + hi, h), 0), max(c + lo, 0):max(min(c + hi, w), 0)] = True


def _grow_branch(canvas, rng, r, c, angle, width, length, depth):
    h, w = canvas.shape
    pr, pc = float(r), float(c)
    for step in range(length):
        angle += rng.normal(0.0, 0.12)
        pr += np.sin(angle)
        pc += np.cos(angle)
        ir, ic = int(round(pr)), int(round(pc))
        if not (0 <= ir < h and 0 <= ic < w):
            return
        _stamp(canvas, ir, ic, width)
        if depth > 0 and step > 6 and rng.random() < 0.035:
            side = rng.choice((-1.0, 1.0))
            child = angle + side * rng.uniform(0.5, 1.0)
            _grow_branch(canvas, rng, ir, ic, child, max(width - 1, 1),
                         int(length * rng.uniform(0.3, 0.6)), depth - 1)


def _grow_tree(shape, rng, start, angle):
    canvas = np.zeros(shape, dtype=bool)
    length = int(1.1 * max(shape))
    _grow_branch(canvas, rng, start[0], start[1], angle, 3, length, depth=2)
    return canvas


def synth_sample(seed: int, size=(128, 128)) -> FundusSample:
    """Deterministic synthetic fundus patch with one artery tree and one vein tree."""
    h, w = size
    if h < MIN_SYNTH_SIZE or w < MIN_SYNTH_SIZE:
        raise ValueError(f"synthetic size must be at least {MIN_SYNTH_SIZE}x{MIN_SYNTH_SIZE}")
    rng = np.random.default_rng(seed)
    # both trees leave a shared "disc" region so they cross now and then
    disc = (int(rng.uniform(0.3, 0.7) * h), int(rng.uniform(0.05, 0.2) * w))
    trees = []
    for _ in range(2):
        start = (int(np.clip(disc[0] + rng.integers(-8, 9), 0, h - 1)), disc[1])
        trees.append(_grow_tree((h, w), rng, start, rng.uniform(-0.9, 0.9)))
    artery, vein = trees
    vessel = artery | vein
    mask = AVMask.from_channels(artery, vein, vessel)

    image = np.empty((h, w, 3), dtype=np.float32)
    a_only, v_only, both = artery & ~vein, vein & ~artery, artery & vein
    for ch in range(3):
        plane = np.full((h, w), BACKGROUND[ch], dtype=np.float32)
        plane[a_only] = ARTERY_COLOR[ch]
        plane[v_only] = VEIN_COLOR[ch]
        plane[both] = 0.5 * (ARTERY_COLOR[ch] + VEIN_COLOR[ch])
        image[..., ch] = ndimage.gaussian_filter(plane, sigma=0.7)
    image += rng.normal(0.0, 0.03, size=image.shape).astype(np.float32)
    np.clip(image, 0.0, 1.0, out=image)
    return FundusSample(image, mask, np.ones((h, w), dtype=bool), id=f"synth{seed}")


def synth_dataset(n: int, seed: int = 0, size=(128, 128)) -> list[FundusSample]:
    return [synth_sample(seed * 100003 + i, size) for i in range(n)]


# --------------------------------------------------------------------------
# patches

def _pad_to(array: np.ndarray, size: int, axes=(0, 1)) -> np.ndarray:
    pad = [(0, 0)] * array.ndim
    for ax in axes:
        pad[ax] = (0, max(size - array.shape[ax], 0))
    if all(p == (0, 0) for p in pad):
        return array
    return np.pad(array, pad, mode="reflect")


def sample_patch(sample: FundusSample, rng: np.random.Generator, size: int = 256) -> SamplePatch:
    """Crop a uniformly placed ``size`` x ``size`` patch, reflect-padding small images."""
    image = _pad_to(sample.image, size, axes=(0, 1))
    data = _pad_to(sample.mask.data, size, axes=(1, 2))
    ignore = _pad_to(sample.mask.ignore, size, axes=(0, 1))
    h, w = image.shape[:2]
    r = int(rng.integers(0, h - size + 1))
    c = int(rng.integers(0, w - size + 1))
    sl = (slice(r, r + size), slice(c, c + size))
    mask = AVMask(data[(slice(None), *sl)].copy(), kind=sample.mask.kind, ignore=ignore[sl].copy())
    return SamplePatch(image[sl].copy(), mask, (r, c))
