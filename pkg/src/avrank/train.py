"""Alternating adversarial training of the segmentation generator.

Each iteration builds a shuffled mask per sample, takes one discriminator
step on detached predictions and one generator step on

    BCE + lambda_adv * adversarial + lambda_triplet * triplet

with terms switched off according to the ablation setting.
"""

from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import ARTERY, VEIN, VESSEL, MIN_SYNTH_SIZE, AVMask, sample_patch
from .discriminator import (DiscriminatorConfig, disc_loss, gen_adv_loss,
                            general_discriminator_loss, init_discriminator)
from .generator import GeneratorConfig, init_generator
from .shuffle import MIN_VESSEL_PIXELS, ShuffleConfig, ShuffleError, shuffle_mask
from .topofeat import TripletConfig, init_extractor, triplet_loss

log = logging.getLogger(__name__)

EPS = 1e-7
# ablation -> (discriminator kind, triplet module)
ABLATIONS = {
    "baseline": (None, False),
    "+GD": ("general", False),
    "+TR-D": ("ranking", False),
    "+TL": (None, True),
    "+TR-D+TL": ("ranking", True),
}
HISTORY_FIELDS = ("iteration", "bce", "adv_d", "adv_g", "triplet", "lr")
SHUFFLE_RETRIES = 8
PATCH_RETRIES = 20


def normalize_ablation(name: str) -> str:
    key = name.strip().upper().replace(" ", "")
    if not key.startswith("+") and key != "BASELINE":
        key = "+" + key
    for canonical in ABLATIONS:
        if canonical.upper() == key:
            return canonical
    raise ValueError(f"unknown ablation {name!r}; choose from {list(ABLATIONS)}")


def derive_seed(seed: int, component: str) -> int:
    """Per-component seed: first word of SeedSequence([seed, crc32(component)])."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(component.encode())])
    return int(ss.generate_state(1)[0])


@dataclass
class TrainConfig:
    mu_vessel: float = 0.4
    mu_artery: float = 0.3
    mu_vein: float = 0.3
    lambda_adv: float = 0.2
    lambda_triplet: float = 0.1
    max_iters: int = 30000
    batch: int = 4
    lr0: float = 2e-4
    lr_half_every: int = 7000
    beta1: float = 0.9
    beta2: float = 0.999
    patch: int = 256
    ablation: str = "+TR-D+TL"
    seed: int = 0
    # network sizes
    gen_base_width: int = 16
    gen_stages: int = 5
    gen_encoder_weights: str = ""
    disc_base_width: int = 64
    disc_max_width: int = 512
    extractor_width_scale: float = 1.0
    extractor_weights: str = ""
    triplet_margin: float = 1.0
    triplet_levels: int = 4
    # shuffled-mask budget
    shuffle_budget_low: float = 0.05
    shuffle_budget_high: float = 0.25
    shuffle_window_min: int = 32
    shuffle_window_max: int = 96
    shuffle_shift_max: int = 24
    shuffle_max_ops: int = 100
    checkpoint_every: int = 1000

    def __post_init__(self):
        self.ablation = normalize_ablation(self.ablation)
        if min(self.mu_vessel, self.mu_artery, self.mu_vein) <= 0:
            raise ValueError("class weights must be positive")
        if self.lambda_adv < 0 or self.lambda_triplet < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lr0 <= 0 or self.lr_half_every < 1:
            raise ValueError("need lr0 > 0 and lr_half_every >= 1")
        if self.batch < 1 or self.max_iters < 1 or self.patch < MIN_SYNTH_SIZE:
            raise ValueError("batch, max_iters must be >= 1 and patch >= 64")

    @property
    def mu(self) -> tuple[float, float, float]:
        """(vessel, artery, vein) weights."""
        return (self.mu_vessel, self.mu_artery, self.mu_vein)

    @property
    def disc_kind(self):
        kind = ABLATIONS[self.ablation][0]
        return kind if kind is not None and self.lambda_adv > 0 else None

    @property
    def use_triplet(self) -> bool:
        return ABLATIONS[self.ablation][1] and self.lambda_triplet > 0

    @property
    def needs_shuffle(self) -> bool:
        return self.disc_kind == "ranking" or self.use_triplet

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(encoder_stages=self.gen_stages, base_width=self.gen_base_width,
                               seed=derive_seed(self.seed, "generator"))

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(base_width=self.disc_base_width, max_width=self.disc_max_width,
                                   out_bits=1 if ABLATIONS[self.ablation][0] == "general" else 2,
                                   seed=derive_seed(self.seed, "discriminator"))

    def triplet_config(self) -> TripletConfig:
        return TripletConfig(margin=self.triplet_margin, num_levels=self.triplet_levels,
                             extractor_seed=derive_seed(self.seed, "extractor"),
                             width_scale=self.extractor_width_scale,
                             pretrained_weights=self.extractor_weights or None)

    def shuffle_config(self) -> ShuffleConfig:
        return ShuffleConfig(budget_low=self.shuffle_budget_low,
                             budget_high=self.shuffle_budget_high,
                             window_side_range=(self.shuffle_window_min, self.shuffle_window_max),
                             shift_range=(-self.shuffle_shift_max, self.shuffle_shift_max),
                             max_ops=self.shuffle_max_ops,
                             seed=derive_seed(self.seed, "shuffle"))

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# losses and schedule

def bce_seg_loss(pred: torch.Tensor, target: torch.Tensor, mu=(0.4, 0.3, 0.3)) -> torch.Tensor:
    """Class-weighted binary cross entropy; ``mu`` is ordered (vessel, artery, vein).

    Tensors are (B, 3, H, W) in (artery, vein, vessel) channel order.
    """
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    p = pred.clamp(EPS, 1 - EPS)
    per_px = -(target * torch.log(p) + (1 - target) * torch.log(1 - p))
    per_channel = per_px.mean(dim=(0, 2, 3))
    w_vessel, w_artery, w_vein = mu
    return (w_vessel * per_channel[VESSEL] + w_artery * per_channel[ARTERY]
            + w_vein * per_channel[VEIN])


def generator_loss(bce, adv=None, triplet=None, lambda_adv=0.2, lambda_triplet=0.1):
    """Weighted sum; a ``None`` component is an ablated module and contributes nothing."""
    total = bce
    if adv is not None:
        total = total + lambda_adv * adv
    if triplet is not None:
        total = total + lambda_triplet * triplet
    return total


def lr_at(iteration: int, lr0: float = 2e-4, half_every: int = 7000) -> float:
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    return lr0 * 2.0 ** -(iteration // half_every)


# --------------------------------------------------------------------------
# state

class NonFiniteLossError(FloatingPointError):
    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainState:
    config: TrainConfig
    generator: torch.nn.Module
    discriminator: torch.nn.Module
    extractor: torch.nn.Module | None
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng: np.random.Generator
    iteration: int = 0
    history: list = field(default_factory=list)


def init_state(cfg: TrainConfig) -> TrainState:
    gen = init_generator(cfg.generator_config(), cfg.gen_encoder_weights or None)
    disc = init_discriminator(cfg.discriminator_config())
    extractor = init_extractor(cfg.triplet_config()) if cfg.use_triplet else None
    betas = (cfg.beta1, cfg.beta2)
    return TrainState(
        config=cfg,
        generator=gen,
        discriminator=disc,
        extractor=extractor,
        opt_g=torch.optim.Adam(gen.parameters(), lr=cfg.lr0, betas=betas),
        opt_d=torch.optim.Adam(disc.parameters(), lr=cfg.lr0, betas=betas),
        rng=np.random.default_rng(derive_seed(cfg.seed, "patches")),
    )


def next_batch(state: TrainState, samples):
    """Draw ``batch`` random patches; patches too sparse to shuffle are redrawn."""
    cfg = state.config
    images, masks = [], []
    for _ in range(cfg.batch):
        sample = samples[int(state.rng.integers(len(samples)))]
        for _ in range(PATCH_RETRIES):
            patch = sample_patch(sample, state.rng, cfg.patch)
            if not cfg.needs_shuffle or patch.mask.vessel.sum() >= MIN_VESSEL_PIXELS:
                break
        images.append(patch.image)
        masks.append(patch.mask)
    return np.stack(images), masks


def _shuffled(cfg: TrainConfig, masks, iteration: int) -> list[AVMask]:
    scfg = cfg.shuffle_config()
    out = []
    for i, m in enumerate(masks):
        for attempt in range(SHUFFLE_RETRIES):
            rng = np.random.default_rng([scfg.seed, iteration, i, attempt])
            try:
                out.append(shuffle_mask(m, scfg, rng=rng)[0])
                break
            except ShuffleError:
                continue
        else:
            raise ShuffleError(f"iteration {iteration}, sample {i}: budget never met")
    return out


def _masks_tensor(masks) -> torch.Tensor:
    if isinstance(masks, torch.Tensor):
        return masks.float()
    return torch.as_tensor(np.stack([m.data for m in masks]), dtype=torch.float32)


def _check_finite(state, **losses):
    bad = {k: v for k, v in losses.items() if v is not None and not math.isfinite(v)}
    if bad:
        snapshot = {"iteration": state.iteration, "losses": losses,
                    "lr": lr_at(state.iteration, state.config.lr0, state.config.lr_half_every)}
        raise NonFiniteLossError(f"non-finite loss at iteration {state.iteration}: {bad}", snapshot)


def train_step(state: TrainState, images, masks) -> TrainState:
    """One discriminator update then one generator update, in place."""
    cfg = state.config
    it = state.iteration
    if len(masks) != cfg.batch:
        raise ValueError(f"batch of {len(masks)}, config expects {cfg.batch}")
    lr = lr_at(it, cfg.lr0, cfg.lr_half_every)
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32).permute(0, 3, 1, 2)
    target = _masks_tensor(masks)
    shuffled = _masks_tensor(_shuffled(cfg, masks, it)) if cfg.needs_shuffle else None

    G = state.generator
    G.train()
    pred = G(x)

    kind = cfg.disc_kind
    d_val = None
    if kind is not None:
        D = state.discriminator
        D.train()
        D.requires_grad_(True)
        fake = pred.detach()
        if kind == "ranking":
            loss_d = disc_loss({"shuffled": D(x, shuffled), "generated": D(x, fake),
                                "ground_truth": D(x, target)})
        else:
            loss_d = general_discriminator_loss(D(x, target), D(x, fake))
        d_val = loss_d.item()
        _check_finite(state, adv_d=d_val)
        for group in state.opt_d.param_groups:
            group["lr"] = lr
        state.opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        state.opt_d.step()
        D.requires_grad_(False)

    l_bce = bce_seg_loss(pred, target, cfg.mu)
    l_adv = gen_adv_loss(state.discriminator(x, pred)) if kind is not None else None
    l_trip = None
    if cfg.use_triplet:
        l_trip = triplet_loss(target, pred, shuffled, cfg.triplet_config(), state.extractor)
    loss_g = generator_loss(l_bce, l_adv, l_trip, cfg.lambda_adv, cfg.lambda_triplet)
    record = {
        "iteration": it,
        "bce": l_bce.item(),
        "adv_d": d_val if d_val is not None else float("nan"),
        "adv_g": l_adv.item() if l_adv is not None else float("nan"),
        "triplet": l_trip.item() if l_trip is not None else float("nan"),
        "lr": lr,
    }
    active = {k: record[k] for k, t in (("adv_g", l_adv), ("triplet", l_trip)) if t is not None}
    _check_finite(state, bce=record["bce"], total=loss_g.item(), **active)
    for group in state.opt_g.param_groups:
        group["lr"] = lr
    state.opt_g.zero_grad(set_to_none=True)
    loss_g.backward()
    state.opt_g.step()

    state.history.append(record)
    state.iteration += 1
    return state


# --------------------------------------------------------------------------
# persistence

def save_train_state(state: TrainState, path) -> Path:
    tensors = {f"generator.{k}": v for k, v in state.generator.state_dict().items()}
    tensors.update({f"discriminator.{k}": v for k, v in state.discriminator.state_dict().items()})
    extra = {
        "generator_config": asdict(state.generator.cfg),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "rng": state.rng.bit_generator.state,
        "history": list(state.history),
    }
    return save_checkpoint(path, kind="train_state", config=asdict(state.config),
                           tensors=tensors, iteration=state.iteration, extra=extra)


def load_train_state(path) -> TrainState:
    payload = load_checkpoint(path, kind="train_state")
    state = init_state(TrainConfig.from_dict(payload["config"]))
    tensors = payload["tensors"]
    for prefix, module in (("generator.", state.generator), ("discriminator.", state.discriminator)):
        module.load_state_dict({k[len(prefix):]: v for k, v in tensors.items()
                                if k.startswith(prefix)})
    extra = payload["extra"]
    state.opt_g.load_state_dict(extra["opt_g"])
    state.opt_d.load_state_dict(extra["opt_d"])
    state.rng.bit_generator.state = extra["rng"]
    state.history = list(extra["history"])
    state.iteration = payload["iteration"]
    return state


def save_generator(model, path, iteration: int = 0, patch: int | None = None) -> Path:
    extra = {} if patch is None else {"patch": int(patch)}
    return save_checkpoint(path, kind="generator", config=asdict(model.cfg),
                           tensors=model.state_dict(), iteration=iteration, extra=extra)


def load_generator(path):
    """Generator from a ``generator`` or ``train_state`` checkpoint."""
    payload = load_checkpoint(path)
    if payload["kind"] == "generator":
        cfg, tensors = payload["config"], payload["tensors"]
    elif payload["kind"] == "train_state":
        cfg = payload["extra"]["generator_config"]
        tensors = {k[len("generator."):]: v for k, v in payload["tensors"].items()
                   if k.startswith("generator.")}
    else:
        raise ValueError(f"{path}: no generator in a {payload['kind']!r} checkpoint")
    model = init_generator(GeneratorConfig(**cfg))
    model.load_state_dict(tensors)
    return model.eval()


def write_history(history, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        writer.writeheader()
        for rec in history:
            writer.writerow({k: repr(rec[k]) if isinstance(rec[k], float) else rec[k]
                             for k in HISTORY_FIELDS})
    return path


def fit(state: TrainState, samples, n_iters: int | None = None, out_dir=None,
        log_every: int = 50) -> TrainState:
    """Run until ``n_iters`` (default ``max_iters``) total iterations are done."""
    cfg = state.config
    stop = cfg.max_iters if n_iters is None else n_iters
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    while state.iteration < stop:
        images, masks = next_batch(state, samples)
        try:
            train_step(state, images, masks)
        except NonFiniteLossError as exc:
            if out is not None:
                save_train_state(state, out / f"diagnostic_{state.iteration:06d}.pt")
            log.error("%s; snapshot %s", exc, exc.snapshot)
            raise
        rec = state.history[-1]
        if log_every and state.iteration % log_every == 0:
            log.info("iter %d bce %.4f adv_d %.4f adv_g %.4f triplet %.4f lr %.2e",
                     rec["iteration"], rec["bce"], rec["adv_d"], rec["adv_g"],
                     rec["triplet"], rec["lr"])
        if out is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            save_train_state(state, out / f"checkpoint_{state.iteration:06d}.pt")
    if out is not None:
        write_history(state.history, out / "loss_history.csv")
        save_train_state(state, out / "checkpoint_final.pt")
        save_generator(state.generator, out / "generator.pt", state.iteration, cfg.patch)
    return state
