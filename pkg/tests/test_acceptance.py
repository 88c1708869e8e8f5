"""Acceptance criteria 1-10, one test each, each reporting a PASS/FAIL line.

Criterion 8 trains the desk configuration in ``configs/desk.ini``, roughly
three minutes per attempt on one CPU core. Criterion 10 needs the AV-DRIVE
data under ``$AVDRIVE_ROOT`` and is skipped otherwise.
"""

import contextlib
import os
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
import pytest
import torch

from avrank.cli import read_config, train_defaults
from avrank.dataset import load_avdrive, synth_dataset, synth_sample
from avrank.discriminator import disc_loss, gen_adv_loss, ordinal_target
from avrank.evaluate import av_metrics, connectivity_report, pool_metrics
from avrank.generator import count_parameters
from avrank.infer import binarize, predict_image
from avrank.shuffle import ShuffleConfig, ShuffleError, shuffle_mask
from avrank.topofeat import init_extractor, triplet_from_features, triplet_loss
from avrank.train import TrainConfig, bce_seg_loss, derive_seed, fit, init_state, lr_at
from conftest import RESULTS
from gradcheck import relative_error
from test_evaluate import row_mask
from test_shuffle import brute_fraction
from test_topofeat import TOY, brute_triplet, random_pyramids

DESK_INI = Path(__file__).resolve().parents[1] / "configs" / "desk.ini"


@contextlib.contextmanager
def criterion(number, text):
    start = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        if isinstance(exc, pytest.skip.Exception):
            line = f"CRITERION {number:>2} SKIP  {text}: {exc}"
        else:
            line = f"CRITERION {number:>2} FAIL  {text}: {type(exc).__name__}: {exc}"
        RESULTS.append(line)
        print(line)
        raise
    line = f"CRITERION {number:>2} PASS  {text} ({time.perf_counter() - start:.1f} s)"
    RESULTS.append(line)
    print(line)


def within(seconds, start):
    elapsed = time.perf_counter() - start
    assert elapsed < seconds, f"took {elapsed:.1f} s, limit {seconds} s"


# --------------------------------------------------------------------------

def test_c01_ordinal_encoding():
    with criterion(1, "ordinal codes shuffled/generated/ground truth"):
        assert ordinal_target("shuffled").bits == (0, 0)
        assert ordinal_target("generated").bits == (1, 0)
        assert ordinal_target("ground_truth").bits == (1, 1)


def test_c02_shuffle_budget():
    with criterion(2, "200 shuffles inside the 5-25% budget by oracle"):
        start = time.perf_counter()
        fractions, failures = [], 0
        for seed in range(200):
            gt = synth_sample(seed).mask
            try:
                out, _ = shuffle_mask(gt, ShuffleConfig(seed=seed))
            except ShuffleError:
                failures += 1
                continue
            fractions.append(brute_fraction(gt, out))
        within(10, start)
        assert len(fractions) >= 190, f"{failures} of 200 shuffles failed"
        bad = [f for f in fractions if not 0.05 <= f <= 0.25]
        assert not bad, f"fractions outside budget: {bad}"


def test_c03_triplet_oracle():
    with criterion(3, "triplet loss equals brute-force sum on 100 pyramids"):
        start = time.perf_counter()
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(100):
            a, p, n = random_pyramids(rng, levels=int(rng.integers(1, 5)))
            margin = float(rng.uniform(0, 2))
            got = triplet_from_features([torch.tensor(x) for x in a],
                                        [torch.tensor(x) for x in p],
                                        [torch.tensor(x) for x in n], margin).item()
            worst = max(worst, abs(got - brute_triplet(a, p, n, margin)))
        within(5, start)
        assert worst <= 1e-6, f"max deviation {worst:.3g}"


def test_c04_gradient_checks(tiny_generator, tiny_discriminator):
    with criterion(4, "four loss gradients match finite differences"):
        start = time.perf_counter()
        g, d = tiny_generator, tiny_discriminator
        assert count_parameters(g) <= 1000 and count_parameters(d) <= 1000
        gen = torch.Generator().manual_seed(0)
        x = torch.rand(2, 3, 32, 32, dtype=torch.float64, generator=gen)
        target = (torch.rand(2, 3, 32, 32, generator=gen) > 0.7).double()
        masks = {r: torch.rand(2, 3, 32, 32, dtype=torch.float64, generator=gen)
                 for r in ("shuffled", "generated", "ground_truth")}
        extractor = init_extractor(TOY).double()
        negative = torch.rand(2, 3, 32, 32, dtype=torch.float64, generator=gen)
        checks = {
            "bce_seg_loss": (lambda: bce_seg_loss(g(x), target), g),
            "disc_loss": (lambda: disc_loss({r: d(x, m) for r, m in masks.items()}), d),
            "gen_adv_loss": (lambda: gen_adv_loss(d(x, g(x))), g),
            "triplet_loss": (lambda: triplet_loss(target, g(x), negative, TOY, extractor), g),
        }
        errors = {name: relative_error(fn, list(net.parameters()))
                  for name, (fn, net) in checks.items()}
        within(60, start)
        bad = {k: v for k, v in errors.items() if not v < 1e-3}
        assert not bad, f"relative errors {bad}"


def test_c05_lr_schedule():
    with criterion(5, "learning-rate halving schedule"):
        assert lr_at(0) == 2e-4
        assert lr_at(7000) == 1e-4
        assert lr_at(21000) == 2.5e-5


class _Identity(torch.nn.Module):
    """Stands in for a generator that returns the ground truth of each patch."""

    def __init__(self):
        super().__init__()
        self.anchor = torch.nn.Parameter(torch.zeros(()))

    def forward(self, x):
        return x + self.anchor


def test_c06_stitching_identity():
    with criterion(6, "oracle patches stitch back to the 584x565 ground truth"):
        start = time.perf_counter()
        gt = synth_sample(11, (584, 565)).mask
        out = predict_image(_Identity(), np.moveaxis(gt.data, 0, -1).astype(np.float32),
                            patch=256, stride=50)
        within(10, start)
        err = np.abs(out.data - gt.data).max()
        assert err <= 1e-6, f"max deviation {err:.3g}"


def test_c07_metrics_oracle():
    with criterion(7, "A/V metrics match hand counts"):
        m = av_metrics(row_mask("aavvv."), row_mask("aaavv."), "gt_pixels")
        assert (m.n_artery, m.n_vein) == (3, 2)
        assert (m.sen, m.spec, m.acc) == (2 / 3, 1.0, 4 / 5)
        m = av_metrics(row_mask("a.avv."), row_mask("aaavvv"), "gt_pixels")
        assert (m.sen, m.spec, m.acc) == (2 / 3, 2 / 3, 4 / 6)
        m = av_metrics(row_mask("a.avv."), row_mask("aaavvv"), "segmented_pixels")
        assert (m.sen, m.spec, m.acc) == (1.0, 1.0, 1.0)
        gt = synth_sample(5).mask
        assert av_metrics(gt, gt).acc == 1.0


# --------------------------------------------------------------------------
# criterion 8: desk-scale training

def desk_config(**overrides):
    values = train_defaults()
    values.update(read_config(DESK_INI, values))
    values.update(overrides)
    cfg = TrainConfig(**{f.name: values[f.name] for f in fields(TrainConfig)})
    return cfg, values


HELD_OUT_SEED = 1  # synth_dataset seeds never overlap those of the training set


def evaluate_desk(state, held_out):
    g = state.generator.eval()
    d = state.discriminator.eval()
    metrics, gaps, swap_changes = [], [], []
    for i, s in enumerate(held_out):
        prob = predict_image(g, s.image, patch=state.config.patch, stride=50)
        metrics.append(av_metrics(binarize(prob), s.mask, "gt_pixels"))
        shuffled, report = shuffle_mask(s.mask, ShuffleConfig(seed=derive_seed(i, "held-out")))
        x = torch.as_tensor(s.image[None]).permute(0, 3, 1, 2)
        with torch.no_grad():
            real = d(x, torch.as_tensor(s.mask.data[None], dtype=torch.float32))
            fake = d(x, torch.as_tensor(shuffled.data[None], dtype=torch.float32))
            swapped = torch.as_tensor(s.mask.data[[1, 0, 2]][None], dtype=torch.float32)
            swap_changes.append((d(x, swapped) - real).abs().max().item())
        gaps.append(real[:, 0].mean().item() - fake[:, 0].mean().item())
    return pool_metrics(metrics), np.array(gaps), np.array(swap_changes)


def desk_attempt(seed):
    cfg, values = desk_config(seed=seed)
    samples = synth_dataset(values["synth_n"], seed=values["synth_seed"],
                            size=(values["synth_size"],) * 2)
    start = time.perf_counter()
    state = fit(init_state(cfg), samples, log_every=0)
    elapsed = time.perf_counter() - start
    bce = np.array([r["bce"] for r in state.history])
    held_out = synth_dataset(20, seed=HELD_OUT_SEED, size=(values["synth_size"],) * 2)
    pooled, gaps, swap_changes = evaluate_desk(state, held_out)
    result = {
        "seed": seed,
        "iterations": state.iteration,
        "batch": cfg.batch,
        "ablation": cfg.ablation,
        "n_samples": len(samples),
        "seconds": elapsed,
        "bce_ratio": bce[-50:].mean() / bce[:50].mean(),
        "acc": pooled.acc,
        "gap_fraction": float(np.mean(gaps >= 0.1)),
        "mean_gap": float(gaps.mean()),
        "swap_change": float(swap_changes.min()),
    }
    result["passed"] = (result["bce_ratio"] < 0.5 and result["acc"] >= 0.90
                        and result["gap_fraction"] >= 0.8 and elapsed <= 900)
    return result


@pytest.fixture(scope="module")
def desk_run():
    """First attempt at seed 0; the one permitted reseed uses seed 1."""
    first = desk_attempt(0)
    if first["passed"]:
        return first, None
    return desk_attempt(1), first


@pytest.mark.slow
def test_c08_desk_training(desk_run):
    result, failed = desk_run
    note = "" if failed is None else f" after reseed (seed 0: {failed})"
    summary = (f"BCE ratio {result['bce_ratio']:.3f}, acc {result['acc']:.3f}, "
               f"gap fraction {result['gap_fraction']:.2f}, seed {result['seed']}, "
               f"{result['seconds']:.0f} s training")
    with criterion(8, f"desk-scale +TR-D+TL training [{summary}]" + note):
        assert (result["ablation"], result["n_samples"], result["iterations"],
                result["batch"]) == ("+TR-D+TL", 64, 500, 4)
        assert result["seconds"] <= 900, f"{result['seconds']:.0f} s"
        assert result["bce_ratio"] < 0.5, f"BCE ratio {result['bce_ratio']:.3f}"
        assert result["acc"] >= 0.90, f"held-out accuracy {result['acc']:.3f}"
        assert result["gap_fraction"] >= 0.8, f"gap fraction {result['gap_fraction']:.2f}"


@pytest.mark.slow
def test_desk_discriminator_ranks_and_sees_swaps(desk_run):
    result, _ = desk_run
    assert result["mean_gap"] > 0
    assert result["swap_change"] > 0


# --------------------------------------------------------------------------

def test_c09_connectivity_ordering():
    with criterion(9, "damaging shuffles never reduce component counts"):
        start = time.perf_counter()
        checked = 0
        for seed in range(50):
            gt = synth_sample(seed).mask
            out, report = shuffle_mask(gt, ShuffleConfig(seed=derive_seed(seed, "c9")))
            if not report.kinds() & {"remove", "shift"}:
                continue
            checked += 1
            a, b = connectivity_report(gt), connectivity_report(out)
            for cls in ("artery", "vein"):
                assert b[cls].component_count >= a[cls].component_count, (seed, cls)
        within(30, start)
        assert checked >= 25, f"only {checked} damaging shuffles"


@pytest.mark.slow
def test_c10_avdrive_reproduction():
    with criterion(10, "AV-DRIVE full-scale accuracy (optional stretch)"):
        root = os.environ.get("AVDRIVE_ROOT")
        if not root or not Path(root).is_dir():
            pytest.skip("AVDRIVE_ROOT not set; needs the dataset and ~30k GPU iterations")
        train = load_avdrive(root, "train")
        test = load_avdrive(root, "test")
        accs = {}
        for ablation in ("baseline", "+TR-D+TL"):
            state = fit(init_state(TrainConfig(ablation=ablation, gen_base_width=64)), train,
                        log_every=1000)
            g = state.generator.eval()
            accs[ablation] = pool_metrics(
                [av_metrics(binarize(predict_image(g, s.image)), s.mask) for s in test]).acc
        assert abs(accs["+TR-D+TL"] - 0.9546) <= 0.02, accs
        assert accs["+TR-D+TL"] - accs["baseline"] >= 0.02, accs

