"""
Desk-scale ablation
===================

Trains the generator on 64 synthetic samples with the settings in
``configs/desk.ini`` (500 iterations, about three minutes per run on one
CPU core) for each requested ablation, then scores held-out samples and
prints the comparison table.

Run ``python plot_desk_training.py baseline +TR-D+TL`` to pick ablations.
"""

import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from avrank.cli import read_config, train_defaults
from avrank.dataset import synth_dataset
from avrank.evaluate import av_metrics, connectivity_report, emit_tables, pool_metrics
from avrank.infer import binarize, predict_image
from avrank.train import TrainConfig, fit, init_state, save_generator

root = Path(__file__).resolve().parents[1]
out = Path(__file__).with_name("output")
out.mkdir(exist_ok=True)

values = train_defaults()
values.update(read_config(root / "configs" / "desk.ini", values))
train = synth_dataset(values["synth_n"], seed=values["synth_seed"], size=(128, 128))
held_out = synth_dataset(20, seed=1, size=(128, 128))

ablations = sys.argv[1:] or ["baseline", "+TR-D+TL"]
runs = []
for ablation in ablations:
    cfg = TrainConfig(**{**{f.name: values[f.name] for f in fields(TrainConfig)},
                         "ablation": ablation})
    state = fit(init_state(cfg), train, log_every=0)
    bce = np.array([r["bce"] for r in state.history])
    print(f"{cfg.ablation}: BCE {bce[:50].mean():.3f} -> {bce[-50:].mean():.3f}")
    save_generator(state.generator, out / f"generator_{cfg.ablation.strip('+')}.pt",
                   state.iteration, cfg.patch)

    g = state.generator.eval()
    preds = [binarize(predict_image(g, s.image, patch=cfg.patch)) for s in held_out]
    pooled = pool_metrics([av_metrics(p, s.mask) for p, s in zip(preds, held_out)])
    runs.append((cfg.ablation, pooled, connectivity_report(preds[0])))

table = emit_tables(runs)
print(table.text)
(out / "desk_ablation.csv").write_text(table.csv)
