#!/usr/bin/env python3
"""Train the two complementary adapter sets and merge them by Fisher importance.

A small synthetic base task is learned twice from the same frozen backbone:
once with the margin loss (set d) and once with the plain loss (set g). The
per-block diagonal Fisher of the plain loss decides, block by block, how
much of each update survives in the merged model.
"""

import numpy as np

from marginmerge.backbone import embed
from marginmerge.config import default_config
from marginmerge.datagen import SyntheticSpec, generate
from marginmerge.margin_head import DISCRIMINATIVE, GENERALIZATION, predict
from marginmerge.numerics import SeededRng
from marginmerge.protocol import MERGED, build_stream, pretrain_from_fixture, train_complementary

spec = SyntheticSpec(num_classes=20, pretext_classes=40, samples_per_class_pretext=60, parent_classes=10)
cfg = default_config(stream={"base_classes": 10, "n_way": 5, "k_shot": 5, "sessions": 2})
fixture = generate(spec, seed=0)

print("pretraining the backbone on the pretext split ...")
backbone = pretrain_from_fixture(fixture, cfg, SeededRng(0, "pretrain"), epochs=10)
stream = build_stream(fixture, cfg["stream"], SeededRng(0, "stream"))
base = train_complementary(backbone, stream.sessions[0], cfg, SeededRng(0, "base"))

print()
print(f"{'layer':>5} {'block':>6} {'|F_d|':>10} {'|F_g|':>10} {'w_d':>6} {'w_g':>6}")
for row in base.merge_report:
    print(f"{row['layer']:>5} {row['block']:>6} {row['frob_d']:>10.3e} {row['frob_g']:>10.3e} {row['fis_d']:>6.3f} {row['fis_g']:>6.3f}")

s0 = stream.sessions[0]
print()
print("base-session test accuracy with each model's own prototypes:")
for variant in (DISCRIMINATIVE, GENERALIZATION, MERGED):
    deltas = base.deltas_for(variant)
    train = embed(backbone, deltas, s0.train_x)
    protos = np.stack([train[s0.train_y == c].mean(0) for c in base.base_classes], axis=1)
    acc = np.mean(predict(embed(backbone, deltas, s0.test_x), protos) == s0.test_y)
    print(f"  {variant:>15}: {acc:.3f}")
