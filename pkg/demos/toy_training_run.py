#!/usr/bin/env python3
"""Train on a shrunken world for a few epochs and watch recall move.

Takes about two minutes on one core. With only 20 training places and ~60 optimizer steps it
stays well short of the full preset; that protocol is ``placerec train --toy``.
"""
# %%
import time

from placerec.datasets import WorldConfig, generate_world
from placerec.network import NetworkConfig, build
from placerec.trainer import evaluate_model, toy_train_config, train

world = generate_world(WorldConfig(n_locations=30, n_test_locations=10, points_per_cloud=1000, seed=7))
model = build(NetworkConfig.toy(), 7)
print("untrained AR@1:", evaluate_model(model, world)["recall_at"]["1"])

# %%
cfg = toy_train_config(batch_size=32, epochs=30, lr_decay_epochs=(22,), seed=7)
t0 = time.time()


def show(rec):
    if "eval_ar_at_1" in rec:
        print(f"epoch {rec['epoch']:2d}  AR@1 {rec['eval_ar_at_1']:.1f}  ({time.time() - t0:.0f} s)")
    elif rec["step"] == 0:
        print(f"epoch {rec['epoch']:2d}  loss {rec['loss']:.3f}")


train(model, world, cfg, eval_every=6, callback=show)

# %%
report = evaluate_model(model, world)
print({n: round(v, 1) for n, v in report["recall_at"].items()}, "AR@1%", report["ar_at_1pct"])
