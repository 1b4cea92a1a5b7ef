#!/usr/bin/env python3
"""How the sigmoid temperature trades smoothness for fidelity in truncated AP."""
# %%
import numpy as np

from placerec.losses import BatchRelations, LossConfig, hard_truncated_ap_oracle, truncated_smooth_ap

# query 0; clouds 1-3 share its place, 4-9 are elsewhere
labels = np.array([0, 0, 0, 0, 1, 1, 2, 2, 3, 3])
rel = BatchRelations.from_labels(labels)
rng = np.random.default_rng(3)
d = np.concatenate([[0.0], rng.uniform(0.1, 0.6, 3), rng.uniform(0.3, 1.0, 6)])
print("distances:", np.round(d, 3))

# %%
for k in (1, 2, 4):
    hard = hard_truncated_ap_oracle(0, d, rel, k)
    row = [truncated_smooth_ap(0, d, rel, LossConfig(tau=t, k=k)) for t in (1.0, 0.1, 0.01, 1e-4)]
    print(f"k={k}: hard {hard:.4f} | smooth at tau 1, 0.1, 0.01, 1e-4:", " ".join(f"{v:.4f}" for v in row))

# %% as the positives move ahead of every negative, AP climbs to 1
for shift in (0.0, 0.2, 0.4, 0.6):
    dd = d.copy()
    dd[1:4] = np.maximum(dd[1:4] - shift, 0.01)
    print(f"shift {shift:.1f}: smooth AP {truncated_smooth_ap(0, dd, rel, LossConfig()):.4f}")
