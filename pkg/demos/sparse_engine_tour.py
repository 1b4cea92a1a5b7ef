#!/usr/bin/env python3
"""A walk through the voxel engine on one synthetic scan."""
# %%
import numpy as np

from placerec.datasets import WorldConfig, generate_world
from placerec.geometry import quantize
from placerec.network import NetworkConfig, build, forward
from placerec.sparse import Parameter, relu, sparse_conv, sparse_transposed_conv

world = generate_world(WorldConfig(n_locations=4, n_traversals=2, n_test_locations=1, seed=0))
cloud = world.clouds[0]
print(cloud.cloud_id, cloud.points.shape, "points in", cloud.points.min(0).round(2), cloud.points.max(0).round(2))

# %% quantize at 1 cm in normalized units; duplicates collapse into one voxel
vox = quantize(cloud, 0.01)
print(len(vox.coords), "occupied voxels")

# %% a 3x3x3 conv keeps the coordinate set, a stride-2 conv coarsens it
from placerec.network import input_tensor

x = input_tensor(vox)
rng = np.random.default_rng(0)
h = relu(sparse_conv(x, Parameter("w0", rng.normal(size=(27, 1, 4))), 3))
for _ in range(3):
    h = sparse_conv(h, Parameter("wd", rng.normal(size=(8, 4, 4)) / 4), 2, stride_factor=2)
    print(f"stride {h.stride:2d}: {len(h):5d} voxels")

# %% a transposed conv goes back up one level, emitting all eight children per voxel
up = sparse_transposed_conv(h, Parameter("wu", rng.normal(size=(8, 4, 4))))
print(f"after upsampling: stride {up.stride}, {len(up)} voxels (= 8 x {len(h)})")

# %% the whole toy network, with the per-block trace
trace = []
d = forward(build(NetworkConfig.toy(), 0), vox, trace=trace)
for name, stride, ch, n in trace:
    print(f"{name:10s} stride {stride:2d}  channels {ch:3d}  voxels {n}")
print("descriptor", d.value.shape, np.round(d.value[:6], 3))
