"""
Synthetic grounding scenes
==========================

Every instance is a small grid of coloured shapes plus a templated referring
expression whose referent is unique. The hop count is the number of chained
phrases, so it doubles as a complexity label.
"""

import numpy as np

from dynground.synth_env import generate_dataset, make_instance

# One instance per hop count, all from fixed seeds.
for hops in (1, 2, 3):
    inst = make_instance(seed=11, hops=hops)
    print(f"hops={hops}: {' '.join(inst.token_text)}")
    print(f"  target box {inst.gt_box.as_list()}, {len(inst.scene.objects)} objects")

# The image is a float32 array in [0, 1]; objects never share a grid cell.
img = make_instance(seed=11, hops=1).image
print("image", img.shape, img.dtype, "non-background pixels:", int((img.sum(-1) > 0).sum()))

# Longer chains mean longer token sequences.
ds = generate_dataset(600, seed=0)
for h in (1, 2, 3):
    lengths = [len(i.token_text) for i in ds if i.hop_count == h]
    print(f"hop {h}: {len(lengths)} instances, mean length {np.mean(lengths):.2f}")
