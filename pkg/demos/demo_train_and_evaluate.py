"""
Training a small model and comparing fixed and dynamic step counts
==================================================================

A few epochs on a tiny dataset, just to show the moving parts: the metrics
each epoch reports, evaluation with a fixed number of reasoning steps, and
evaluation where the learned policy decides when to stop. Expect low
accuracy at this size; the acceptance suite runs the full-size experiment.
"""

import torch

from dynground.synth_env import generate_dataset
from dynground.training import GroundingData, TrainConfig, evaluate, fit

torch.set_num_threads(1)
train = GroundingData(generate_dataset(200, seed=1))
test = GroundingData(generate_dataset(100, seed=2))

config = TrainConfig(epochs=3, t_max=4, batch_size=8, learning_rate=3e-4, seed=0)
model, history = fit(train, config)
for m in history:
    print(m)

for k in (1, 2, 4, 6):
    r = evaluate(test, model, k)
    print(f"fixed {k}: accuracy {r['accuracy']:.3f}")

r = evaluate(test, model, "dynamic", config.t_max)
print(f"dynamic: accuracy {r['accuracy']:.3f}, mean steps {r['mean_steps']:.2f}")
for hop, v in r["per_hop"].items():
    print(f"  hop {hop}: accuracy {v['accuracy']:.3f}, mean steps {v['mean_steps']:.2f}")
