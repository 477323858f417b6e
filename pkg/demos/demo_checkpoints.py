"""
Checkpoints and resuming
========================

Checkpoints hold the parameters, the optimizer state and the RNG state, so
a resumed run continues exactly where the interrupted one stopped.
"""

import tempfile
from pathlib import Path

import torch

from dynground.checkpoint import load_checkpoint
from dynground.synth_env import generate_dataset
from dynground.training import GroundingData, TrainConfig, fit

torch.set_num_threads(1)
data = GroundingData(generate_dataset(48, seed=3))
config = TrainConfig(epochs=4, t_max=2, batch_size=8, dim=32, feedforward_dim=64)

with tempfile.TemporaryDirectory() as d:
    d = Path(d)
    fit(data, config, csv_path=d / "straight.csv")

    fit(data, config, stop_epoch=2, csv_path=d / "resumed.csv", checkpoint_path=d / "half.ck")
    model, cfg, optimizer, epoch = load_checkpoint(d / "half.ck")
    print("resuming after epoch", epoch)
    fit(data, cfg, model, optimizer, start_epoch=epoch, csv_path=d / "resumed.csv")

    a, b = (d / "straight.csv").read_text(), (d / "resumed.csv").read_text()
    print(a)
    print("identical metrics:", a == b)
