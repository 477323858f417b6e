"""The three ablation sweeps: step count, reward signals, transformer size."""

from __future__ import annotations

import copy
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import torch

from .training import (REWARD_MODES, GroundingData, TrainConfig, build_model, evaluate,
                       train_epoch)

log = logging.getLogger(__name__)

ABLATION_KINDS = ("iterations", "rewards", "transformer")
TRANSFORMER_GRID = tuple((layers, heads) for layers in (1, 2, 6) for heads in (1, 4, 8))


@dataclass
class AblationSpec:
    kind: str
    grid: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ABLATION_KINDS:
            raise ValueError(f"ablation kind must be one of {ABLATION_KINDS}")
        if not self.grid:
            self.grid = list({"iterations": (1, 3, 5, 8, 10), "rewards": REWARD_MODES,
                              "transformer": TRANSFORMER_GRID}[self.kind])
        if self.kind == "rewards" and set(self.grid) - set(REWARD_MODES):
            raise ValueError(f"unknown reward modes in {self.grid}")


@contextmanager
def using_policy(model, head):
    saved = model.policy
    model.policy = head
    try:
        yield model
    finally:
        model.policy = saved


def train_reward_variants(data: GroundingData, config: TrainConfig, modes=REWARD_MODES):
    """Train one backbone with a separate policy head per reward mode.

    Requires ``policy_stop_grad``: the heads then never influence the backbone,
    so each head ends up exactly where an individual run with that reward mode
    would have put it. Returns ``(model, {mode: head}, history)``; the model's
    own policy is trained with ``config.reward_mode``.
    """
    if not config.policy_stop_grad:
        raise ValueError("joint reward-variant training needs policy_stop_grad=True")
    model = build_model(config)
    variants = {m: (copy.deepcopy(model.policy), replace(config, reward_mode=m))
                for m in modes if m != config.reward_mode}
    params = list(model.parameters())
    for head, _ in variants.values():
        params += list(head.parameters())
    optimizer = torch.optim.RMSprop(params, lr=config.learning_rate)
    history = [train_epoch(data, model, optimizer, config, e, variants)
               for e in range(config.epochs)]
    heads = {m: h for m, (h, _) in variants.items()}
    heads[config.reward_mode] = model.policy
    return model, {m: heads[m] for m in modes}, history


def fit_quiet(data, config):
    model = build_model(config)
    optimizer = torch.optim.RMSprop(model.parameters(), lr=config.learning_rate)
    for e in range(config.epochs):
        train_epoch(data, model, optimizer, config, e)
    return model


def run_ablation(spec: AblationSpec, train: GroundingData, test: GroundingData,
                 config: TrainConfig) -> list[dict]:
    """Rows of ``{config, accuracy, mean_steps}`` in grid order."""
    rows = []

    def row(name, res):
        rows.append({"config": name, "accuracy": res["accuracy"], "mean_steps": res["mean_steps"]})

    if spec.kind == "iterations":
        model = fit_quiet(train, config)
        for k in spec.grid:
            row(f"fixed_{k}", evaluate(test, model, int(k)))
        row("dynamic", evaluate(test, model, "dynamic", config.t_max))
    elif spec.kind == "rewards":
        model, heads, _ = train_reward_variants(train, config, tuple(spec.grid))
        for mode in spec.grid:
            with using_policy(model, heads[mode]):
                row(f"rewards_{mode}", evaluate(test, model, "dynamic", config.t_max))
    else:
        default = (config.n_layers, config.n_heads)
        dyn_model = None
        for layers, heads in spec.grid:
            model = fit_quiet(train, replace(config, n_layers=int(layers), n_heads=int(heads)))
            row(f"layers_{layers}_heads_{heads}", evaluate(test, model, config.t_max))
            if (layers, heads) == default:
                dyn_model = model
        if dyn_model is None:
            dyn_model = fit_quiet(train, config)
        row(f"dynamic_layers_{default[0]}_heads_{default[1]}",
            evaluate(test, dyn_model, "dynamic", config.t_max))
    return rows


ABLATION_HEADER = "config,accuracy,mean_steps"


def rows_to_csv(rows: list[dict]) -> str:
    lines = [ABLATION_HEADER]
    lines += [f"{r['config']},{r['accuracy']:.6f},{r['mean_steps']:.6f}" for r in rows]
    return "\n".join(lines) + "\n"
