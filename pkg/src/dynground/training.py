"""End-to-end training and evaluation.

Training rollouts always run ``t_max`` steps. The box loss supervises the
decoded box after every step (so the policy may stop anywhere at inference);
the policy head is trained with the step-weighted cross-entropy against
gate-derived labels.

Step weights can be negative, and a negatively weighted cross-entropy keeps
pushing its logits apart without bound. By default the policy therefore sees
detached features, so its loss never reaches the encoders or the fusion
transformer (``policy_stop_grad``).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np
import torch

from . import dynamic_reward as dr
from .grounding_head import box_loss, decode_tensor, encode_gt, iou_tensor
from .model import DEFAULT_ANCHORS, DynamicGroundingNet, ModelConfig
from .synth_env import GroundingInstance

log = logging.getLogger(__name__)

REWARD_MODES = ("both", "ultimate", "immediate", "none")


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    lr_halving_period_epochs: int = 10
    batch_size: int = 8
    epochs: int = 20
    t_max: int = 6
    gamma: float = 0.9
    lambda_box: float = 1.0
    lambda_policy: float = 0.5
    grad_clip: float = 5.0
    seed: int = 0
    reward_mode: str = "both"
    # "gate": label = continue iff the step's gate is open; "self": the policy's own argmax
    label_mode: str = "gate"
    # which decoded box the ultimate reward scores: the rollout's last step or each step
    ultimate_from: str = "final"
    # "all": box loss averaged over every step; "final": last step only
    box_loss_steps: str = "all"
    # cut the policy loss off from the encoders/fusion (see module docstring)
    policy_stop_grad: bool = True
    # model
    dim: int = 64
    n_layers: int = 1
    n_heads: int = 4
    feedforward_dim: int = 128

    def __post_init__(self):
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"reward_mode must be one of {REWARD_MODES}")
        if self.label_mode not in ("gate", "self"):
            raise ValueError("label_mode must be 'gate' or 'self'")
        if self.ultimate_from not in ("final", "step"):
            raise ValueError("ultimate_from must be 'final' or 'step'")
        if self.box_loss_steps not in ("all", "final"):
            raise ValueError("box_loss_steps must be 'all' or 'final'")
        for name in ("lr_halving_period_epochs", "batch_size", "t_max", "gamma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        # a zero learning rate is allowed (a frozen pass still reports metrics)
        for name in ("learning_rate", "epochs", "lambda_box", "lambda_policy"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def model_config(self) -> ModelConfig:
        return ModelConfig(dim=self.dim, n_layers=self.n_layers, n_heads=self.n_heads,
                           feedforward_dim=self.feedforward_dim)

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * 0.5 ** (epoch // self.lr_halving_period_epochs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class GroundingData:
    """Instances stacked into tensors, with box-regression targets precomputed."""

    def __init__(self, instances: Sequence[GroundingInstance], grid: int = 8, image_px: int = 64):
        if not instances:
            raise ValueError("dataset is empty")
        self.instances = list(instances)
        self.images = torch.from_numpy(np.stack([i.image for i in instances]))
        self.tokens = torch.tensor([i.tokens for i in instances], dtype=torch.long)
        self.gt_boxes = torch.tensor([i.gt_box.as_list() for i in instances], dtype=torch.float32)
        self.hops = torch.tensor([i.hop_count for i in instances], dtype=torch.long)
        self.seeds = [i.seed for i in instances]
        a = len(DEFAULT_ANCHORS)
        idx, offs = [], []
        for inst in instances:
            (r, c), ai, t = encode_gt(inst.gt_box, DEFAULT_ANCHORS, grid, image_px)
            idx.append((r * grid + c) * a + ai)
            offs.append(t)
        self.target_index = torch.tensor(idx, dtype=torch.long)
        self.target_offsets = torch.tensor(np.array(offs), dtype=torch.float32)

    def __len__(self):
        return len(self.instances)

    def batches(self, batch_size: int, order: Optional[np.ndarray] = None):
        order = np.arange(len(self)) if order is None else order
        for s in range(0, len(order), batch_size):
            yield torch.from_numpy(order[s:s + batch_size])


def build_model(config: TrainConfig) -> DynamicGroundingNet:
    torch.manual_seed(config.seed)
    return DynamicGroundingNet(config.model_config())


def make_optimizer(model, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.RMSprop(model.parameters(), lr=config.learning_rate)


def step_rewards(ious: torch.Tensor, scores: torch.Tensor, config: TrainConfig) -> torch.Tensor:
    """Total reward per (step, element) under ``config.reward_mode``."""
    if config.ultimate_from == "final":
        ious = ious[-1:].expand_as(ious)
    r_ult = torch.where(ious >= 0.5, 1, -1)
    r_imm = dr.immediate_rewards(scores)
    if config.reward_mode == "both":
        return r_ult + r_imm
    if config.reward_mode == "ultimate":
        return r_ult
    if config.reward_mode == "immediate":
        return r_imm
    return torch.zeros_like(r_ult)


def first_stop(actions: torch.Tensor) -> torch.Tensor:
    """Executed steps (1-based) when stopping at the first stop action; (T,B) -> (B,)."""
    t = actions.shape[0]
    stopped = actions == dr.STOP
    steps = torch.where(stopped.any(0), stopped.float().argmax(0) + 1, torch.full_like(actions[0], t))
    return steps.long()


def rollout_ious(model, offsets, gt) -> torch.Tensor:
    return torch.stack([iou_tensor(decode_tensor(o, model.anchors, model.config.image_px), gt)
                        for o in offsets])


def policy_terms(head, out: dict, ious: torch.Tensor, config: TrainConfig):
    """Step-weighted policy loss (mean over the batch) and the probabilities it used."""
    pooled = out["pooled"]
    log_probs = head.log_probs_from_pooled(pooled, out["cls"].expand_as(pooled))
    probs = log_probs.exp()
    if config.reward_mode == "none" or config.lambda_policy == 0:
        return probs.sum() * 0.0, probs
    with torch.no_grad():
        rewards = step_rewards(ious, out["scores"].detach(), config)
        if config.label_mode == "gate":
            labels = (rewards > 0).long()
        else:
            labels = dr.select_action(probs)
        weights = dr.step_weights(rewards.double(), config.gamma).weights.float()
    return dr.policy_loss(probs, labels, weights, log_probs=log_probs) / probs.shape[1], probs


def batch_loss(model: DynamicGroundingNet, data: GroundingData, idx: torch.Tensor,
               config: TrainConfig, variants: Optional[dict] = None):
    """Combined loss for one batch.

    ``variants`` maps a name to ``(policy_head, config)``; each extra head is
    trained on the same (detached) rollout under its own reward settings.
    Returns ``(loss, extra_loss, final_iou, steps)``; the last two follow the
    main policy's first stop action.
    """
    out = model.rollout(data.images[idx], data.tokens[idx], config.t_max,
                        detach_policy_input=config.policy_stop_grad)
    offsets = out["offsets"]
    per_step = torch.stack([box_loss(o, data.target_index[idx], data.target_offsets[idx])
                            for o in offsets])
    l_box = per_step.mean() if config.box_loss_steps == "all" else per_step[-1].mean()
    with torch.no_grad():
        ious = rollout_ious(model, offsets, data.gt_boxes[idx])
    l_pol, probs = policy_terms(model.policy, out, ious, config)
    loss = config.lambda_box * l_box + config.lambda_policy * l_pol
    extra = sum((vcfg.lambda_policy * policy_terms(head, out, ious, vcfg)[0]
                 for head, vcfg in (variants or {}).values()), torch.zeros(()))
    with torch.no_grad():
        steps = first_stop(dr.select_action(probs))
        final_iou = ious.gather(0, (steps - 1)[None]).squeeze(0)
    return loss, extra, final_iou, steps


def _clip_groups(model, variants, config):
    if not config.policy_stop_grad:
        params = list(model.parameters())
        for head, _ in (variants or {}).values():
            params += list(head.parameters())
        torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
        return
    # isolated heads are clipped on their own so they cannot rescale backbone updates
    policy_ids = {id(p) for p in model.policy.parameters()}
    torch.nn.utils.clip_grad_norm_([p for p in model.parameters() if id(p) not in policy_ids],
                                   config.grad_clip)
    torch.nn.utils.clip_grad_norm_(list(model.policy.parameters()), config.grad_clip)
    for head, _ in (variants or {}).values():
        torch.nn.utils.clip_grad_norm_(list(head.parameters()), config.grad_clip)


def train_epoch(data: GroundingData, model: DynamicGroundingNet, optimizer,
                config: TrainConfig, epoch: int, variants: Optional[dict] = None) -> dict:
    """One shuffled pass; the order depends only on ``(seed, epoch)``.

    ``optimizer`` must cover the parameters of any ``variants`` heads too.
    """
    lr = config.lr_at(epoch)
    for g in optimizer.param_groups:
        g["lr"] = lr
    model.train()
    order = np.random.default_rng([config.seed, epoch]).permutation(len(data))
    total, correct, steps_sum, n = 0.0, 0, 0, 0
    for i, idx in enumerate(data.batches(config.batch_size, order)):
        loss, extra, final_iou, steps = batch_loss(model, data, idx, config, variants)
        if not torch.isfinite(loss + extra):
            raise FloatingPointError(
                f"non-finite loss at epoch {epoch}, batch {i}; instance seeds "
                f"{[data.seeds[j] for j in idx.tolist()]}")
        optimizer.zero_grad()
        (loss + extra).backward()
        _clip_groups(model, variants, config)
        optimizer.step()
        total += loss.item() * len(idx)
        correct += int((final_iou >= 0.5).sum())
        steps_sum += int(steps.sum())
        n += len(idx)
    return {"epoch": epoch + 1, "loss": total / n, "accuracy": correct / n,
            "mean_steps": steps_sum / n, "lr": lr}


@torch.no_grad()
def evaluate(data: GroundingData, model: DynamicGroundingNet, mode: str | int = "dynamic",
             max_steps: int = 6, batch_size: int = 100) -> dict:
    """Accuracy at IoU >= 0.5 and mean executed steps, overall and per hop count.

    ``mode`` is ``"dynamic"`` or a fixed step count ``k``.
    """
    model.eval()
    ious, steps, boxes = [], [], []
    for idx in data.batches(batch_size):
        trace = model.reason(data.images[idx], data.tokens[idx], mode, max_steps, data.gt_boxes[idx])
        ious.append(trace.final_iou)
        steps.append(trace.executed_steps)
        boxes.append(trace.final_box)
    ious, steps = torch.cat(ious), torch.cat(steps).double()
    correct = (ious >= 0.5).double()
    per_hop = {}
    for h in sorted(set(data.hops.tolist())):
        sel = data.hops == h
        per_hop[h] = {"accuracy": float(correct[sel].mean()), "mean_steps": float(steps[sel].mean()),
                      "n": int(sel.sum())}
    return {"accuracy": float(correct.mean()), "mean_steps": float(steps.mean()),
            "per_hop": per_hop, "ious": ious, "steps": steps, "boxes": torch.cat(boxes)}


def format_metrics_row(m: dict) -> str:
    return f"{m['epoch']},{m['loss']:.6f},{m['accuracy']:.6f},{m['mean_steps']:.6f},{m['lr']:.8g}"


METRICS_HEADER = "epoch,loss,accuracy,mean_steps,lr"


def fit(data: GroundingData, config: TrainConfig, model: DynamicGroundingNet | None = None,
        optimizer=None, start_epoch: int = 0, csv_path=None, checkpoint_path=None,
        stop_epoch: int | None = None) -> tuple[DynamicGroundingNet, list[dict]]:
    """Train from ``start_epoch`` up to ``stop_epoch`` (default ``config.epochs``).

    Appends one CSV row and rewrites the checkpoint after every epoch.
    """
    from .checkpoint import save_checkpoint

    model = model or build_model(config)
    optimizer = optimizer or make_optimizer(model, config)
    stop_epoch = config.epochs if stop_epoch is None else stop_epoch
    if csv_path is not None and start_epoch == 0:
        with open(csv_path, "w") as f:
            f.write(METRICS_HEADER + "\n")
    history = []
    for epoch in range(start_epoch, stop_epoch):
        m = train_epoch(data, model, optimizer, config, epoch)
        log.info("epoch %d loss %.4f acc %.3f steps %.2f", m["epoch"], m["loss"],
                 m["accuracy"], m["mean_steps"])
        history.append(m)
        if csv_path is not None:
            with open(csv_path, "a") as f:
                f.write(format_metrics_row(m) + "\n")
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, config, optimizer, epoch + 1)
    if checkpoint_path is not None and start_epoch >= stop_epoch:
        save_checkpoint(checkpoint_path, model, config, optimizer, start_epoch)
    return model, history


