"""Command-line entry point: ``dynground {gen,train,eval,ablate,trace}``.

Failures print a single ``error: <kind>: <message>`` line to stderr and exit
with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .ablation import AblationSpec, rows_to_csv, run_ablation
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, apply_overrides, load_config
from .synth_env import (NoUniqueReferent, generate_dataset, load_jsonl, make_instance,
                        parse_hops_mix, save_jsonl)
from .training import GroundingData, TrainConfig, build_model, evaluate, fit, make_optimizer


def _train_config(args) -> TrainConfig:
    config = load_config(args.config) if args.config else TrainConfig()
    return apply_overrides(config, args.set or [])


def _load_data(path) -> GroundingData:
    return GroundingData(load_jsonl(path))


def cmd_gen(args):
    mix = parse_hops_mix(args.hops_mix) if args.hops_mix else None
    data = generate_dataset(args.n, args.seed, mix)
    save_jsonl(data, args.out)
    counts = {h: sum(i.hop_count == h for i in data) for h in (1, 2, 3)}
    print(json.dumps({"out": str(args.out), "n": len(data), "hops": counts}))


def cmd_train(args):
    if args.resume:
        model, config, optimizer, start = load_checkpoint(args.resume)
        if args.epochs is not None:
            config = apply_overrides(config, [f"epochs={args.epochs}"])
    else:
        config = _train_config(args)
        if args.epochs is not None:
            config = apply_overrides(config, [f"epochs={args.epochs}"])
        model, optimizer, start = build_model(config), None, 0
        optimizer = make_optimizer(model, config)
    data = _load_data(args.data)
    torch.set_num_threads(args.threads)
    fit(data, config, model, optimizer, start_epoch=start, csv_path=args.metrics,
        checkpoint_path=args.checkpoint)
    print(json.dumps({"checkpoint": str(args.checkpoint), "epochs": config.epochs}))


def _mode(text: str):
    return "dynamic" if text == "dynamic" else int(text)


def cmd_eval(args):
    model, config, _, _ = load_checkpoint(args.checkpoint)
    data = _load_data(args.data)
    res = evaluate(data, model, _mode(args.mode), args.max_steps or config.t_max)
    out = {"mode": args.mode, "accuracy": res["accuracy"], "mean_steps": res["mean_steps"],
           "per_hop": {str(h): v for h, v in res["per_hop"].items()}}
    print(json.dumps(out, indent=None if args.compact else 2))


def cmd_ablate(args):
    config = _train_config(args)
    spec = AblationSpec(args.kind, [_grid_item(args.kind, g) for g in args.grid or []])
    torch.set_num_threads(args.threads)
    rows = run_ablation(spec, _load_data(args.train), _load_data(args.test), config)
    text = rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def _grid_item(kind, text):
    if kind == "iterations":
        return int(text)
    if kind == "transformer":
        layers, heads = text.split("x")
        return int(layers), int(heads)
    return text


def trace_dump(model, instance, max_steps: int, mode="dynamic") -> dict:
    """Per-step record of one reasoning run on ``instance``."""
    data = GroundingData([instance])
    tr = model.reason(data.images, data.tokens, mode, max_steps, data.gt_boxes)
    words = instance.token_text
    gt = data.gt_boxes
    from .grounding_head import iou_tensor

    steps = []
    for t in range(len(tr)):
        box = tr.step_boxes[t]
        steps.append({
            "step": t + 1,
            "attention": {f"{i}:{w}": round(float(tr.weights[t][0, i]), 6)
                          for i, w in enumerate(words)},
            "probs": None if tr.probs[t] is None else [float(p) for p in tr.probs[t][0]],
            "action": "continue" if int(tr.actions[t][0]) == 1 else "stop",
            "box": [float(v) for v in box[0]],
            "iou": float(iou_tensor(box, gt.to(box.dtype))[0]),
        })
    return {"seed": instance.seed, "expression": " ".join(words), "hop_count": instance.hop_count,
            "gt_box": instance.gt_box.as_list(), "executed_steps": int(tr.executed_steps[0]),
            "final_box": [float(v) for v in tr.final_box[0]], "final_iou": float(tr.final_iou[0]),
            "steps": steps}


def _format_trace(d: dict) -> str:
    lines = [f"expression: {d['expression']}  (hops {d['hop_count']}, seed {d['seed']})",
             f"ground truth: {d['gt_box']}"]
    for s in d["steps"]:
        top = sorted(s["attention"].items(), key=lambda kv: -kv[1])[:3]
        probs = "-" if s["probs"] is None else f"stop {s['probs'][0]:.3f} / continue {s['probs'][1]:.3f}"
        lines.append(f"step {s['step']}: {probs} -> {s['action']}; iou {s['iou']:.3f}; "
                     f"top words " + ", ".join(f"{k.split(':', 1)[1]}={v:.2f}" for k, v in top))
    lines.append(f"executed {d['executed_steps']} step(s), final iou {d['final_iou']:.3f}")
    return "\n".join(lines)


def cmd_trace(args):
    model, config, _, _ = load_checkpoint(args.checkpoint)
    if args.data:
        instance = load_jsonl(args.data)[args.index]
    else:
        instance = make_instance(args.seed, args.hops)
    d = trace_dump(model, instance, args.max_steps or config.t_max, _mode(args.mode))
    if args.json:
        Path(args.json).write_text(json.dumps(d, indent=2) + "\n")
    print(_format_trace(d))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynground", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset as JSONL")
    g.add_argument("--n", type=int, required=True, help="number of instances")
    g.add_argument("--seed", type=int, default=0, help="dataset seed (default 0)")
    g.add_argument("--hops-mix", help="e.g. 1:0.5,2:0.3,3:0.2 (default uniform)")
    g.add_argument("--out", required=True, help="output .jsonl path")
    g.set_defaults(func=cmd_gen)

    def config_flags(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("--threads", type=int, default=1, help="torch CPU threads (default 1)")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True, help="training .jsonl")
    config_flags(t)
    t.add_argument("--epochs", type=int, help="total epochs (overrides config)")
    t.add_argument("--checkpoint", required=True, help="checkpoint written after every epoch")
    t.add_argument("--metrics", help="per-epoch metrics CSV (appended on resume)")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", default="dynamic", help="'dynamic' or a fixed step count")
    e.add_argument("--max-steps", type=int, help="step cap in dynamic mode (default t_max)")
    e.add_argument("--compact", action="store_true", help="single-line JSON")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation sweep and emit a CSV table")
    a.add_argument("--kind", required=True, choices=("iterations", "rewards", "transformer"))
    a.add_argument("--train", required=True)
    a.add_argument("--test", required=True)
    a.add_argument("--grid", nargs="*", help="grid points: ints, reward modes, or LxH pairs")
    a.add_argument("--out", help="CSV path")
    config_flags(a)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("trace", help="dump one reasoning run step by step")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--seed", type=int, default=0, help="instance seed (default 0)")
    r.add_argument("--hops", type=int, default=1, help="hop count for --seed (default 1)")
    r.add_argument("--data", help="take the instance from this .jsonl instead")
    r.add_argument("--index", type=int, default=0, help="row in --data (default 0)")
    r.add_argument("--mode", default="dynamic", help="'dynamic' or a fixed step count")
    r.add_argument("--max-steps", type=int)
    r.add_argument("--json", help="also write the dump as JSON here")
    r.set_defaults(func=cmd_trace)
    return p


_ERRORS = ((FileNotFoundError, "file_not_found"), (CheckpointError, "checkpoint"),
           (ConfigError, "config"), (NoUniqueReferent, "generation"),
           (FloatingPointError, "non_finite"), (ValueError, "invalid_value"),
           (IndexError, "invalid_value"), (OSError, "io"))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        args.func(args)
    except Exception as exc:
        for cls, kind in _ERRORS:
            if isinstance(exc, cls):
                msg = str(exc).replace("\n", " ")
                print(f"error: {kind}: {msg}", file=sys.stderr)
                return 1
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
