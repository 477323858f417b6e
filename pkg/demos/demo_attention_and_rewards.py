"""
Word attention, coverage history and the reward signals
=======================================================

A walk through one reasoning rollout of an untrained network: which words
each step attends to, how the coverage history shrinks, and what the two
rewards and the discounted step weights look like for that rollout.
"""

import torch

from dynground import dynamic_reward as dr
from dynground.grounding_head import iou_tensor
from dynground.model import DynamicGroundingNet
from dynground.synth_env import make_instance
from dynground.training import GroundingData

torch.manual_seed(0)
model = DynamicGroundingNet().eval()
inst = make_instance(seed=4, hops=3)
data = GroundingData([inst])
print(" ".join(inst.token_text))

# Fixed six-step rollout. Attention weights per step sum to one over real tokens.
trace = model.reason(data.images, data.tokens, mode=6, gt_boxes=data.gt_boxes)
n = len(inst.token_text)
for t, (w, h) in enumerate(zip(trace.weights, trace.histories), 1):
    top = w[0, :n].argsort(descending=True)[:3].tolist()
    print(f"step {t}: top words {[inst.token_text[i] for i in top]}, "
          f"history mean {h[0, :n].mean():.3f}")

# Ultimate reward: the final box against ground truth at IoU 0.5.
# Immediate reward: did the word/visual relevancy score go up?
with torch.no_grad():
    out = model.rollout(data.images, data.tokens, 6)
ious = torch.stack([iou_tensor(b, data.gt_boxes) for b in trace.step_boxes])[:, 0]
r_ult = dr.ultimate_reward(float(ious[-1]))
r_imm = dr.immediate_rewards(out["scores"])[:, 0]
totals = r_imm + r_ult
print("ultimate", r_ult, "immediate", r_imm.tolist())
print("gate", [bool(r > 0) for r in totals.tolist()])
print("step weights", [round(x, 3) for x in dr.step_weights(totals.double()).weights.tolist()])

# The hand example from the discount definition.
print("weights for r=(2,2,2):", dr.step_weights([2, 2, 2]).weights.tolist())
