"""
Matching and camera geometry
============================

Disparity candidates, the softmax-weighted estimate and the homography that
relates a depth plane to a horizontal shift.
"""

import numpy as np
import torch

from vimdisp import matching

# %%
# A 192 px search range at 1/8 resolution gives 25 candidates.
cand = matching.build_candidates(192, 8, 1)
print("candidates:", cand.tolist())

# %%
# The estimate is the expectation of the candidates under the softmax of the
# correlation scores, so it can land between candidates.
scores = torch.tensor([0.0, np.log(2.0), 0.0], dtype=torch.float64)
print("soft estimate over {0, 1, 4}:", float(matching.soft_regress(scores, torch.tensor([0.0, 1.0, 4.0], dtype=torch.float64))))

# %%
# Two features shifted by 3 columns: the global match recovers the shift.
g = torch.Generator().manual_seed(0)
right = torch.randn(1, 32, 4, 24, generator=g)
right = right / right.norm(dim=1, keepdim=True)
left = torch.roll(right, 3, dims=-1)
est = matching.global_match(8 * left, 8 * right, matching.build_candidates(64, 8, 1))
print("estimated shift (columns 3+):", est[0, 0, :, 3:].mean().item())

# %%
# For a rectified pair a plane at depth z projects with a pure horizontal
# shift of f * b / z.
f, b = 720.0, 0.54
cam_l, cam_r = matching.rectified_pair(f, b, cx=620, cy=180)
for z in (5.0, 10.0, 40.0):
    xy, _ = matching.homography_project(np.array([[500.0, 200.0]]), z, cam_l, cam_r)
    print(f"depth {z:5.1f} m -> shift {500.0 - xy[0, 0]:7.3f} px (f*b/z = {f * b / z:7.3f})")
