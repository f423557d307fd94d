"""
The selective scan
==================

A linear recurrence whose step size, input and readout change per token.
This walks through the two implementations and checks they agree.
"""

import time

import torch

from vimdisp.ssm_core import MambaBlock, selective_scan

torch.manual_seed(0)

# %%
# With a zero decay rate, unit step and unit input/readout vectors the state
# just accumulates the input: the scan is a running sum.
one = torch.ones(3, 1, dtype=torch.float64)
u = torch.tensor([[1.0], [2.0], [3.0]], dtype=torch.float64)
print("running sum:", selective_scan(u, one, torch.zeros(1, 1, dtype=torch.float64), one, one, torch.zeros(1, dtype=torch.float64)).ravel().tolist())

# %%
# The sequential loop is the reference. The parallel form composes
# (decay, input) pairs by recursive doubling, which takes log2(L) vector
# steps instead of L small ones.
L, d, n = 512, 16, 8
u = torch.randn(L, d, dtype=torch.float64)
delta = torch.rand(L, d, dtype=torch.float64) * 0.5 + 0.01
a = -torch.rand(d, n, dtype=torch.float64) - 0.1
b, c = torch.randn(2, L, n, dtype=torch.float64)
d_skip = torch.randn(d, dtype=torch.float64)

for method in ("sequential", "parallel"):
    start = time.perf_counter()
    y = selective_scan(u, delta, a, b, c, d_skip, method=method)
    print(f"{method:>10}: {1e3 * (time.perf_counter() - start):7.2f} ms")
ref = selective_scan(u, delta, a, b, c, d_skip)
par = selective_scan(u, delta, a, b, c, d_skip, method="parallel")
print("max difference:", float((ref - par).abs().max()))

# %%
# Negative decay rates keep the state bounded however long the sequence.
_, h = selective_scan(u.repeat(20, 1), delta.repeat(20, 1), a, b.repeat(20, 1), c.repeat(20, 1), d_skip, method="parallel", return_state=True)
print("state magnitude after 10240 steps:", float(h.abs().max()))

# %%
# A full block wraps the scan with projections, a short causal convolution
# and a gate. At initialisation the per-step decay sits near 0.9.
block = MambaBlock(32, state_dim=8)
with torch.no_grad():
    dt = torch.nn.functional.softplus(block.dt_proj.bias)
    print("mean initial decay:", float(torch.exp(dt[:, None] * block.a).mean()))
    print("block output:", tuple(block(torch.randn(2, 100, 32)).shape))
