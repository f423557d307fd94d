"""Selective state-space primitives: the scan, the Mamba block and its bidirectional wrapper.

Tensors follow the ``(..., L, channels)`` convention: the token axis is the
second to last one and any number of leading batch axes is allowed.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError, ValidationError

__all__ = [
    "selective_scan",
    "MambaBlock",
    "BidirectionalLayer",
    "mamba_block",
    "bidirectional_layer",
]


def _check_scan_inputs(u, delta, a, b, c, d_skip, h0):
    if u.shape != delta.shape:
        raise DimensionError(f"u {tuple(u.shape)} and delta {tuple(delta.shape)} differ")
    if a.dim() != 2 or a.shape[0] != u.shape[-1]:
        raise DimensionError(f"a must be (inner_dim, state_dim) = ({u.shape[-1]}, n), got {tuple(a.shape)}")
    n = a.shape[1]
    expected = (*u.shape[:-1], n)
    for name, t in (("b", b), ("c", c)):
        if tuple(t.shape) != expected:
            raise DimensionError(f"{name} must have shape {expected}, got {tuple(t.shape)}")
    if d_skip.shape != (u.shape[-1],):
        raise DimensionError(f"d_skip must have shape ({u.shape[-1]},), got {tuple(d_skip.shape)}")
    if h0 is not None and tuple(h0.shape[-2:]) != tuple(a.shape):
        raise DimensionError(f"h0 trailing shape must be {tuple(a.shape)}, got {tuple(h0.shape)}")
    if not bool((delta > 0).all()):
        raise ValidationError("delta must be strictly positive")


def _shift(x, k, fill):
    # shift along the token axis (-3 for (..., L, d, n)) by k, padding the front
    pad = torch.full_like(x[..., :k, :, :], fill)
    return torch.cat([pad, x[..., :-k, :, :]], dim=-3)


def selective_scan(u, delta, a, b, c, d_skip, h0=None, method="sequential", return_state=False):
    """Run the discretized selective recurrence.

    For every channel ``i`` and state index ``j``::

        h_t = exp(delta_t * a) * h_{t-1} + (delta_t * u_t) * b_t
        y_t = <c_t, h_t> + d_skip * u_t

    Args:
        u: input signal, ``(..., L, d)``.
        delta: positive step sizes, same shape as ``u``.
        a: state matrix ``(d, n)``, expected non-positive.
        b, c: input-dependent projections, ``(..., L, n)``.
        d_skip: skip coefficients ``(d,)``.
        h0: optional initial state ``(..., d, n)``.
        method: ``"sequential"`` (reference loop) or ``"parallel"``
            (log-depth doubling scan, same result up to rounding).
        return_state: also return the final state ``h_L``.

    Returns:
        ``y`` with the shape of ``u`` (and the final state if requested).
    """
    _check_scan_inputs(u, delta, a, b, c, d_skip, h0)
    if method == "sequential":
        y, h = _scan_sequential(u, delta, a, b, c, h0)
    elif method == "parallel":
        y, h = _scan_parallel(u, delta, a, b, c, h0)
    else:
        raise ValidationError(f"unknown scan method {method!r}")
    y = y + d_skip * u
    return (y, h) if return_state else y


def _scan_sequential(u, delta, a, b, c, h0):
    L = u.shape[-2]
    h = h0
    if h is None:
        h = u.new_zeros((*u.shape[:-2], *a.shape))
    ys = []
    for t in range(L):
        dt = delta[..., t, :].unsqueeze(-1)
        h = torch.exp(dt * a) * h + (dt * u[..., t, :].unsqueeze(-1)) * b[..., t, None, :]
        ys.append((h * c[..., t, None, :]).sum(-1))
    if not ys:
        return u.clone(), h
    return torch.stack(ys, dim=-2), h


def _scan_parallel(u, delta, a, b, c, h0):
    L = u.shape[-2]
    dt = delta.unsqueeze(-1)
    decay = torch.exp(dt * a)
    acc = (dt * u.unsqueeze(-1)) * b.unsqueeze(-2)
    if L == 0:
        h = h0 if h0 is not None else u.new_zeros((*u.shape[:-2], *a.shape))
        return u.clone(), h
    if h0 is not None:
        first = acc[..., :1, :, :] + decay[..., :1, :, :] * h0.unsqueeze(-3)
        acc = torch.cat([first, acc[..., 1:, :, :]], dim=-3)
    k = 1
    while k < L:
        acc = acc + decay * _shift(acc, k, 0.0)
        if 2 * k < L:
            decay = decay * _shift(decay, k, 1.0)
        k *= 2
    y = (acc * c.unsqueeze(-2)).sum(-1)
    return y, acc[..., -1, :, :]


class MambaBlock(nn.Module):
    """Gated selective-SSM block.

    Wiring: input projection into a signal and a gate branch, depthwise causal
    convolution and SiLU on the signal, selective scan with input-dependent
    ``delta``/``B``/``C``, SiLU gating, output projection.
    """

    def __init__(
        self,
        model_dim,
        state_dim=8,
        expand=2,
        conv_width=4,
        dt_rank=None,
        bias=False,
        conv_bias=True,
        dt_min=1e-3,
        dt_max=1e-1,
        init_decay=0.9,
        scan="parallel",
    ):
        super().__init__()
        if model_dim <= 0 or state_dim <= 0 or expand <= 0 or conv_width <= 0:
            raise ValidationError("block dimensions must be positive")
        self.model_dim = model_dim
        self.state_dim = state_dim
        self.inner_dim = expand * model_dim
        self.conv_width = conv_width
        self.dt_rank = dt_rank or max(1, math.ceil(model_dim / 16))
        self.scan = scan

        d = self.inner_dim
        self.in_proj = nn.Linear(model_dim, 2 * d, bias=bias)
        self.conv1d = nn.Conv1d(d, d, conv_width, groups=d, padding=conv_width - 1, bias=conv_bias)
        self.x_proj = nn.Linear(d, self.dt_rank + 2 * state_dim, bias=False)
        self.dt_proj = nn.Linear(self.dt_rank, d, bias=True)
        self.out_proj = nn.Linear(d, model_dim, bias=bias)

        # log-uniform step sizes; A chosen so that exp(dt * A) averages init_decay
        dt = torch.exp(torch.rand(d) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        with torch.no_grad():
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))  # softplus^-1
            nn.init.uniform_(self.dt_proj.weight, -self.dt_rank**-0.5, self.dt_rank**-0.5)
        rate = -math.log(init_decay) / dt
        spread = torch.linspace(0.5, 1.5, state_dim)
        self.a_log = nn.Parameter(torch.log(rate[:, None] * spread[None, :]))
        self.d_skip = nn.Parameter(torch.ones(d))

    @property
    def a(self):
        return -torch.exp(self.a_log)

    def ssm_inputs(self, tokens):
        """Return ``(u, delta, b, c, gate)`` for a ``(..., L, model_dim)`` input."""
        if tokens.shape[-1] != self.model_dim:
            raise DimensionError(f"expected token dim {self.model_dim}, got {tokens.shape[-1]}")
        lead = tokens.shape[:-2]
        L = tokens.shape[-2]
        flat = tokens.reshape(-1, L, self.model_dim)
        x, gate = self.in_proj(flat).chunk(2, dim=-1)
        x = self.conv1d(x.transpose(1, 2))[..., :L].transpose(1, 2)
        u = F.silu(x)
        dt_low, b, c = self.x_proj(u).split([self.dt_rank, self.state_dim, self.state_dim], dim=-1)
        delta = F.softplus(self.dt_proj(dt_low))
        out = (u, delta, b, c, gate)
        return tuple(t.reshape(*lead, L, t.shape[-1]) for t in out)

    def forward(self, tokens):
        u, delta, b, c, gate = self.ssm_inputs(tokens)
        y = selective_scan(u, delta, self.a, b, c, self.d_skip, method=self.scan)
        return self.out_proj(y * F.silu(gate))


class BidirectionalLayer(nn.Module):
    """Sum of a forward-order and a reversed-order Mamba block.

    With ``tied=True`` both directions share one block.
    """

    def __init__(self, model_dim, tied=False, **block_kwargs):
        super().__init__()
        self.model_dim = model_dim
        self.fwd = MambaBlock(model_dim, **block_kwargs)
        self.bwd = self.fwd if tied else MambaBlock(model_dim, **block_kwargs)

    def forward(self, tokens):
        return bidirectional_layer(tokens, self.fwd, self.bwd)


def mamba_block(tokens, block):
    """Functional form of :class:`MambaBlock` (``block`` carries the parameters)."""
    return block(tokens)


def bidirectional_layer(tokens, fwd, bwd, merge="sum"):
    if merge != "sum":
        raise ValidationError(f"unsupported merge {merge!r}")
    if fwd.model_dim != bwd.model_dim:
        raise DimensionError("forward and backward blocks disagree on model_dim")
    return fwd(tokens) + bwd(tokens.flip(-2)).flip(-2)
