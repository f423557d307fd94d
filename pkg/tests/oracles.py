"""Slow, loop-based reference computations used only by the tests."""

import math
import struct
import zlib

import numpy as np


def naive_scan(u, delta, a, b, c, d_skip, h0=None):
    """Per-timestep, per-channel, per-state recurrence with Python floats."""
    u, delta, a, b, c, d_skip = (np.asarray(x, dtype=np.float64) for x in (u, delta, a, b, c, d_skip))
    L, d = u.shape
    n = a.shape[1]
    h = np.zeros((d, n)) if h0 is None else np.array(h0, dtype=np.float64)
    y = np.zeros((L, d))
    for t in range(L):
        for i in range(d):
            acc = 0.0
            for j in range(n):
                h[i, j] = math.exp(delta[t, i] * a[i, j]) * h[i, j] + delta[t, i] * u[t, i] * b[t, j]
                acc += c[t, j] * h[i, j]
            y[t, i] = acc + d_skip[i] * u[t, i]
    return y


def _silu(x):
    return x / (1.0 + math.exp(-x))


def _softplus(x):
    return math.log1p(math.exp(x)) if x < 30 else x


def naive_mamba_block(tokens, block):
    """Token-by-token evaluation of a :class:`MambaBlock` from its raw weights."""
    g = {k: v.detach().double().numpy() for k, v in block.state_dict().items()}
    x = np.asarray(tokens, dtype=np.float64)
    L, _ = x.shape
    d = block.inner_dim
    n = block.state_dim
    r = block.dt_rank
    k = block.conv_width
    w_in = g["in_proj.weight"]
    b_in = g.get("in_proj.bias", np.zeros(2 * d))
    proj = np.array([[sum(w_in[o, m] * x[t, m] for m in range(x.shape[1])) + b_in[o] for o in range(2 * d)] for t in range(L)])
    sig, gate = proj[:, :d], proj[:, d:]
    conv_w = g["conv1d.weight"][:, 0, :]
    conv_b = g.get("conv1d.bias", np.zeros(d))
    u = np.zeros((L, d))
    for t in range(L):
        for i in range(d):
            acc = conv_b[i]
            for j in range(k):
                src = t - (k - 1) + j
                if src >= 0:
                    acc += conv_w[i, j] * sig[src, i]
            u[t, i] = _silu(acc)
    xp = g["x_proj.weight"]
    dbc = np.array([[sum(xp[o, i] * u[t, i] for i in range(d)) for o in range(r + 2 * n)] for t in range(L)])
    dt_low, b, c = dbc[:, :r], dbc[:, r : r + n], dbc[:, r + n :]
    wdt, bdt = g["dt_proj.weight"], g["dt_proj.bias"]
    delta = np.array([[_softplus(sum(wdt[i, q] * dt_low[t, q] for q in range(r)) + bdt[i]) for i in range(d)] for t in range(L)])
    a = -np.exp(g["a_log"])
    y = naive_scan(u, delta, a, b, c, g["d_skip"])
    gated = np.array([[y[t, i] * _silu(gate[t, i]) for i in range(d)] for t in range(L)])
    w_out = g["out_proj.weight"]
    b_out = g.get("out_proj.bias", np.zeros(w_out.shape[0]))
    return np.array([[sum(w_out[o, i] * gated[t, i] for i in range(d)) + b_out[o] for o in range(w_out.shape[0])] for t in range(L)])


def central_difference(f, x, eps=1e-6):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        hi = f(x)
        x[idx] = old - eps
        lo = f(x)
        x[idx] = old
        grad[idx] = (hi - lo) / (2 * eps)
    return grad


def windowed_soft_argmax(scores, candidates, init, radius):
    """One token at a time: softmax over candidates within ``radius`` steps of ``init``."""
    scores = np.asarray(scores, dtype=np.float64)
    cand = np.asarray(candidates, dtype=np.float64)
    step = cand[1] - cand[0]
    out = np.zeros(scores.shape[:-1])
    for idx in np.ndindex(*scores.shape[:-1]):
        centre = min(max(init[idx], cand[0]), cand[-1])
        keep = [i for i in range(len(cand)) if abs(cand[i] - centre) <= radius * step + 1e-6]
        m = max(scores[idx][i] for i in keep)
        w = [math.exp(scores[idx][i] - m) for i in keep]
        out[idx] = sum(wi * cand[i] for wi, i in zip(w, keep)) / sum(w)
    return out


def four_corner_sample(grid, x, y):
    """Bilinear value of a ``(H, W)`` grid written out with explicit corner weights."""
    H, W = grid.shape
    x = min(max(x, 0.0), W - 1.0)
    y = min(max(y, 0.0), H - 1.0)
    x0 = min(int(math.floor(x)), W - 2)
    y0 = min(int(math.floor(y)), H - 2)
    fx, fy = x - x0, y - y0
    return (
        grid[y0, x0] * (1 - fx) * (1 - fy)
        + grid[y0, x0 + 1] * fx * (1 - fy)
        + grid[y0 + 1, x0] * (1 - fx) * fy
        + grid[y0 + 1, x0 + 1] * fx * fy
    )


def _chunk(kind, data):
    return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", zlib.crc32(kind + data) & 0xFFFFFFFF)


def golden_png16(rows):
    """16-bit grayscale PNG assembled byte by byte (filter type 0 on every row)."""
    h, w = len(rows), len(rows[0])
    raw = b"".join(b"\x00" + b"".join(struct.pack(">H", v) for v in row) for row in rows)
    return (
        b"\x89PNG\r\n\x1a\n"
        + _chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 16, 0, 0, 0, 0))
        + _chunk(b"IDAT", zlib.compress(raw))
        + _chunk(b"IEND", b"")
    )
