"""Correlation matching, soft-argmax regression, refinement and convex upsampling.

Feature maps are ``(B, C, H, W)``; disparities are ``(B, 1, H, W)`` in pixels
of the map they live on. Disparity convention: left pixel ``x`` matches right
pixel ``x - d``.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError, ValidationError

# score given to correspondences that fall outside the other view
OUT_OF_VIEW = -1e4


def build_candidates(d_max, feature_stride=8, step=1.0, dtype=torch.float32):
    """Disparity candidates ``0, step, 2*step, ... <= d_max / feature_stride`` at feature scale."""
    if d_max <= 0 or step <= 0 or feature_stride <= 0:
        raise ValidationError("d_max, feature_stride and step must be positive")
    top = d_max / feature_stride
    count = int(math.floor(top / step + 1e-9)) + 1
    return torch.arange(count, dtype=torch.float64).mul(step).to(dtype)


def correlate(f1, f2):
    """Scaled dot product ``<f1, f2> / sqrt(D)`` over the last axis."""
    if f1.shape[-1] != f2.shape[-1]:
        raise DimensionError(f"feature dims differ: {f1.shape[-1]} vs {f2.shape[-1]}")
    return (f1 * f2).sum(-1) / math.sqrt(f1.shape[-1])


def matching_distribution(scores):
    """Row-stochastic matching distribution over the candidate axis (last)."""
    return torch.softmax(scores, dim=-1)


def soft_regress(scores, candidates):
    """Expected candidate under ``softmax(scores)``; candidate axis is last."""
    if scores.shape[-1] != candidates.shape[-1]:
        raise DimensionError(f"{scores.shape[-1]} scores for {candidates.shape[-1]} candidates")
    return (matching_distribution(scores) * candidates.to(scores)).sum(-1)


def windowed_regress(scores, candidates, init, radius):
    """Soft-argmax restricted to candidates within ``radius`` steps of ``init``.

    ``init`` has the shape of ``scores`` without the candidate axis.
    """
    if radius <= 0:
        raise ValidationError(f"radius must be positive, got {radius}")
    if scores.shape[-1] != candidates.shape[-1]:
        raise DimensionError(f"{scores.shape[-1]} scores for {candidates.shape[-1]} candidates")
    cand = candidates.to(scores)
    step = float(cand[1] - cand[0]) if cand.numel() > 1 else 1.0
    centre = init.clamp(float(cand[0]), float(cand[-1])).unsqueeze(-1)
    inside = (cand - centre).abs() <= radius * step + 1e-6
    masked = scores.masked_fill(~inside, float("-inf"))
    out = (torch.softmax(masked, dim=-1) * cand).sum(-1)
    return clamp_positive(out)


def bilinear_sample(fmap, x, y):
    """Sample ``(B, C, H, W)`` at real pixel locations ``x, y`` of shape ``(B, *S)``.

    Locations outside the grid are clamped to the border. Returns ``(B, C, *S)``.
    """
    B, C, H, W = fmap.shape
    spatial = x.shape[1:]
    x = x.reshape(B, -1).clamp(0, W - 1).to(fmap)
    y = y.reshape(B, -1).clamp(0, H - 1).to(fmap)
    x0 = x.floor().clamp(max=max(W - 2, 0))
    y0 = y.floor().clamp(max=max(H - 2, 0))
    wx = x - x0
    wy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)
    flat = fmap.reshape(B, C, H * W)

    def gather(yy, xx):
        idx = (yy * W + xx).unsqueeze(1).expand(B, C, -1)
        return flat.gather(2, idx)

    out = (
        gather(y0, x0) * ((1 - wx) * (1 - wy)).unsqueeze(1)
        + gather(y0, x1) * (wx * (1 - wy)).unsqueeze(1)
        + gather(y1, x0) * ((1 - wx) * wy).unsqueeze(1)
        + gather(y1, x1) * (wx * wy).unsqueeze(1)
    )
    return out.reshape(B, C, *spatial)


def shift_volume(left, right, candidates):
    """Correlation of left features with right features shifted by each candidate.

    Returns scores ``(B, H, W, N_c)``; out-of-view correspondences get
    :data:`OUT_OF_VIEW`.
    """
    if left.shape != right.shape:
        raise DimensionError(f"left {tuple(left.shape)} and right {tuple(right.shape)} differ")
    B, C, H, W = left.shape
    cand = candidates.to(left)
    xs = torch.arange(W, dtype=left.dtype, device=left.device)
    ys = torch.arange(H, dtype=left.dtype, device=left.device)
    # (N_c, H, W) target coordinates in the right view
    tx = (xs[None, None, :] - cand[:, None, None]).expand(-1, H, W)
    ty = ys[None, :, None].expand(cand.numel(), H, W)
    sampled = bilinear_sample(right, tx.expand(B, -1, -1, -1), ty.expand(B, -1, -1, -1))
    scores = (left.unsqueeze(2) * sampled).sum(1) / math.sqrt(C)
    inside = (tx >= -1e-6) & (tx <= W - 1 + 1e-6)
    scores = torch.where(inside.expand(B, -1, -1, -1), scores, torch.full_like(scores, OUT_OF_VIEW))
    return scores.permute(0, 2, 3, 1)


def global_match(left, right, candidates):
    """Soft-argmax disparity over the full candidate set; returns ``(B, 1, H, W)``."""
    scores = shift_volume(left, right, candidates)
    return soft_regress(scores, candidates).unsqueeze(1)


def local_match(left, right, init, candidates, radius=2):
    """Refine ``init`` (``(B, 1, H, W)``) with a soft-argmax over a candidate window."""
    scores = shift_volume(left, right, candidates)
    return windowed_regress(scores, candidates, init.squeeze(1), radius).unsqueeze(1)


@dataclass
class CameraParams:
    """Pinhole intrinsics ``K`` and world-to-camera extrinsics ``E`` (4x4)."""

    K: np.ndarray
    E: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.E = np.asarray(self.E, dtype=np.float64)
        if self.K.shape != (3, 3) or abs(np.linalg.det(self.K)) < 1e-12:
            raise ValidationError("K must be an invertible 3x3 matrix")
        if self.E.shape != (4, 4):
            raise ValidationError("E must be 4x4")
        R = self.E[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or not np.allclose(self.E[3], [0, 0, 0, 1]):
            raise ValidationError("E must be a rigid transform")


def rectified_pair(focal, baseline, cx=0.0, cy=0.0):
    """Two cameras with identical intrinsics, the second translated by ``baseline`` along +x."""
    K = np.array([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]])
    E2 = np.eye(4)
    E2[0, 3] = -baseline
    return CameraParams(K), CameraParams(K.copy(), E2)


def homography_project(points, depth, cam1, cam2):
    """Map pixels of view 1 seen at ``depth`` into view 2.

    ``points`` is ``(..., 2)`` pixel or ``(..., 3)`` homogeneous coordinates,
    ``depth`` broadcasts against ``points[..., 0]``. Returns ``(xy2, valid)``
    where ``valid`` is False for points that land behind camera 2.
    """
    p = np.asarray(points, dtype=np.float64)
    if p.shape[-1] == 2:
        p = np.concatenate([p, np.ones_like(p[..., :1])], axis=-1)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValidationError("depth must be positive")
    p = p / p[..., 2:3]
    ray = p @ np.linalg.inv(cam1.K).T
    X1 = ray * depth[..., None]
    X1h = np.concatenate([X1, np.ones_like(X1[..., :1])], axis=-1)
    X2 = X1h @ (cam2.E @ np.linalg.inv(cam1.E)).T
    q = X2[..., :3] @ cam2.K.T
    z = q[..., 2]
    valid = X2[..., 2] > 1e-9
    safe = np.where(valid, z, 1.0)
    xy = q[..., :2] / safe[..., None]
    return xy, valid


def plane_sweep_volume(f1, f2, depths, cam1, cam2):
    """Correlation volume over depth hypotheses for a general (unrectified) pair.

    ``f1``, ``f2`` are ``(B, C, H, W)`` at the cameras' pixel resolution.
    Returns ``(B, H, W, N)`` scores; invalid projections get :data:`OUT_OF_VIEW`.
    """
    B, C, H, W = f1.shape
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    pix = np.stack([xs, ys], axis=-1)
    vols = []
    for d in np.asarray(depths, dtype=np.float64):
        xy, valid = homography_project(pix, np.full((H, W), d), cam1, cam2)
        inside = valid & (xy[..., 0] >= 0) & (xy[..., 0] <= W - 1) & (xy[..., 1] >= 0) & (xy[..., 1] <= H - 1)
        tx = torch.as_tensor(xy[..., 0], dtype=f1.dtype).expand(B, H, W)
        ty = torch.as_tensor(xy[..., 1], dtype=f1.dtype).expand(B, H, W)
        warped = bilinear_sample(f2, tx, ty)
        score = (f1 * warped).sum(1) / math.sqrt(C)
        mask = torch.as_tensor(inside).expand(B, H, W)
        vols.append(torch.where(mask, score, torch.full_like(score, OUT_OF_VIEW)))
    return torch.stack(vols, dim=-1)


def clamp_positive(disparity):
    if torch.is_tensor(disparity):
        return disparity.clamp_min(0.0)
    return np.maximum(np.asarray(disparity), 0.0)


def lookup_correlation(left, right, disparity, radius):
    """Correlations at ``x - d + k`` for ``k = -radius..radius``; returns ``(B, 2r+1, H, W)``."""
    B, C, H, W = left.shape
    xs = torch.arange(W, dtype=left.dtype, device=left.device).view(1, 1, 1, W)
    ys = torch.arange(H, dtype=left.dtype, device=left.device).view(1, 1, H, 1)
    offsets = torch.arange(-radius, radius + 1, dtype=left.dtype, device=left.device).view(1, -1, 1, 1)
    tx = xs - disparity + offsets
    ty = ys.expand_as(tx)
    sampled = bilinear_sample(right, tx, ty)
    return (left.unsqueeze(2) * sampled).sum(1) / math.sqrt(C)


class RefinementHead(nn.Module):
    """Predicts a disparity residual from features, the current estimate and local correlations."""

    def __init__(self, feature_dim, hidden=64, radius=2):
        super().__init__()
        self.radius = radius
        in_ch = feature_dim + 1 + 2 * radius + 1
        self.conv1 = nn.Conv2d(in_ch, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.out = nn.Conv2d(hidden, 1, 3, padding=1)

    def forward(self, disparity, left, right):
        corr = lookup_correlation(left, right, disparity, self.radius)
        x = torch.cat([left, disparity, corr], dim=1)
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        return self.out(x)


def refine_residual(disparity, left, right, head):
    """``clamp_positive(disparity + head(...))``."""
    if disparity.shape[-2:] != left.shape[-2:]:
        raise DimensionError("disparity and features must share spatial size")
    return clamp_positive(disparity + head(disparity, left, right))


class ConvexMaskHead(nn.Module):
    """Per-pixel 3x3 convex weights for ``factor``-times upsampling."""

    def __init__(self, feature_dim, factor=8, hidden=128):
        super().__init__()
        self.factor = factor
        self.net = nn.Sequential(
            nn.Conv2d(feature_dim, hidden, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, 9 * factor * factor, 1),
        )

    def forward(self, features):
        B, _, H, W = features.shape
        f = self.factor
        logits = 0.25 * self.net(features)
        return torch.softmax(logits.view(B, 9, f, f, H, W), dim=1)


def convex_upsample(disparity, weights, factor=8, check=True):
    """Upsample ``(B, 1, h, w)`` to ``(B, 1, h*f, w*f)`` and rescale values by ``f``.

    ``weights`` is ``(B, 9, f, f, h, w)``: non-negative, summing to one over
    the 3x3 neighbourhood axis. Borders are replicate-padded.
    """
    B, _, H, W = disparity.shape
    f = factor
    if weights.shape != (B, 9, f, f, H, W):
        raise DimensionError(f"weights must be {(B, 9, f, f, H, W)}, got {tuple(weights.shape)}")
    if check:
        if bool((weights < 0).any()) or not torch.allclose(
            weights.sum(1), torch.ones((), dtype=weights.dtype), atol=1e-4
        ):
            raise ValidationError("convex weights must be non-negative and sum to 1")
    padded = F.pad(f * disparity, (1, 1, 1, 1), mode="replicate")
    patches = F.unfold(padded, 3).view(B, 9, 1, 1, H, W)
    up = (weights * patches).sum(1)  # (B, f, f, H, W)
    return up.permute(0, 3, 1, 4, 2).reshape(B, 1, H * f, W * f)
