"""Shared convolutional feature extractor, tokenization and sinusoidal position codes."""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import DimensionError, ValidationError

DOWNSAMPLE = 8


@dataclass
class TokenSequence:
    """Row-major flattened feature map.

    ``values`` is ``(B, N, D)`` with ``N == rows * cols``.
    """

    values: torch.Tensor
    grid_shape: tuple
    scale: int = DOWNSAMPLE

    def __post_init__(self):
        rows, cols = self.grid_shape
        if self.values.shape[-2] != rows * cols:
            raise DimensionError(f"{self.values.shape[-2]} tokens do not fill a {rows}x{cols} grid")

    @property
    def length(self):
        return self.values.shape[-2]

    @property
    def dim(self):
        return self.values.shape[-1]

    def unflatten(self):
        """Back to a ``(B, D, rows, cols)`` feature map."""
        return tokens_to_features(self.values, self.grid_shape)


@dataclass
class FeaturePyramid:
    level_quarter: torch.Tensor
    level_eighth: torch.Tensor


def tokens_from_features(level, scale=DOWNSAMPLE):
    """Flatten a ``(B, D, rows, cols)`` map into row-major tokens."""
    if level.dim() != 4:
        raise DimensionError(f"expected a (B, D, rows, cols) map, got {tuple(level.shape)}")
    B, D, rows, cols = level.shape
    values = level.flatten(2).transpose(1, 2)
    return TokenSequence(values, (rows, cols), scale)


def tokens_to_features(values, grid_shape):
    rows, cols = grid_shape
    B, N, D = values.shape
    if N != rows * cols:
        raise DimensionError(f"{N} tokens do not fill a {rows}x{cols} grid")
    return values.transpose(1, 2).reshape(B, D, rows, cols)


def patchify(image, patch_size):
    """Split an ``(H, W, C)`` array into ``J = HW / P**2`` flattened patches of length ``P*P*C``.

    Patches are taken in row-major order; each patch is flattened row-major
    with channels last.
    """
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    H, W, C = image.shape
    P = int(patch_size)
    if P <= 0 or H % P or W % P:
        raise ValidationError(f"patch size {P} must divide image size {H}x{W}")
    blocks = image.reshape(H // P, P, W // P, P, C).transpose(0, 2, 1, 3, 4)
    return blocks.reshape((H // P) * (W // P), P * P * C)


def unpatchify(patches, image_shape, patch_size):
    H, W = image_shape[:2]
    P = int(patch_size)
    C = patches.shape[1] // (P * P)
    blocks = np.asarray(patches).reshape(H // P, W // P, P, P, C).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(H, W, C)


def sinusoidal_table(length, dim, dtype=torch.float32):
    """``(length, dim)`` table with sin on even and cos on odd channels."""
    if dim % 2:
        raise ValidationError(f"positional encoding needs an even dim, got {dim}")
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = 10000.0 ** (-torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)
    return table.to(dtype)


def sinusoidal_table_2d(rows, cols, dim, dtype=torch.float32):
    # half of the channels encode the row index, half the column index
    if dim % 4:
        raise ValidationError(f"2-D positional encoding needs dim divisible by 4, got {dim}")
    r = sinusoidal_table(rows, dim // 2, dtype)
    c = sinusoidal_table(cols, dim // 2, dtype)
    grid = torch.cat([r[:, None, :].expand(rows, cols, -1), c[None, :, :].expand(rows, cols, -1)], dim=-1)
    return grid.reshape(rows * cols, dim)


def positional_encoding(seq, factorized=False):
    """Add sinusoidal codes over the flattened token index; returns a new sequence."""
    if factorized:
        table = sinusoidal_table_2d(*seq.grid_shape, seq.dim, seq.values.dtype)
    else:
        table = sinusoidal_table(seq.length, seq.dim, seq.values.dtype)
    return TokenSequence(seq.values + table.to(seq.values.device), seq.grid_shape, seq.scale)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm1 = nn.InstanceNorm2d(out_ch, affine=True)
        self.norm2 = nn.InstanceNorm2d(out_ch, affine=True)
        self.relu = nn.ReLU(inplace=True)
        self.skip = None
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Conv2d(in_ch, out_ch, 1, stride=stride)

    def forward(self, x):
        y = self.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return self.relu(y + (x if self.skip is None else self.skip(x)))


class FeatureEncoder(nn.Module):
    """Six residual stages producing 1/4 and 1/8 resolution maps.

    The same instance encodes both views.
    """

    def __init__(self, out_dim=128, quarter_dim=None, in_ch=3):
        super().__init__()
        c1 = max(16, out_dim // 4)
        c2 = quarter_dim or max(24, out_dim // 2)
        self.out_dim = out_dim
        self.quarter_dim = c2
        self.stem = nn.Sequential(nn.Conv2d(in_ch, c1, 5, stride=2, padding=2), nn.ReLU(inplace=True))
        self.stage1 = ResidualBlock(c1, c1)
        self.stage2 = ResidualBlock(c1, c2, stride=2)
        self.stage3 = ResidualBlock(c2, c2)
        self.stage4 = ResidualBlock(c2, out_dim, stride=2)
        self.stage5 = ResidualBlock(out_dim, out_dim)
        self.stage6 = nn.Conv2d(out_dim, out_dim, 1)

    def forward(self, image):
        """``image`` is ``(B, C, H, W)`` in [0, 1]; H and W must be multiples of 8."""
        H, W = image.shape[-2:]
        if H % DOWNSAMPLE or W % DOWNSAMPLE:
            raise ValidationError(f"image size {H}x{W} is not divisible by {DOWNSAMPLE}")
        if H * W < 2 * DOWNSAMPLE**2:
            # instance norm needs more than one value per channel at 1/8 scale
            raise ValidationError(f"image size {H}x{W} is too small; need at least two cells at 1/8 scale")
        x = self.stem(2.0 * image - 1.0)
        x = self.stage1(x)
        quarter = self.stage3(self.stage2(x))
        eighth = self.stage6(self.stage5(self.stage4(quarter)))
        return FeaturePyramid(quarter, eighth)


def extract_features(image, encoder):
    """Accepts ``(H, W, C)`` arrays or ``(B, C, H, W)`` tensors."""
    if not torch.is_tensor(image):
        image = torch.as_tensor(np.ascontiguousarray(image), dtype=torch.float32).permute(2, 0, 1)[None]
    return encoder(image)
