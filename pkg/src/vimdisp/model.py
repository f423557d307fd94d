"""End-to-end stereo model: shared CNN, joint bidirectional-SSM encoding of both views, matching head."""

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import matching
from .encoder import FeatureEncoder, TokenSequence, positional_encoding, tokens_from_features
from .errors import DimensionError, FormatError, NumericError, ValidationError
from .ssm_core import BidirectionalLayer

CHECKPOINT_FORMAT = "vimdisp-checkpoint-v1"


@dataclass
class ModelConfig:
    num_layers: int = 6
    passes: int = 1
    self_attention: bool = False
    model_dim: int = 128
    max_disparity: float = 192.0
    candidate_step: float = 1.0
    upsample_factor: int = 8
    state_dim: int = 8
    expand: int = 2
    conv_width: int = 4
    attention_heads: int = 4
    local_radius: int = 2
    refine_iters: int = 1
    factorized_pe: bool = False
    scan: str = "parallel"

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValidationError("num_layers must be >= 1")
        if self.passes not in (1, 2):
            raise ValidationError("passes must be 1 or 2")
        if self.max_disparity <= 0:
            raise ValidationError("max_disparity must be positive")
        if self.model_dim % 2:
            raise ValidationError("model_dim must be even for positional encoding")
        if self.upsample_factor != 8:
            raise ValidationError("only the 1/8 feature level is supported")

    @property
    def candidate_count(self):
        return len(matching.build_candidates(self.max_disparity, self.upsample_factor, self.candidate_step))

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def desk_config(**overrides):
    """Small configuration that trains on a CPU in minutes."""
    base = dict(model_dim=64, state_dim=4, expand=1)
    base.update(overrides)
    return ModelConfig(**base)


def concat_symmetric(f_left, f_right):
    """Return ``([left, right], [right, left])`` joined along the token axis."""
    if isinstance(f_left, TokenSequence):
        f_left, f_right = f_left.values, f_right.values
    if f_left.shape != f_right.shape:
        raise ValidationError(f"left {tuple(f_left.shape)} and right {tuple(f_right.shape)} differ")
    return torch.cat([f_left, f_right], dim=-2), torch.cat([f_right, f_left], dim=-2)


def split_even(seq):
    """Halves ``seq[:N]`` and ``seq[N:]`` of a length-``2N`` token sequence."""
    if isinstance(seq, TokenSequence):
        seq = seq.values
    n2 = seq.shape[-2]
    if n2 % 2:
        raise ValidationError(f"cannot split an odd-length sequence ({n2})")
    n = n2 // 2
    return seq[..., :n, :], seq[..., n:, :]


class ViMLayer(nn.Module):
    """Pre-norm bidirectional SSM transform (the residual is added by :func:`encode_stack`)."""

    def __init__(self, model_dim, **block_kwargs):
        super().__init__()
        self.model_dim = model_dim
        self.norm = nn.LayerNorm(model_dim)
        self.mixer = BidirectionalLayer(model_dim, **block_kwargs)

    def forward(self, x):
        return self.mixer(self.norm(x))


def encode_stack(seq, layers, on_layer=None):
    """Residual update ``x <- layer(x) + x`` for every layer in order."""
    for i, layer in enumerate(layers):
        if seq.shape[-1] != layer.model_dim:
            raise DimensionError(f"layer {i} expects dim {layer.model_dim}, got {seq.shape[-1]}")
        seq = layer(seq) + seq
        if on_layer is not None:
            on_layer(i)
        if not torch.isfinite(seq).all():
            raise NumericError(f"non-finite activations after ViM layer {i}")
    return seq


class SelfAttention(nn.Module):
    """Multi-head scaled dot-product self-attention with a residual connection."""

    def __init__(self, dim, heads=4):
        super().__init__()
        if dim % heads:
            raise ValidationError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x, return_weights=False):
        *lead, L, D = x.shape
        h = self.heads

        def heads(t):
            return t.reshape(*lead, L, h, D // h).transpose(-3, -2)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(D // h), dim=-1)
        out = (w @ v).transpose(-3, -2).reshape(*lead, L, D)
        out = x + self.o(out)
        return (out, w) if return_weights else out


class ViMDisparity(nn.Module):
    def __init__(self, cfg=None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        D = cfg.model_dim
        block = dict(state_dim=cfg.state_dim, expand=cfg.expand, conv_width=cfg.conv_width, scan=cfg.scan)
        self.encoder = FeatureEncoder(D)
        self.layers = nn.ModuleList(ViMLayer(D, **block) for _ in range(cfg.num_layers))
        self.attention = SelfAttention(D, cfg.attention_heads) if cfg.self_attention else None
        self.refine = matching.RefinementHead(D, radius=cfg.local_radius)
        self.upsampler = matching.ConvexMaskHead(2 * D, factor=cfg.upsample_factor)
        self.register_buffer(
            "candidates",
            matching.build_candidates(cfg.max_disparity, cfg.upsample_factor, cfg.candidate_step),
            persistent=False,
        )
        self.stack_traversals = 0
        self.layer_applications = 0

    def _count_layer(self, _):
        self.layer_applications += 1

    def _traverse(self, seq):
        self.stack_traversals += 1
        seq = encode_stack(seq, self.layers, self._count_layer)
        if self.attention is not None:
            seq = self.attention(seq)
        return seq

    def encode_pair(self, left, right):
        """Joint encoding; returns left/right ViM maps and the raw left CNN map at 1/8 scale."""
        B = left.shape[0]
        pyramid = self.encoder(torch.cat([left, right], dim=0))
        feats = pyramid.level_eighth
        tokens = positional_encoding(tokens_from_features(feats), factorized=self.cfg.factorized_pe)
        t_left, t_right = tokens.values[:B], tokens.values[B:]
        f_cat, f_rev = concat_symmetric(t_left, t_right)
        if self.cfg.passes == 1:
            both = self._traverse(torch.cat([f_cat, f_rev], dim=0))
            out_cat, out_rev = both[:B], both[B:]
        else:
            out_cat = self._traverse(f_cat)
            out_rev = self._traverse(f_rev)
        l1, r1 = split_even(out_cat)
        r2, l2 = split_even(out_rev)
        grid = tokens.grid_shape
        left_map = TokenSequence(0.5 * (l1 + l2), grid).unflatten()
        right_map = TokenSequence(0.5 * (r1 + r2), grid).unflatten()
        return left_map, right_map, feats[:B]

    def forward(self, left, right):
        """Predict disparity for ``(B, 3, H, W)`` images in [0, 1].

        Returns a dict with ``disparity`` (full resolution, ``(B, 1, H, W)``)
        and the feature-scale estimates ``coarse_global``, ``coarse_local``
        and ``coarse``.
        """
        if left.shape != right.shape:
            raise DimensionError("left and right images differ in shape")
        cfg = self.cfg
        left_map, right_map, cnn_left = self.encode_pair(left, right)
        d_global = matching.global_match(left_map, right_map, self.candidates)
        d = matching.local_match(left_map, right_map, d_global, self.candidates, cfg.local_radius)
        d_local = d
        for _ in range(cfg.refine_iters):
            d = matching.refine_residual(d, left_map, right_map, self.refine)
        weights = self.upsampler(torch.cat([left_map, cnn_left], dim=1))
        full = matching.convex_upsample(d, weights, cfg.upsample_factor, check=False)
        full = matching.clamp_positive(full).clamp_max(cfg.max_disparity)
        if not torch.isfinite(full).all():
            raise NumericError("non-finite disparity after upsampling")
        return {"disparity": full, "coarse": d, "coarse_local": d_local, "coarse_global": d_global}

    @torch.no_grad()
    def predict(self, left, right):
        """Numpy convenience: ``(H, W, 3)`` arrays in, ``(H, W)`` disparity out."""
        dev = next(self.parameters()).device
        lt = torch.as_tensor(np.ascontiguousarray(left), dtype=torch.float32, device=dev).permute(2, 0, 1)[None]
        rt = torch.as_tensor(np.ascontiguousarray(right), dtype=torch.float32, device=dev).permute(2, 0, 1)[None]
        return self(lt, rt)["disparity"][0, 0].cpu().numpy()


def masked_l1(pred, gt, mask):
    mask = mask.to(pred.dtype)
    return (mask * (pred - gt).abs()).sum() / mask.sum().clamp_min(1.0)


def disparity_loss(out, gt, mask, coarse_weight=0.5):
    """Masked L1 at full resolution plus a down-weighted term on the pre-upsampling estimate."""
    f = gt.shape[-1] // out["coarse"].shape[-1]
    coarse_up = f * F.interpolate(out["coarse"], size=gt.shape[-2:], mode="bilinear", align_corners=False)
    return masked_l1(out["disparity"], gt, mask) + coarse_weight * masked_l1(coarse_up, gt, mask)


def save_checkpoint(model, path, extra=None):
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"format": CHECKPOINT_FORMAT, "config": asdict(model.cfg), "extra": extra or {}}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, map_location="cpu"):
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data:
            raise FormatError(f"{path}: missing checkpoint metadata")
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise FormatError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        state = {k[len("param/"):]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("param/")}
    model = ViMDisparity(ModelConfig.from_dict(meta["config"]))
    model.load_state_dict(state)
    return model.to(map_location)
