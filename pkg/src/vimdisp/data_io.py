"""Synthetic stereo pairs with exact ground truth and readers for the benchmark file formats."""

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import FormatError, ValidationError
from .metrics import DisparityMap


@dataclass
class StereoSample:
    left: np.ndarray
    right: np.ndarray
    gt: Optional[DisparityMap] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ValidationError(f"left {self.left.shape} and right {self.right.shape} differ")
        if self.gt is not None and self.gt.shape != self.left.shape[:2]:
            raise ValidationError(f"ground truth {self.gt.shape} does not match image {self.left.shape[:2]}")


# ----------------------------------------------------------------------------
# synthetic pairs


def _texture(rng, height, width, channels, sigma):
    noise = rng.standard_normal((height, width, channels))
    smooth = gaussian_filter(noise, sigma=(sigma, sigma, 0))
    smooth /= 3.0 * smooth.std() + 1e-12
    return np.clip(0.5 + 0.5 * smooth, 0.0, 1.0)


def _sample_columns(tex, coords):
    """Linear interpolation of ``tex`` (H, Wt, C) along x at real column ``coords`` (W,)."""
    i0 = np.floor(coords).astype(int)
    frac = (coords - i0)[None, :, None]
    i1 = np.minimum(i0 + 1, tex.shape[1] - 1)
    return tex[:, i0] * (1.0 - frac) + tex[:, i1] * frac


def half_regions(width, height, split=None, axis=1):
    """Two masks splitting the frame at column (``axis=1``) or row ``split``."""
    split = (width if axis == 1 else height) // 2 if split is None else split
    first = np.zeros((height, width), dtype=bool)
    if axis == 1:
        first[:, :split] = True
    else:
        first[:split] = True
    return first, ~first


def gen_synthetic(width, height, shift_layers, seed=0, channels=3, sigma=1.0):
    """Render a rectified pair from fronto-parallel textured layers.

    ``shift_layers`` is a list of ``(disparity, region)`` pairs; ``region`` is a
    boolean ``(height, width)`` mask in left-image coordinates or ``None`` for
    the whole frame, and the regions must tile the frame. Larger disparities
    are nearer and occlude smaller ones. The layer with the smallest
    disparity also fills the right view wherever nothing else lands.

    Left pixels whose match leaves the right frame or is hidden by a nearer
    layer are marked invalid in the ground truth.
    """
    if not shift_layers:
        raise ValidationError("need at least one layer")
    layers = []
    cover = np.zeros((height, width), dtype=int)
    for disp, region in shift_layers:
        disp = float(disp)
        if disp < 0:
            raise ValidationError(f"negative shift {disp}")
        if disp >= width:
            raise ValidationError(f"shift {disp} is not smaller than the width {width}")
        mask = np.ones((height, width), dtype=bool) if region is None else np.asarray(region, dtype=bool)
        if mask.shape != (height, width):
            raise ValidationError(f"region shape {mask.shape} does not match {(height, width)}")
        cover += mask
        layers.append((disp, mask))
    if not (cover == 1).all():
        raise ValidationError("layer regions must tile the frame exactly")

    rng = np.random.default_rng(seed)
    pad = int(np.ceil(max(d for d, _ in layers))) + 2
    order = sorted(range(len(layers)), key=lambda k: layers[k][0])
    textures = {k: _texture(rng, height, width + pad, channels, sigma) for k in order}

    left = np.zeros((height, width, channels))
    gt = np.zeros((height, width), dtype=np.float32)
    for k, (disp, mask) in enumerate(layers):
        left[mask] = textures[k][:, :width][mask]
        gt[mask] = disp

    right = np.zeros_like(left)
    owner = np.full((height, width), order[0])
    xs = np.arange(width, dtype=np.float64)
    for rank, k in enumerate(order):
        disp, mask = layers[k]
        src = xs + disp
        shifted = _sample_columns(textures[k], src)
        if rank == 0:
            covered = np.ones((height, width), dtype=bool)
        else:
            cols = np.minimum(np.rint(src).astype(int), width - 1)
            covered = mask[:, cols]
        right[covered] = shifted[covered]
        owner[covered] = k

    valid = np.zeros((height, width), dtype=bool)
    for k, (disp, mask) in enumerate(layers):
        target = xs - disp
        inside = target >= 0
        cols = np.clip(np.rint(target).astype(int), 0, width - 1)
        sees = owner[:, cols] == k
        valid |= mask & sees & inside[None, :]

    meta = {"source": "synthetic", "seed": seed, "layers": [d for d, _ in layers]}
    return StereoSample(left.astype(np.float32), right.astype(np.float32), DisparityMap(gt, valid), meta)


def desk_suite(width=128, height=64, seed=0):
    """Eight constant-shift and two-plane pairs used for overfitting checks."""
    lh, rh = half_regions(width, height, axis=1)
    th, bh = half_regions(width, height, axis=0)
    specs = [
        [(4, None)],
        [(8, None)],
        [(16, None)],
        [(12, None)],
        [(4, lh), (12, rh)],
        [(16, lh), (8, rh)],
        [(6, th), (14, bh)],
        [(10, th), (2, bh)],
    ]
    return [gen_synthetic(width, height, s, seed=seed + i) for i, s in enumerate(specs)]


# ----------------------------------------------------------------------------
# KITTI 16-bit PNG disparity


def _png_header(path):
    with open(path, "rb") as fh:
        head = fh.read(33)
    if len(head) < 33 or head[:8] != b"\x89PNG\r\n\x1a\n" or head[12:16] != b"IHDR":
        raise FormatError(f"{path}: not a PNG file", offset=0)
    width, height, depth, color = struct.unpack(">IIBB", head[16:26])
    return width, height, depth, color


def load_kitti_disparity(path):
    """Stored value / 256 is the disparity; stored 0 marks an invalid pixel."""
    _, _, depth, color = _png_header(path)
    if depth != 16 or color != 0:
        raise FormatError(f"{path}: expected 16-bit grayscale PNG, got bit depth {depth}, color type {color}")
    with Image.open(path) as im:
        raw = np.array(im, dtype=np.uint16)
    return DisparityMap(raw.astype(np.float32) / 256.0, raw > 0)


def write_kitti_disparity(path, disparity):
    """Encode a :class:`DisparityMap` (or array) as a KITTI 16-bit PNG; invalid pixels become 0."""
    dmap = disparity if isinstance(disparity, DisparityMap) else DisparityMap(disparity)
    vals = np.where(dmap.valid, np.rint(dmap.values.astype(np.float64) * 256.0), 0)
    raw = np.clip(vals, 0, 65535).astype(np.uint16)
    # a valid pixel must not encode as 0
    raw[dmap.valid & (raw == 0)] = 1
    Image.fromarray(raw).save(path, format="PNG")


# ----------------------------------------------------------------------------
# PFM


def _pfm_tokens(buf, count):
    tokens, pos = [], 0
    for _ in range(count):
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PFM header", offset=start)
        tokens.append((buf[start:pos], start))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("missing separator after PFM header", offset=pos)
    return tokens, pos + 1


def load_pfm(path):
    """Read a PFM file: ``(H, W)`` for ``Pf``, ``(H, W, 3)`` for ``PF``, rows top-down."""
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, data_off = _pfm_tokens(buf, 4)
    (magic, _), (w_tok, w_off), (h_tok, _), (s_tok, s_off) = tokens
    if magic == b"PF":
        channels = 3
    elif magic == b"Pf":
        channels = 1
    else:
        raise FormatError(f"{path}: bad PFM magic {magic!r}", offset=0)
    try:
        width, height = int(w_tok), int(h_tok)
    except ValueError:
        raise FormatError(f"{path}: bad PFM dimensions", offset=w_off) from None
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: non-positive PFM dimensions", offset=w_off)
    try:
        scale = float(s_tok)
    except ValueError:
        raise FormatError(f"{path}: bad PFM scale", offset=s_off) from None
    if scale == 0 or not np.isfinite(scale):
        raise FormatError(f"{path}: PFM scale must be finite and nonzero", offset=s_off)
    endian = "<" if scale < 0 else ">"
    count = width * height * channels
    need = count * 4
    if len(buf) - data_off < need:
        raise FormatError(f"{path}: truncated PFM payload, need {need} bytes", offset=len(buf))
    data = np.frombuffer(buf, dtype=endian + "f4", count=count, offset=data_off).astype(np.float32)
    shape = (height, width, 3) if channels == 3 else (height, width)
    data = np.flipud(data.reshape(shape)) * np.float32(abs(scale))
    return np.ascontiguousarray(data)


def write_pfm(path, array, scale=1.0, little_endian=True):
    """Write ``(H, W)`` or ``(H, W, 3)`` float32 data; ``scale`` divides the stored values."""
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim == 2:
        magic = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValidationError(f"PFM stores (H, W) or (H, W, 3) arrays, got {arr.shape}")
    if scale <= 0:
        raise ValidationError("scale must be positive; endianness is set separately")
    stored = arr if scale == 1.0 else arr / np.float32(scale)
    h, w = arr.shape[:2]
    s = -scale if little_endian else scale
    header = magic + b"\n" + f"{w} {h}\n".encode() + f"{s:g}\n".encode()
    payload = np.flipud(stored).astype("<f4" if little_endian else ">f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + payload)


def load_pfm_disparity(path):
    return DisparityMap(load_pfm(path))


def load_disparity(path):
    suffix = Path(path).suffix.lower()
    if suffix == ".png":
        return load_kitti_disparity(path)
    if suffix == ".pfm":
        return load_pfm_disparity(path)
    raise FormatError(f"{path}: unknown disparity format {suffix!r}")


def load_image(path):
    """RGB float32 image in [0, 1]."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: cannot decode image ({exc})") from exc


def save_image(path, image):
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


# ----------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    left: str
    right: str
    gt: Optional[str] = None

    @property
    def id(self):
        return Path(self.left).stem


@dataclass
class DatasetManifest:
    name: str
    entries: list
    split: str = "test"

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValidationError(f"split must be train or test, got {self.split!r}")
        if not self.entries:
            raise ValidationError(f"manifest {self.name!r} has no entries")


def read_manifest(path, name=None, split="test"):
    """Parse ``left<TAB>right<TAB>gt_or_-`` lines; relative paths resolve against the manifest."""
    base = Path(path).parent
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            left, right, gt = (p.strip() for p in parts)
            entries.append(
                ManifestEntry(str(base / left), str(base / right), None if gt == "-" else str(base / gt))
            )
    return DatasetManifest(name or Path(path).stem, entries, split)


def write_manifest(path, entries):
    with open(path, "w") as fh:
        fh.write("# left\tright\tgt\n")
        for e in entries:
            fh.write(f"{e.left}\t{e.right}\t{e.gt or '-'}\n")


def load_entry(entry):
    for p in (entry.left, entry.right, entry.gt):
        if p is not None and not os.path.exists(p):
            raise FileNotFoundError(p)
    gt = load_disparity(entry.gt) if entry.gt else None
    return StereoSample(load_image(entry.left), load_image(entry.right), gt, {"id": entry.id})


class SampleStream:
    """Batches of :class:`StereoSample` from a manifest.

    In lenient mode a failing entry is recorded in :attr:`errors` as
    ``(entry_id, exception)`` and skipped; in strict mode it is re-raised.
    """

    def __init__(self, manifest, batch=1, seed=None, strict=False):
        if batch < 1:
            raise ValidationError("batch must be >= 1")
        self.manifest = manifest
        self.batch = batch
        self.seed = seed
        self.strict = strict
        self.errors = []

    def order(self):
        n = len(self.manifest.entries)
        if self.seed is None:
            return list(range(n))
        return [int(i) for i in np.random.default_rng(self.seed).permutation(n)]

    def __iter__(self):
        self.errors = []
        pending = []
        for i in self.order():
            entry = self.manifest.entries[i]
            try:
                sample = load_entry(entry)
            except (OSError, FormatError, ValidationError) as exc:
                if self.strict:
                    raise
                self.errors.append((entry.id, exc))
                continue
            pending.append(sample)
            if len(pending) == self.batch:
                yield pending
                pending = []
        if pending:
            yield pending


def iterate(manifest, batch=1, seed=None, strict=False):
    return SampleStream(manifest, batch, seed, strict)
