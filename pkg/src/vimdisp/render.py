"""Rainbow heat maps for disparity maps: red at the minimum, blue at the maximum, black where invalid."""

import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image

from .metrics import DisparityMap

# hue sweep in degrees, minimum -> maximum disparity
HUE_START = 0.0
HUE_END = 240.0


def colorize(disparity, vmin=None, vmax=None):
    """``(H, W, 3)`` uint8 RGB image.

    Values are normalised to [0, 1] over the valid pixels (or ``vmin``/``vmax``)
    and mapped to hue ``0 + 240 * t`` degrees at full saturation and value. A
    constant map renders entirely at the red end.
    """
    dmap = disparity if isinstance(disparity, DisparityMap) else DisparityMap(disparity)
    vals = dmap.values.astype(np.float64)
    valid = dmap.valid & np.isfinite(vals)
    if valid.any():
        lo = vals[valid].min() if vmin is None else vmin
        hi = vals[valid].max() if vmax is None else vmax
    else:
        lo = hi = 0.0
    span = hi - lo
    t = np.zeros_like(vals) if span <= 0 else np.clip((np.where(valid, vals, lo) - lo) / span, 0.0, 1.0)
    hue = (HUE_START + (HUE_END - HUE_START) * t) / 360.0
    hsv = np.stack([hue, np.ones_like(hue), np.ones_like(hue)], axis=-1)
    rgb = np.rint(hsv_to_rgb(hsv) * 255.0).astype(np.uint8)
    rgb[~valid] = 0
    return rgb


def render_heatmap(disparity, path, vmin=None, vmax=None):
    Image.fromarray(colorize(disparity, vmin, vmax)).save(path, format="PNG")
    return path
