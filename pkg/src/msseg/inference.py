"""Voxel-wise segmentation of a masked volume and kernel inspection."""

from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InputError
from .patches import extract_batch, plane_stack
from .tensor import conv2d_valid
from .volume import LabelVolume, label_dtype, validate_geometry

DEFAULT_BATCH = 256


def segment(volume, mask, model, batch_size=DEFAULT_BATCH, return_probs=False):
    """Label every masked voxel with the most probable class.

    Voxels outside the mask are background (0). Ties go to the lowest class
    index. With ``return_probs`` a ``[N, X, Y, Z]`` float32 array of class
    probabilities is returned as well (zero outside the mask).
    """
    validate_geometry(volume, mask)
    cfg = model.config
    if cfg.slice_axis is not None and cfg.slice_axis != volume.slice_axis:
        raise ConfigurationError(
            f"model was trained on slice axis {cfg.slice_axis}, volume uses {volume.slice_axis}")
    if batch_size < 1:
        raise InputError("batch_size must be >= 1")
    n = cfg.num_classes
    coords = np.argwhere(mask.data.astype(bool))
    labels = np.zeros(volume.shape, dtype=label_dtype(n))
    probs_out = np.zeros((n, *volume.shape), dtype=np.float32) if return_probs else None
    planes = plane_stack(volume, model.dtype)
    for start in range(0, len(coords), batch_size):
        c = coords[start:start + batch_size]
        probs = model.forward(extract_batch(volume, c, cfg.patch_sizes, planes), training=False)
        idx = tuple(c.T)
        labels[idx] = probs.argmax(axis=1)
        if return_probs:
            probs_out[(slice(None),) + idx] = probs.T
    result = volume.with_data(labels, LabelVolume, num_classes=n)
    if return_probs:
        return result, probs_out
    return result


def _resolve_layer(model, layer):
    names = {name: p for name, p in model.named_params() if ".conv" in name}
    if layer not in names:
        raise ConfigurationError(
            f"unknown layer {layer!r}; convolution layers are {', '.join(names)}")
    return names[layer]


def _tile_grid(kernels):
    """Per-kernel min-max normalized tiles in a grid, one row per input channel."""
    c_out, c_in, k, _ = kernels.shape
    cols = c_out if c_in > 1 else int(np.ceil(np.sqrt(c_out)))
    rows = c_in if c_in > 1 else int(np.ceil(c_out / cols))
    grid = np.ones((rows * (k + 1) + 1, cols * (k + 1) + 1))
    for o in range(c_out):
        for c in range(c_in):
            tile = kernels[o, c].astype(np.float64)
            lo, hi = tile.min(), tile.max()
            tile = np.full(tile.shape, 0.5) if hi == lo else (tile - lo) / (hi - lo)
            r, q = (c, o) if c_in > 1 else divmod(o, cols)
            y, x = 1 + r * (k + 1), 1 + q * (k + 1)
            grid[y:y + k, x:x + k] = tile
    return grid


def dump_kernels(model, path, layer="branch0.conv0"):
    """Write a convolution layer's kernels as a tiled PNG plus a raw TSV.

    Each tile is min-max normalized on its own; constant kernels are mid-gray.
    The TSV (``path`` with suffix ``.tsv``) holds one kernel row per line:
    output index, input index, row, then the row's values.
    """
    from PIL import Image

    params = _resolve_layer(model, layer)
    kernels = params.weights
    grid = _tile_grid(kernels)
    path = Path(path)
    Image.fromarray(np.round(grid * 255).astype(np.uint8), mode="L").save(path)
    raw_path = path.with_suffix(".tsv")
    c_out, c_in, k, _ = kernels.shape
    lines = [f"# layer={layer} shape={c_out}x{c_in}x{k}x{k}"]
    for o in range(c_out):
        for c in range(c_in):
            for r in range(k):
                vals = "\t".join(repr(float(v)) for v in kernels[o, c, r])
                lines.append(f"{o}\t{c}\t{r}\t{vals}")
    raw_path.write_text("\n".join(lines) + "\n")
    return path, raw_path


def load_kernel_dump(path, dtype=np.float32):
    """Parse a TSV written by :func:`dump_kernels` back into ``[C_out, C_in, k, k]``."""
    text = Path(path).read_text().splitlines()
    shape = tuple(int(v) for v in text[0].split("shape=")[1].split("x"))
    out = np.empty(shape, dtype=dtype)
    for line in text[1:]:
        fields = line.split("\t")
        o, c, r = (int(v) for v in fields[:3])
        out[o, c, r] = [float(v) for v in fields[3:]]
    return out


def kernel_response(model, volume, slice_index, layer="branch0.conv0", kernel=0):
    """Valid convolution of one acquisition-plane slice with a first-layer kernel.

    Intensities are normalized the same way the network normalizes its input.
    """
    params = _resolve_layer(model, layer)
    if params.weights.shape[1] != 1:
        raise ConfigurationError("kernel responses are only defined for first-layer kernels")
    plane = plane_stack(volume, np.float64)[slice_index]
    cfg = model.config
    x = ((plane - cfg.input_offset) * cfg.input_scale)[None]
    w = params.weights[kernel:kernel + 1].astype(np.float64)
    b = params.biases[kernel:kernel + 1].astype(np.float64)
    return conv2d_valid(x, w, b)[0]
