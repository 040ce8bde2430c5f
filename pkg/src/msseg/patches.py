"""Centered in-plane patches around voxels.

Patches come from the acquisition plane only. Positions outside the slice
are filled by edge-repeating reflection, the same convention the pooling
layers use (index ``-1`` maps to ``0``, ``-2`` to ``1``, ``n`` to ``n-1``).
"""

from dataclasses import dataclass

import numpy as np

from .errors import InputError


@dataclass
class PatchGroup:
    coord: tuple
    patches: list


def reflect_index(idx, n):
    """Map arbitrary integer indices onto ``[0, n)`` by edge-repeating reflection."""
    m = np.mod(idx, 2 * n)
    return np.where(m < n, m, 2 * n - 1 - m)


def _check_size(size):
    if size < 1 or size % 2 == 0:
        raise InputError(f"patch size must be odd and positive, got {size}")


def _check_coords(volume, coords):
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    shape = np.array(volume.shape)
    bad = (coords < 0) | (coords >= shape)
    if bad.any():
        i = int(np.argwhere(bad.any(axis=1))[0, 0])
        raise InputError(f"coordinate {tuple(coords[i])} lies outside volume extents {volume.shape}")
    return coords


def plane_stack(volume, dtype=np.float32):
    """Volume data as ``[slice, row, col]`` with the slice axis first."""
    return np.ascontiguousarray(np.moveaxis(volume.data, volume.slice_axis, 0), dtype=dtype)


def extract_patches(volume, coords, size, planes=None):
    """Patches of ``size x size`` centered on each of ``coords`` (shape ``[n, 3]``).

    ``planes`` may carry a precomputed :func:`plane_stack` of ``volume``.
    Returns ``[n, size, size]``.
    """
    _check_size(size)
    coords = _check_coords(volume, coords)
    if planes is None:
        planes = plane_stack(volume)
    a0, a1 = volume.in_plane_axes
    n_rows, n_cols = planes.shape[1:]
    r = size // 2
    offsets = np.arange(-r, r + 1)
    rows = reflect_index(coords[:, a0, None] + offsets, n_rows)
    cols = reflect_index(coords[:, a1, None] + offsets, n_cols)
    slices = coords[:, volume.slice_axis]
    return planes[slices[:, None, None], rows[:, :, None], cols[:, None, :]]


def extract_patch(volume, coord, size):
    """Single ``size x size`` patch centered on ``coord``."""
    return extract_patches(volume, [coord], size)[0]


def extract_group(volume, coord, sizes):
    """One patch per size, all centered on ``coord``."""
    coord = tuple(int(c) for c in coord)
    return PatchGroup(coord, [extract_patch(volume, coord, s) for s in sizes])


def extract_batch(volume, coords, sizes, planes=None):
    """Per-size patch arrays for many coordinates, ready for ``Model.forward``."""
    if planes is None:
        planes = plane_stack(volume)
    return [extract_patches(volume, coords, s, planes) for s in sizes]
