"""Synthetic labeled volumes for exercising the pipeline end to end.

Layout, from the outside in: a thin folded ribbon (class ``N-1``) on the
outer surface of an ellipsoid, a large smooth shell (class 1) under it and
``N-3`` nested inner ellipsoids (classes ``2..N-2``). Background (class 0)
fills the rest; the brain mask is every structure dilated by two voxels.
"""

import warnings

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError
from .volume import BrainMask, LabelVolume, Volume

DEFAULT_EXTENTS = (96, 96, 16)
DEFAULT_SPACING = (1.0, 1.0, 2.0)
DEFAULT_NOISE = 25.0
MIN_IN_PLANE = 32
MIN_CLASS_VOXELS = 500

OUTSIDE_MEAN = 0.0
BACKGROUND_MEAN = 100.0
MEAN_STEP = 100.0
# in-plane fraction of the outer semi-axes taken by the ellipsoid
OUTER_FRACTION = (0.42, 0.38)
RIBBON_VOXELS = 3.0
RIBBON_AMPLITUDE = 0.07
RIBBON_FOLDS = 7
INNER_RADIUS = 0.6
MASK_DILATION = 2


def class_means(num_classes, ambiguous_core=False):
    """Mean intensity per class.

    Background sits lowest, then the ribbon, the large shell and the inner
    ellipsoids in order. With ``ambiguous_core`` the innermost class copies
    the large shell's mean so only spatial context tells them apart.
    """
    means = np.empty(num_classes)
    means[0] = BACKGROUND_MEAN
    if num_classes == 2:
        means[1] = BACKGROUND_MEAN + MEAN_STEP
        return means
    means[num_classes - 1] = BACKGROUND_MEAN + MEAN_STEP
    means[1] = BACKGROUND_MEAN + 2 * MEAN_STEP
    for c in range(2, num_classes - 1):
        means[c] = BACKGROUND_MEAN + (c + 1) * MEAN_STEP
    if ambiguous_core and num_classes >= 4:
        means[num_classes - 2] = means[1]
    return means


def _geometry(extents, spacing, rng):
    """Normalized ellipsoidal radius and polar angle for every voxel."""
    nx, ny, nz = extents
    x, y, z = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in extents), indexing="ij")
    cx, cy, cz = (nx - 1) / 2, (ny - 1) / 2, (nz - 1) / 2
    ax, ay = OUTER_FRACTION[0] * nx, OUTER_FRACTION[1] * ny
    # through-plane semi-axis in mm matched to the in-plane one, but never so
    # short that the end slices lose the structure
    az = max(ax * spacing[0] / spacing[2], 0.8 * nz)
    # small random tilt and phase keep phantoms of different seeds distinct
    phase = rng.uniform(0, 2 * np.pi)
    shift = rng.uniform(-0.03, 0.03, size=2) * (nx, ny)
    u, v, w = (x - cx - shift[0]) / ax, (y - cy - shift[1]) / ay, (z - cz) / az
    rho = np.sqrt(u * u + v * v + w * w)
    theta = np.arctan2(v, u)
    return rho, theta, z, phase, ax


def _labels(extents, spacing, num_classes, rng):
    rho, theta, z, phase, ax = _geometry(extents, spacing, rng)
    labels = np.zeros(extents, dtype=np.uint8)
    outer = 1.0 + RIBBON_AMPLITUDE * np.sin(RIBBON_FOLDS * theta + phase + 0.35 * z)
    inside = rho < outer
    if num_classes == 2:
        labels[inside] = 1
        return labels
    labels[inside] = num_classes - 1
    labels[rho < outer - RIBBON_VOXELS / ax] = 1
    n_inner = num_classes - 3
    # equal-area shells inside the inner radius, outermost first
    for k in range(n_inner):
        r = INNER_RADIUS * np.sqrt(1.0 - k / n_inner)
        labels[rho < r] = 2 + k
    return labels


def generate_phantom(extents=DEFAULT_EXTENTS, spacing=DEFAULT_SPACING, num_classes=4,
                     noise_sigma=DEFAULT_NOISE, seed=0, slice_axis=2, ambiguous_core=False):
    """Return ``(image, labels, mask)`` for one synthetic subject.

    The same ``seed`` always gives the same arrays. Intensities are raw
    (not yet scaled to ``[0, 1023]``).
    """
    extents = tuple(int(e) for e in extents)
    if len(extents) != 3 or min(extents) < 1:
        raise ConfigurationError(f"extents must be three positive integers, got {extents}")
    in_plane = [extents[a] for a in range(3) if a != slice_axis]
    if min(in_plane) < MIN_IN_PLANE:
        raise ConfigurationError(
            f"in-plane extents must be >= {MIN_IN_PLANE}, got {tuple(in_plane)}")
    if num_classes < 2 or num_classes > 255:
        raise ConfigurationError(f"class count must lie in [2, 255], got {num_classes}")
    if noise_sigma < 0:
        raise ConfigurationError("noise_sigma must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x9E37]))
    # geometry is built with the slice axis last, then moved into place
    build = tuple(e for a, e in enumerate(extents) if a != slice_axis) + (extents[slice_axis],)
    build_spacing = tuple(s for a, s in enumerate(spacing) if a != slice_axis) + (spacing[slice_axis],)
    labels = _labels(build, build_spacing, num_classes, rng)
    labels = np.ascontiguousarray(np.moveaxis(labels, 2, slice_axis))

    counts = np.bincount(labels.ravel(), minlength=num_classes)
    small = [c for c in range(1, num_classes) if counts[c] < MIN_CLASS_VOXELS]
    if small:
        raise ConfigurationError(
            f"extents {extents} cannot hold {num_classes} classes: class {small[0]} "
            f"has only {counts[small[0]]} voxels (need {MIN_CLASS_VOXELS})")

    mask = ndimage.binary_dilation(labels > 0, ndimage.generate_binary_structure(3, 1),
                                   iterations=MASK_DILATION)
    means = class_means(num_classes, ambiguous_core)
    distinct = np.unique(means)
    if noise_sigma > 0 and np.min(np.diff(distinct)) < 3 * noise_sigma:
        warnings.warn(f"class means closer than 3 sigma at noise_sigma={noise_sigma}",
                      RuntimeWarning, stacklevel=2)
    clean = np.where(mask, means[labels], OUTSIDE_MEAN)
    noise = rng.standard_normal(extents) * noise_sigma if noise_sigma > 0 else 0.0
    image = (clean + noise).astype(np.float32)
    return (Volume(image, spacing, slice_axis),
            LabelVolume(labels, spacing, slice_axis, num_classes=num_classes),
            BrainMask(mask, spacing, slice_axis))
