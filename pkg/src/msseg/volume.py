"""Volumetric image carriers, geometry checks and intensity scaling."""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, InputError

AXIS_NAMES = ("X", "Y", "Z")
SPACING_TOL_MM = 1e-4
MAX_CLASSES = 2 ** 15
INTENSITY_MAX = 1023.0


@dataclass
class Volume:
    """A 3D scalar grid indexed ``data[x, y, z]`` with spacing in mm.

    ``slice_axis`` is the through-plane axis; patches are taken from the
    plane spanned by the other two axes.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    slice_axis: int = 2

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise InputError(f"volume data must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise InputError(f"volume extents must be >= 1, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in self.spacing):
            raise InputError(f"spacing must be three positive values, got {self.spacing}")
        if self.slice_axis not in (0, 1, 2):
            raise InputError(f"slice_axis must be 0, 1 or 2, got {self.slice_axis}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def in_plane_axes(self):
        return tuple(a for a in range(3) if a != self.slice_axis)

    def with_data(self, data, cls=None, **extra):
        cls = cls or Volume
        return cls(data, self.spacing, self.slice_axis, **extra)


@dataclass
class LabelVolume(Volume):
    """Per-voxel class indices in ``[0, num_classes)``; 0 is background.

    Data is held as uint8 for up to 256 classes and int16 above that, the
    same types the file formats store.
    """

    num_classes: int = None

    def __post_init__(self):
        super().__post_init__()
        if not np.issubdtype(self.data.dtype, np.integer):
            if not np.all(np.mod(self.data, 1) == 0):
                raise InputError("label volume holds non-integer values")
            self.data = self.data.astype(np.int64)
        if self.data.min() < 0:
            raise InputError("labels must be non-negative")
        top = int(self.data.max())
        if self.num_classes is None:
            self.num_classes = max(top + 1, 2)
        elif top >= self.num_classes:
            raise InputError(f"label {top} out of range for {self.num_classes} classes")
        if self.num_classes > MAX_CLASSES:
            raise InputError(f"at most {MAX_CLASSES} classes are supported, got {self.num_classes}")
        self.data = self.data.astype(label_dtype(self.num_classes), copy=False)


def label_dtype(num_classes):
    return np.dtype(np.uint8) if num_classes <= 256 else np.dtype(np.int16)


@dataclass
class BrainMask(Volume):
    def __post_init__(self):
        super().__post_init__()
        self.data = self.data.astype(bool)

    @property
    def count(self):
        return int(self.data.sum())


def validate_geometry(volume, mask=None, labels=None):
    """Raise :class:`GeometryError` unless all inputs share extents and spacing."""
    for name, other in (("mask", mask), ("labels", labels)):
        if other is not None:
            check_same_geometry(volume, other, name)


def check_same_geometry(volume, other, name="volume"):
    """Raise :class:`GeometryError` naming the first axis where ``other`` differs."""
    for axis in range(3):
        if volume.shape[axis] != other.shape[axis]:
            raise GeometryError(
                f"{name} extent {other.shape[axis]} differs from image extent "
                f"{volume.shape[axis]} on axis {AXIS_NAMES[axis]}", axis=AXIS_NAMES[axis])
    for axis in range(3):
        if abs(volume.spacing[axis] - other.spacing[axis]) > SPACING_TOL_MM:
            raise GeometryError(
                f"{name} spacing {other.spacing[axis]} mm differs from image spacing "
                f"{volume.spacing[axis]} mm on axis {AXIS_NAMES[axis]}", axis=AXIS_NAMES[axis])


def scale_intensities(volume, mask):
    """Map intensities linearly so the in-mask range becomes ``[0, 1023]``.

    Voxels outside the mask go through the same linear map. A mask with a
    single intensity value yields an all-zero volume and a warning.
    """
    check_same_geometry(volume, mask, "mask")
    inside = volume.data[mask.data.astype(bool)]
    if inside.size == 0:
        raise InputError("brain mask is empty")
    data = volume.data.astype(np.float64)
    lo, hi = float(inside.min()), float(inside.max())
    if hi == lo:
        warnings.warn("constant intensity inside the brain mask; scaled volume is all zeros",
                      RuntimeWarning, stacklevel=2)
        return volume.with_data(np.zeros(volume.shape, dtype=np.float32))
    scaled = (data - lo) * (INTENSITY_MAX / (hi - lo))
    return volume.with_data(scaled.astype(np.float32))
