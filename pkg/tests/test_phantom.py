import warnings

import numpy as np
import pytest

from msseg.errors import ConfigurationError
from msseg.phantom import class_means, generate_phantom

# counted on the seed-0 default phantom and frozen as a regression constant
DEFAULT_COUNTS = [77198, 36900, 22744, 10614]
DEFAULT_MASK_VOXELS = 78039


@pytest.fixture(scope="module")
def default():
    return generate_phantom(seed=0)


def test_frozen_counts(default):
    _, lab, mask = default
    assert np.bincount(lab.data.ravel()).tolist() == DEFAULT_COUNTS
    assert int(mask.data.sum()) == DEFAULT_MASK_VOXELS
    assert min(DEFAULT_COUNTS[1:]) >= 500


def test_deterministic(default):
    again = generate_phantom(seed=0)
    for a, b in zip(default, again):
        assert a.data.tobytes() == b.data.tobytes()
    other = generate_phantom(seed=1)
    assert other[0].data.tobytes() != default[0].data.tobytes()


def test_geometry_and_mask(default):
    vol, lab, mask = default
    assert vol.shape == lab.shape == mask.shape == (96, 96, 16)
    assert vol.spacing == lab.spacing == (1.0, 1.0, 2.0)
    assert np.all(mask.data[lab.data > 0])
    assert lab.num_classes == 4


def test_mask_is_two_voxel_dilation(default):
    _, lab, mask = default
    from scipy import ndimage
    faces = ndimage.generate_binary_structure(3, 1)
    once = ndimage.binary_dilation(lab.data > 0, faces)
    assert not np.array_equal(once, mask.data)
    assert np.array_equal(ndimage.binary_dilation(once, faces), mask.data)


def test_noise_free_constant_classes():
    vol, lab, mask = generate_phantom(noise_sigma=0.0, seed=3)
    means = class_means(4)
    for c in range(4):
        sel = (lab.data == c) & mask.data
        assert np.all(vol.data[sel] == means[c])
    assert np.all(vol.data[~mask.data] == 0)


def test_noise_level(default):
    vol, lab, mask = default
    sel = (lab.data == 1)
    assert abs(vol.data[sel].std() - 25.0) < 1.0


def test_means_separated():
    for n in (2, 4, 9):
        m = np.sort(class_means(n))
        assert np.min(np.diff(m)) >= 3 * 25.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        generate_phantom(seed=0)
    with pytest.warns(RuntimeWarning, match="3 sigma"):
        generate_phantom(seed=0, noise_sigma=40.0)


def test_ambiguous_core():
    m = class_means(4, ambiguous_core=True)
    assert m[2] == m[1]


def test_nine_classes():
    _, lab, _ = generate_phantom(num_classes=9)
    counts = np.bincount(lab.data.ravel(), minlength=9)
    assert lab.num_classes == 9 and np.all(counts[1:] >= 500)


def test_ribbon_is_thin(default):
    _, lab, _ = default
    from scipy import ndimage
    # on the central slices two in-plane erosions remove the ribbon entirely
    for z in range(4, 12):
        ribbon = lab.data[:, :, z] == 3
        assert ribbon.sum() > 200
        assert not ndimage.binary_erosion(ribbon, iterations=2).any()


def test_other_slice_axis():
    vol, lab, mask = generate_phantom(extents=(16, 96, 96), spacing=(2, 1, 1), slice_axis=0)
    assert vol.slice_axis == 0 and lab.shape == (16, 96, 96)
    ref = generate_phantom(seed=0)[1].data
    assert np.array_equal(np.moveaxis(lab.data, 0, 2), ref)


@pytest.mark.parametrize("kwargs", [
    dict(extents=(31, 96, 16)),
    dict(num_classes=1),
    dict(num_classes=40),
    dict(noise_sigma=-1.0),
])
def test_infeasible(kwargs):
    with pytest.raises(ConfigurationError):
        generate_phantom(**kwargs)
