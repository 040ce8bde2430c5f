"""Multi-scale patch CNN for voxel-wise segmentation of volumetric images."""

from .errors import (ConfigurationError, DimensionError, FormatError, GeometryError,
                     InputError, MssegError, OptimizationError, UsageError)
from .network import BranchSpec, Model, NetworkConfig, default_config, shape_chain
from .volume import BrainMask, LabelVolume, Volume, scale_intensities, validate_geometry
from .io import read_volume, write_volume
from .patches import extract_batch, extract_patch, extract_patches
from .training import TrainingConfig, balanced_sample, train
from .inference import dump_kernels, segment
from .metrics import MetricsReport, dice, evaluate, mean_surface_distance
from .phantom import generate_phantom
from .checkpoint import load_model, save_model

__version__ = "0.1.0"
