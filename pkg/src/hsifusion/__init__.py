"""Hyperspectral / multispectral fusion with a two-branch multi-scale CNN in numpy."""

from .cube_io import (HyperCube, SpectralResponse, export_pseudocolor, load_spectral_response,
                      read_cube, write_cube)
from .degradation import DegradationConfig, apply_spectral_response, blur_decimate, simulate_pair
from .errors import (BadMagicError, CheckpointError, CubeFormatError, DivergenceError,
                     HSIFusionError, ShortReadError, UnsupportedVersionError, ValidationError)
from .filters import FilterConfig, InterleaveSpec, box_lowpass, build_c0, build_c1, highpass
from .metrics import MetricsReport, ergas, psnr, report, sam, ssim
from .network import NetworkConfig, count_parameters, forward, init_network
from .trainer import TrainConfig, extract_patches, split_dataset, train

__version__ = "0.1.0"
