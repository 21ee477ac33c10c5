"""Gaussian splatting scene reconstruction supervised by spike-camera streams."""

from .errors import (
    BadMagicError,
    FormatError,
    InvalidParameterError,
    SpikeSplatError,
    TruncatedFileError,
    UnsupportedFormatError,
    ValidationError,
    VersionMismatchError,
)
from .gaussian_field import CameraView, Gaussian3D, GaussianScene, Splat2D, project_gaussian, project_gaussians
from .loss_metrics import LossConfig, psnr, rendering_loss, spike_dssim, spike_l1, ssim_image
from .rasterizer import rasterize_backward, rasterize_forward, render_scene, sort_and_bin
from .spike_core import (
    NoiseConfig,
    NonUniformityMap,
    SpikeStream,
    Surrogate,
    calibrate_nonuniformity,
    simulate_stream,
    snl_backward,
    snl_forward,
    tfp_reconstruct,
)
from .trainer import SceneDataset, TrainConfig, Trainer, init_gaussians

__version__ = "0.1.0"
