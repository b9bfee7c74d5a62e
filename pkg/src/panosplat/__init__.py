"""Spherical 3D Gaussian pyramids from panorama pairs, with a cubemap splat renderer,
a spherical cost volume, tiled execution and deferred backpropagation."""

from .geometry import CameraPose, FibonacciLattice, fibonacci_lattice, lattice_count, pyramid_counts
from .gaussians import DecodeConfig, GaussianPyramid, GaussianSet, consolidate, decode_gaussians
from .render import RenderConfig, render_backward, render_dense_oracle, render_pano
from .tiling import LocalOperator, apply_untiled, run_tiled, toy_head
from .costvolume import DepthConfig, pair_depths
from .deferred import PipelineSpec, deferred_grads, monolithic_grads
from .metrics import LossConfig, psnr, ssim, ws_psnr

__version__ = "0.1.0"
