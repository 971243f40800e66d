"""Deconvolution of light-sheet microscopy volumes.

The forward model couples a spatially varying excitation sheet ``l`` with a
depth-dependent detection PSF ``h``; reconstruction minimises TV plus an
infimal-convolution Poisson-Gaussian fidelity with a primal-dual method.
"""

from .volume import Volume, load_volume, save_volume
from .optics import OpticalConfig, PsfPair, ZernikeCoeffs, detection_psf, lightsheet_profile
from .forward import ConvolutionOperator, LightsheetOperator, estimate_op_norm
from .solver import MethodVariant, SolverParams, build_problem, pdhg_run
from .phantom import NoiseSpec, corrupt, make_beads, make_cells, make_steps, simulate
from .metrics import l2_error, ssim3

__version__ = "0.1.0"
