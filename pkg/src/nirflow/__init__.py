"""RGB-NIR optical flow with a per-pixel detail-aware data weight, dense NIR
ground-truth construction, and flow evaluation statistics."""

__version__ = "0.1.0"

from .imagecore import (UNKNOWN_FLOW, DimensionMismatchError, FlowField, GradientField,
                        ImageFormatError, MultispectralImage, bicubic_sample, load_multispectral,
                        read_flow, sample_bicubic, sobel_gradient, write_flow)
from .weightmap import WeightMap, compute_lambda
from .pyramid import Pyramid, build_pyramid, rescale_flow
from .flowsolver import (EnergyBreakdown, MissingChannelError, SolverParams, assemble_system,
                         compute_flow, evaluate_energy, sor_solve)
from .gtpipeline import (DescriptorField, GtConfig, border_unsupported, dense_descriptor,
                         downsample_flow, fb_consistency, joint_entropy, lk_subpixel, match_window,
                         run_gt)
from .evalmetrics import (ErrorMap, ErrorStats, SequenceStats, accumulate_sequence, angle_error,
                          compute_stats, endpoint_error, render_error_map, render_flow,
                          write_report)

__all__ = [name for name in dir() if not name.startswith("_")]
