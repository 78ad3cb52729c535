"""Adaptive-template non-rigid registration of triangle meshes.

Pipeline: landmark-based rigid alignment, template adaptation (Laplacian
mesh editing or Gaussian-process posterior mean), Iterative Coherent Point
Drift, and Laplacian-regularised projection onto the scan.
"""

from .cpd import AffineCPD, CpdConfig, NonrigidCPD, cpd_affine, cpd_nonrigid
from .deform import adapt_template_lb, arap_deform, lb_soft_solve, lbrp_project
from .errors import (
    ArgumentError,
    DataError,
    MorphError,
    SolverError,
)
from .gpmm import GaussianProcessDeformation, GpKernelConfig, adapt_template_gp, gp_posterior_mean
from .icpd import ICPDRegistration, IcpdConfig, icpd_register
from .mesh import TriMesh, cotangent_laplacian, read_obj, save_obj
from .pipeline import (
    AdaptiveTemplateRegistration,
    EvaluationReport,
    PipelineConfig,
    TemplateAdapter,
    evaluate_against_ground_truth,
    register_meshes,
    run_registration,
)
from .rigid import LandmarkSpec, align_scan_to_template, procrustes
from .synthetic import SyntheticSpec, make_synthetic_case, neutral_head

__version__ = "0.1.0"
