"""Point cloud registration from single correspondences of local quadric patches."""

from qreg.core import Correspondence, Correspondences, PointCloud, RigidTransform, kabsch_weighted
from qreg.errors import NoEligibleCorrespondences, ParseError, QRegError
from qreg.estimator import (
    EstimatorConfig,
    RegistrationReport,
    compute_patches,
    count_inliers,
    kabsch_register,
    local_optimize,
    pose_loss,
    pose_rmse,
    qreg_register,
    ransac_register,
)
from qreg.metrics import evaluate_pair, rre, rte, summarize
from qreg.quadric import QuadricPatch, build_patch, fit_quadric
from qreg.synth import SceneSpec, generate, perturb_transform

__version__ = "0.1.0"

__all__ = [
    "Correspondence",
    "Correspondences",
    "EstimatorConfig",
    "NoEligibleCorrespondences",
    "ParseError",
    "PointCloud",
    "QRegError",
    "QuadricPatch",
    "RegistrationReport",
    "RigidTransform",
    "SceneSpec",
    "build_patch",
    "compute_patches",
    "count_inliers",
    "evaluate_pair",
    "fit_quadric",
    "generate",
    "kabsch_register",
    "kabsch_weighted",
    "local_optimize",
    "perturb_transform",
    "pose_loss",
    "pose_rmse",
    "qreg_register",
    "ransac_register",
    "rre",
    "rte",
    "summarize",
]
