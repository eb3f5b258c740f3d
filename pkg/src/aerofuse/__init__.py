"""aerofuse: incremental cluster-based aerial mapping.

Streamed survey frames are grouped into overlap clusters, each refined
by a robust three-view adjustment chained through shared boundary
frames; sparse anchor depths are densified per representative frame and
fused into a TSDF volume, from which the point cloud, DSM and
orthomosaic products fall out.
"""

from ._kernels import backend_name
from .geometry import CameraIntrinsics, Frame, Pose
from .pipeline import PipelineConfig, PipelineResult, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "Frame",
    "PipelineConfig",
    "PipelineResult",
    "Pose",
    "backend_name",
    "run_pipeline",
    "__version__",
]
