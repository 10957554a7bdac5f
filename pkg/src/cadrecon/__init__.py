"""Object-based multiview reconstruction with a CAD model prior."""
from .config import PipelineConfig
from .geometry import KdIndex, OrientedPointCloud, Pose, TriMesh
from .pipeline import run_pipeline

__all__ = ["KdIndex", "OrientedPointCloud", "PipelineConfig", "Pose", "TriMesh", "run_pipeline"]
__version__ = "0.1.0"
