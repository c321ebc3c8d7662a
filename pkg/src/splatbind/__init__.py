"""Mesh-bound 3D Gaussian avatars: binding, splatting, error-guided densification and frame clustering."""

from .density_control import AdcConfig, DensifyReport, DensityState, apply_densification, densify_step
from .error_metrics import ErrorTracker, fused_error_map, gaussian_avg_error
from .errors import DegenerateFaceError, RenderStateError, SingularCovarianceError, ValidationError
from .mesh_binding import FrameDescriptor, TriMesh, lbs_deform, load_obj
from .splat_core import DeformedParams, GaussianPrimitive, GaussianSet
from .splatter import Camera, render, render_backward
from .temporal_clustering import ClusterPlan, TrainingSchedule, cluster_frames, make_schedule
from .uv_atlas import UVAtlas, rasterize_uv, sample_uv

__version__ = "0.1.0"
