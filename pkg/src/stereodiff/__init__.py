"""Metric depth from a calibrated stereo pair by reprojection-guided diffusion sampling."""

from .diffusion import GuidanceConfig, NoiseSchedule, ensemble_estimate, sample_metric_depth
from .errors import StereoDiffError
from .estimate import EstimateSettings, estimate
from .metric_param import ScaleShiftParams, global_scale_search, scale_shift_search
from .photometric import GeoLossConfig, geo_loss
from .scene import CameraView, DepthMap, Image, ViewPair
from .warp import backward_warp

__version__ = "0.1.0"
