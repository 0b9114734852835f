"""Object-level change detection and TSDF mapping for scenes whose objects occasionally move."""
from .change_state import GaussianBetaState, MeasurementFeature, bayesian_update, should_prune
from .config import PipelineConfig, load_config
from .evaluation import compare_maps, run_replay
from .pipeline import MapState, process_frame
from .tsdf import TsdfGrid, build_local_tsdf, integrate_cloud, tsdf_change

__version__ = "0.1.0"

__all__ = [
    "GaussianBetaState", "MeasurementFeature", "bayesian_update", "should_prune", "PipelineConfig",
    "load_config", "compare_maps", "run_replay", "MapState", "process_frame", "TsdfGrid", "build_local_tsdf", "integrate_cloud",
    "tsdf_change", "__version__",
]
