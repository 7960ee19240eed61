"""Self-supervised hyperspectral/multispectral fusion through a fixed linear-mixing bottleneck."""
from .cube import CropSpec, DataCube, load_cube, save_cube
from .metrics import MetricOptions, QualityReport, evaluate
from .harness import ExperimentConfig, RunRecord, run_ablation, run_fusion, run_grid, run_oracle

__version__ = "0.1.0"

__all__ = [
    "CropSpec",
    "DataCube",
    "ExperimentConfig",
    "MetricOptions",
    "QualityReport",
    "RunRecord",
    "evaluate",
    "load_cube",
    "run_ablation",
    "run_fusion",
    "run_grid",
    "run_oracle",
    "save_cube",
]
