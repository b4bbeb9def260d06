"""Pattern binarization and SEP-Net building blocks on numpy."""
from .arch import (
    PRBSpec,
    SepModuleSpec,
    build_prb,
    build_resnet_cifar,
    build_sepnet,
    build_sepnet_module,
    count_params,
)
from .compress import binarize_filter, binarize_network, quantization_error_report, quantize8
from .graph import Network
from .store import load, save, size_report
from .train import TrainConfig, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "Network", "PRBSpec", "SepModuleSpec", "TrainConfig", "binarize_filter", "binarize_network",
    "build_prb", "build_resnet_cifar", "build_sepnet", "build_sepnet_module", "count_params", "load",
    "quantization_error_report", "quantize8", "run_pipeline", "save", "size_report",
]
