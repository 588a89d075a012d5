"""Product-quantized convolution acceleration with VQ and sparse-dictionary codebooks."""
from .accel import (MacReport, OpCounter, acceleration_report, accelerated_forward, mac_count_dense,
                    mac_count_quantized, solve_budget)
from .dictionary import DlCodebook, dl_learn, omp
from .errors import (ConfigError, DataError, InfeasibleBudgetError, MissingBlobError, PQAccelError,
                     SizeMismatchError, ValidationError, VersionMismatchError)
from .kmeans import VqCodebook, kmeans, vq_quantize
from .metrics import (Box, ErrorBreakdown, classify_errors, iou, match_detections,
                      precision_recall_map)
from .model import Model, Node, OpaqueOp
from .model_io import load_model, models_equal, save_model
from .pipeline import StageResult, StageSchedule, progressive_accelerate, toy_finetune
from .quantizer import QuantizedLayer, QuantScheme, quantization_error, quantize_layer, reconstruct_weights
from .tensor import ConvLayer, SubspacePartition, conv_forward, partition_kernels

__version__ = "0.1.0"

__all__ = [
    "Box", "ConfigError", "ConvLayer", "DataError", "DlCodebook", "ErrorBreakdown", "InfeasibleBudgetError",
    "MacReport", "MissingBlobError", "Model", "Node", "OpCounter", "OpaqueOp", "PQAccelError",
    "QuantScheme", "QuantizedLayer", "SizeMismatchError", "StageResult", "StageSchedule", "SubspacePartition",
    "ValidationError", "VersionMismatchError", "VqCodebook", "accelerated_forward", "acceleration_report",
    "classify_errors", "conv_forward", "dl_learn", "iou", "kmeans", "load_model", "mac_count_dense",
    "mac_count_quantized", "match_detections", "models_equal", "omp", "partition_kernels",
    "precision_recall_map", "progressive_accelerate", "quantization_error", "quantize_layer",
    "reconstruct_weights", "save_model", "solve_budget", "toy_finetune", "vq_quantize",
]
