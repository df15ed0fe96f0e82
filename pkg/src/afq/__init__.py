"""Post-training quantization of transformer blocks through learned
invertible affine transforms that fuse back into the weights."""

from .block import BlockMode, BlockParams, PlacementConfig, block_forward, block_loss
from .linalg import (
    InversionDiagnostics,
    PrecisionScheme,
    SingularMatrixError,
    frobenius_norm_sq,
    is_strictly_diagonally_dominant,
    lu_invert,
    matmul,
    relative_fro_error,
)
from .optimize import (
    OptimizationDiverged,
    OptimizationReport,
    OptimizerConfig,
    alpha_sweep,
    optimize_block,
    optimize_model,
)
from .quant import QuantConfig, QuantParams, compute_qparams, fake_quant, quantize_export
from .tape import Graph, check_gradient
from .transform import (
    AffineTransform,
    MaskSchedule,
    alpha_bound,
    effective_matrix,
    gradual_mask,
    init_diagonal,
    init_shift,
)
from .fusion import FusedBlock, fuse_block, fused_forward, merge_error_experiment, verify_fusion

__all__ = [
    "AffineTransform",
    "BlockMode",
    "BlockParams",
    "FusedBlock",
    "Graph",
    "InversionDiagnostics",
    "MaskSchedule",
    "OptimizationDiverged",
    "OptimizationReport",
    "OptimizerConfig",
    "PlacementConfig",
    "PrecisionScheme",
    "QuantConfig",
    "QuantParams",
    "SingularMatrixError",
    "alpha_bound",
    "alpha_sweep",
    "block_forward",
    "block_loss",
    "check_gradient",
    "compute_qparams",
    "effective_matrix",
    "fake_quant",
    "frobenius_norm_sq",
    "fuse_block",
    "fused_forward",
    "gradual_mask",
    "init_diagonal",
    "init_shift",
    "is_strictly_diagonally_dominant",
    "lu_invert",
    "matmul",
    "merge_error_experiment",
    "optimize_block",
    "optimize_model",
    "quantize_export",
    "relative_fro_error",
    "verify_fusion",
]
