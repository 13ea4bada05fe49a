"""MX block floating-point quantization with learnable block-wise affine transforms."""

from ._kernels import BACKEND
from .calib import (
    CalibConfig,
    CalibRun,
    FusedLayer,
    Theta,
    adamw_step,
    backward,
    calibrate_layer,
    cosine_lr,
    fuse,
    fused_forward,
    loss,
    quantized_forward,
)
from .clipping import ClipBounds, ClipParams, clip, clip_gradients
from .errors import (
    DataError,
    DivergenceError,
    FileFormatError,
    MxQuantError,
    NonFiniteError,
    NumericalError,
    ShapeError,
    SingularTransformError,
)
from .formats import (
    BLOCK,
    E2M1,
    E4M3,
    FormatConfig,
    MxBlock,
    MxFormat,
    MxTensor,
    dequantize_block,
    dequantize_tensor,
    format_for_bits,
    quantize_block,
    quantize_dequantize,
    quantize_dequantize_with_mask,
    quantize_tensor,
)
from .transform import (
    DecompositionKind,
    DenseBlockDiagonal,
    GpkTransform,
    block_hadamard,
    gpk_forward,
    gpk_inverse_forward,
    madd_count,
    param_count,
)

__version__ = "0.1.0"
