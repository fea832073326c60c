"""aquant: post-training quantization with adaptive rounding borders."""

from .calibration import (
    CalibState,
    LearningRates,
    Schedule,
    UnitRuntime,
    anneal,
    blended_activation,
    calibrate,
    init_rounding_vars,
    rectified_sigmoid,
    rounding_regularizer,
    soft_quantize_weight,
)
from .error_analysis import (
    ErrorRecord,
    Theorem1Report,
    analytic_border_vec,
    brute_force_rounding_oracle,
    dot_product_error,
    elementwise_error,
    expected_ew_error,
    expected_ew_error_closed_form,
    propagated_border,
    superior_pairs,
    superior_ratio,
    verify_theorem1,
)
from .exceptions import (
    AquantError,
    ChecksumError,
    DegenerateWeightError,
    DivergenceError,
    FormatVersionError,
    ShapeError,
    StorageError,
    TruncatedBlobError,
)
from .kernels import backend_name
from .models import (
    LayerSpec,
    Model,
    attach_quantizers,
    derive_nearest_baseline,
    evaluate_model,
    forward_fp,
    forward_quant,
    forward_unit_quant,
    overhead_report,
    quantized_bias,
    quantized_weight2d,
)
from .quantizer import (
    BorderFunction,
    QuantParams,
    analytic_border,
    evaluate_border,
    quantize_activation_vector,
    quantize_border_coeffs,
    quantize_weight_nearest,
    quantize_with_border,
    sigmoid,
)
from .storage import (
    load_dataset,
    load_model,
    save_dataset,
    save_model,
    stable_hash,
)
from .synth import make_dataset, make_toy_model
from .tensors import ConvGeometry, col2img_batch, img2col, img2col_batch, reshape_filter

__version__ = "0.1.0"
