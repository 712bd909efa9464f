"""Outlier-suppressed vector-quantized KV cache with a fused LUT decode-attention path."""
from .analysis import (
    ABLATION_MODES,
    DistributionReport,
    Lemma1Result,
    distribution_report,
    excess_kurtosis,
    lemma1_check,
    outlier_ratio,
    transform_ablation,
)
from .attention import (
    AttentionOutput,
    LookupTable,
    Partial,
    TileConfig,
    Traffic,
    build_lut,
    dequantize_then_attend,
    fused_decode_attention,
    predicted_traffic,
    reference_attention,
    relative_error,
    split_reduce,
    traffic_report,
)
from .errors import (
    CalibrationError,
    ConfigError,
    CorruptionError,
    DegenerateInputError,
    EmptyInputError,
    FormatError,
    InsufficientDataError,
    ShapeError,
    SizeError,
    SmoothVQError,
)
from .kvcache import CacheConfig, QuantizedKVCache, append, materialize, prefill
from .transform import (
    SmoothingFactors,
    TransformConfig,
    calibrate_smoothing,
    hadamard_apply,
    transform_keys,
    transform_query,
    walsh_hadamard_matrix,
)
from .vq import (
    Codebook,
    Footprint,
    VQConfig,
    avg_bits,
    decode,
    encode,
    kmeans_train,
    lossless_codebook,
    memory_footprint,
    nearest_centroid,
    pack_codes,
    parse_kv_configs,
    unpack_codes,
)

__version__ = "0.1.0"
