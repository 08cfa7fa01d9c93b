"""Content-aware dynamic sparse masking for attention, on CPU.

Keys are scored from their own value rows, each query row keeps its
top-w causal keys, and the attention kernel skips whole key blocks that
end up empty. Skipping is lossless: dropped cells have exactly zero
probability and exactly zero gradient. The package also ships an
independent dense oracle, a hand-derived backward pass, an associative
recall training harness, and a benchmarking CLI.
"""

from .core import (
    AttnActivations,
    AttnConfig,
    AttnWeights,
    DecodeState,
    SparseMask,
    build_mask,
    concat_kv,
    decode_step,
    full_forward,
    init_decode,
    init_weights,
    mask_scores,
    project_qkv,
    sparse_attention_forward,
    validate_mask,
)
from .errors import (
    CapacityError,
    CheckpointFormatError,
    ConfigError,
    DegenerateRowError,
    DimensionError,
    DynmaskError,
    MaskConsistencyError,
    MaskScoreOverflowError,
    TrainingDivergedError,
)
from .grad import GradBundle, SkipAuditReport, backward, grad_skip_audit
from .bench import BenchCase, BenchResult, default_cases, run_case
from .mqar import (
    ModelConfig,
    MqarData,
    MqarSpec,
    MqarSplit,
    TinyModel,
    build_model,
    evaluate,
    generate_mqar,
    layer_masks,
    load_checkpoint,
    read_checkpoint_header,
    save_checkpoint,
    train,
)
from .oracle import brute_force_topw, dense_forward, finite_diff_grad
from .verify import run_verify

__version__ = "0.1.0"
