"""Enhancement network: attention-map generator, local/global blocks, fusion."""

from .blocks import (
    AxialAttention,
    ChannelLayerNorm,
    DualGateFeedForward,
    ExposureAwareFusion,
    GlobalEnhancementBlock,
    GuidedAttentionMapGenerator,
    LocalEnhancementBlock,
    MultiHeadSelfAttention,
    PositionalBias,
    TransformerBlock,
)
from .checkpoint import (
    apply_arrays,
    load_checkpoint,
    read_container,
    save_checkpoint,
    write_container,
)
from .config import ModelConfig
from .network import (
    EnhancedOutput,
    MixedExposureFormer,
    count_parameters,
    eaf_blend,
    guided_input,
    init_model,
    luminance,
    parameter_breakdown,
)

__all__ = [
    "AxialAttention",
    "ChannelLayerNorm",
    "DualGateFeedForward",
    "EnhancedOutput",
    "ExposureAwareFusion",
    "GlobalEnhancementBlock",
    "GuidedAttentionMapGenerator",
    "LocalEnhancementBlock",
    "MixedExposureFormer",
    "ModelConfig",
    "MultiHeadSelfAttention",
    "PositionalBias",
    "TransformerBlock",
    "apply_arrays",
    "count_parameters",
    "eaf_blend",
    "guided_input",
    "init_model",
    "load_checkpoint",
    "luminance",
    "parameter_breakdown",
    "read_container",
    "save_checkpoint",
    "write_container",
]
