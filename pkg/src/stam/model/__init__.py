"""The STAM classifier: configuration, parameters, forward pass and checkpoints."""
from stam.model.checkpoint import load_checkpoint, save_checkpoint
from stam.model.forward import (
    backbone_forward,
    model_forward,
    multi_head_aggregate,
    predict_label,
    spatial_attention,
    temporal_attention_head,
)
from stam.model.params import (
    VARIANTS,
    ModelConfig,
    StamParams,
    count_params,
    expected_shapes,
    from_arrays,
    init_params,
)

__all__ = [
    "VARIANTS", "ModelConfig", "StamParams", "count_params", "expected_shapes", "from_arrays",
    "init_params", "backbone_forward", "spatial_attention", "temporal_attention_head",
    "multi_head_aggregate", "model_forward", "predict_label", "save_checkpoint", "load_checkpoint",
]
