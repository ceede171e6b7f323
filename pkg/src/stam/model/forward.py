"""Forward computation for the three model variants."""
from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np

from stam.autodiff import Tensor, ops
from stam.errors import ContractError, DimensionError
from stam.model.params import (
    SPATIAL_KERNEL,
    ConvBlock,
    SpatialAttentionParams,
    StamParams,
    TemporalHeadParams,
)

FrameInput = Union[Tensor, np.ndarray, Sequence[Union[Tensor, np.ndarray]]]


def backbone_forward(frame: Tensor, blocks: Sequence[ConvBlock]) -> Tensor:
    """conv3x3 -> relu -> maxpool2x2 per block; returns the last pooling output.

    Accepts one frame ``[H, W, 1]`` or a stack ``[N, H, W, 1]``.
    """
    x = frame
    for block in blocks:
        x = ops.conv2d(x, block.kernel, block.bias, stride=1, padding=1)
        x = ops.relu(x)
        x = ops.pool2d(x, window=2, stride=2, mode="max")
    return x


def spatial_attention(features: Tensor, params: SpatialAttentionParams) -> tuple[Tensor, Tensor]:
    """Gate ``features`` by sigmoid(conv7x7([channel-max; channel-avg])).

    Returns the gated volume and the ``[..., h, w, 1]`` attention map.
    """
    descriptor = ops.concat([ops.channel_pool(features, "max"), ops.channel_pool(features, "avg")],
                            axis=-1)
    logits = ops.conv2d(descriptor, params.kernel, params.bias, stride=1,
                        padding=SPATIAL_KERNEL // 2)
    gate = ops.sigmoid(logits)
    return ops.mul(features, gate), gate


def temporal_attention_head(tokens: Tensor, head: TemporalHeadParams) -> tuple[Tensor, Tensor]:
    """One temporal attention head over ``[m, c]`` (or ``[B, m, c]``) tokens.

    With q = tokens @ wq and k = tokens @ wk, the score s[i, j] = q_i . k_j is
    normalised over the source index i separately for every target j, so the
    returned attention matrix ``A[j, i]`` has unit row sums. Output token j is
    ``sum_i A[j, i] * (tokens_i @ wv) + tokens_j``.
    """
    if tokens.ndim < 2 or tokens.shape[-2] == 0:
        raise ContractError(f"need a non-empty token matrix, got shape {tokens.shape}")
    q = ops.matmul(tokens, head.wq)
    k = ops.matmul(tokens, head.wk)
    v = ops.matmul(tokens, head.wv)
    scores = ops.matmul(k, ops.transpose(q))  # [j, i] = k_j . q_i = s_ij
    attn = ops.softmax_rows(scores)
    return ops.add(ops.matmul(attn, v), tokens), attn


def multi_head_aggregate(head_outputs: Sequence[Tensor]) -> Tensor:
    """Elementwise mean over heads."""
    if not head_outputs:
        raise ContractError("need at least one head output")
    return ops.mean_stack(head_outputs)


def _frames_tensor(frames: FrameInput) -> tuple[Tensor, bool]:
    """Normalise input to a ``[B, n, H, W, 1]`` tensor; flag whether it was unbatched."""
    if isinstance(frames, Tensor):
        x, single = frames, frames.ndim == 4
    elif isinstance(frames, np.ndarray):
        x, single = Tensor(frames), frames.ndim == 4
    else:
        arrays = [f.data if isinstance(f, Tensor) else np.asarray(f, dtype=np.float64) for f in frames]
        if not arrays:
            raise ContractError("empty frame list")
        x, single = Tensor(np.stack(arrays)), True
    if single:
        x = ops.reshape(x, (1,) + x.shape)
    if x.ndim != 5 or x.shape[-1] != 1:
        raise DimensionError(f"frames must be [n,H,W,1] or [B,n,H,W,1], got {x.shape}")
    return x, single


def classify(flat: Tensor, params: StamParams) -> Tensor:
    x = flat
    last = len(params.classifier) - 1
    for i, (weight, bias) in enumerate(params.classifier):
        x = ops.linear(x, weight, bias)
        if i < last:
            x = ops.relu(x)
    return x


def features_to_logits(features: Tensor, params: StamParams, batch: int,
                       capture: Optional[dict] = None) -> Tensor:
    """Everything after the backbone: attention (per variant), flatten, classifier.

    ``features`` is the backbone output for ``batch * n`` frames, ``[B*n, h, w, c]``.
    """
    cfg = params.config
    h, w, c = cfg.feature_shape
    x = features
    if cfg.has_spatial:
        x, gate = spatial_attention(x, params.spatial)
        if capture is not None:
            capture["gated"] = x
            capture["spatial_map"] = gate
    if cfg.has_temporal:
        tokens = ops.reshape(x, (batch, cfg.n_frames * h * w, c))
        outputs, maps = [], []
        for head in params.heads:
            out, attn = temporal_attention_head(tokens, head)
            outputs.append(out)
            maps.append(attn)
        x = multi_head_aggregate(outputs)
        if capture is not None:
            capture["tokens"] = tokens
            capture["attention"] = maps
            capture["temporal"] = x
    flat = ops.reshape(x, (batch, cfg.n_frames * h * w * c))
    return classify(flat, params)


def model_forward(frames: FrameInput, params: StamParams, capture: Optional[dict] = None) -> Tensor:
    """Class logits for one sequence (``[K]``) or a batch of sequences (``[B, K]``).

    ``frames`` is a list of ``n`` ``[H, W, 1]`` frames, an ``[n, H, W, 1]`` array,
    or a batch ``[B, n, H, W, 1]``. When ``capture`` is a dict, intermediate
    tensors are stored in it (``features``, ``spatial_map``, ``attention`` ...).
    """
    cfg = params.config
    x, single = _frames_tensor(frames)
    batch, n, height, width, _ = x.shape
    if n != cfg.n_frames:
        raise ContractError(f"model configured for n={cfg.n_frames} frames, got {n}")
    if (height, width) != cfg.frame_size:
        raise DimensionError(f"model expects {cfg.frame_size} frames, got {(height, width)}")
    stacked = ops.reshape(x, (batch * n, height, width, 1))
    if cfg.input_offset != 0.0 or cfg.input_scale != 1.0:
        stacked = ops.affine(stacked, cfg.input_scale, -cfg.input_offset)
    features = backbone_forward(stacked, params.backbone)
    if capture is not None:
        capture["features"] = features
    logits = features_to_logits(features, params, batch, capture)
    return ops.reshape(logits, (cfg.n_classes,)) if single else logits


def predict_label(logits: np.ndarray) -> np.ndarray:
    """Arg-max over the last axis; ties resolve to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=-1)
