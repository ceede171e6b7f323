"""Grad-CAM saliency, temporal attention inspection and PGM export."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from stam.autodiff import Tensor, backward, no_grad, ops
from stam.errors import ContractError, DimensionError, ParameterError
from stam.model.forward import features_to_logits, model_forward
from stam.model.params import StamParams

PathLike = Union[str, os.PathLike]


@dataclass
class SaliencyMap:
    """Non-negative ``[h, w]`` map, max-normalised to 1 unless it is all zero."""

    values: np.ndarray
    frame_index: int
    target_class: int
    channel_weights: np.ndarray
    vanished: bool = False  # every gradient reaching the tap layer was zero

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class TokenWeight:
    token: int
    frame: int
    row: int
    col: int
    weight: float


@dataclass
class AttentionInspection:
    averaged: np.ndarray  # [m, m]; row j holds the weights target j gives every source i
    query: int
    top: list[TokenWeight]


def _sequence(frames) -> np.ndarray:
    x = frames.data if isinstance(frames, Tensor) else np.asarray(frames, dtype=np.float64)
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4 or x.shape[-1] != 1:
        raise DimensionError(f"expected one sequence [n, H, W, 1], got {x.shape}")
    return x


def grad_cam_all(params: StamParams, frames, target_class: Optional[int] = None) -> list[SaliencyMap]:
    """Grad-CAM for every frame of one sequence from a single backward pass.

    The tap is the last backbone pooling output. Channel weights are the
    spatial means of d(logit[target]) / d(features); the map is the relu of
    the weighted channel sum, divided by its maximum when that is positive.
    ``target_class`` defaults to the predicted class. Parameter gradients are
    cleared on return.
    """
    x = _sequence(frames)
    k = params.config.n_classes
    capture: dict = {}
    with no_grad():
        model_forward(x, params, capture)
    # the tap becomes a leaf so only the post-backbone path is differentiated
    features = Tensor(capture["features"].data, requires_grad=True)
    logits = features_to_logits(features, params, batch=1)
    if target_class is None:
        target_class = int(np.argmax(logits.data[0]))
    if not 0 <= target_class < k:
        raise ContractError(f"target class {target_class} outside [0, {k})")
    backward(ops.take(logits, (0, target_class)))
    grads = features.grad
    maps = []
    for f in range(features.shape[0]):
        weights = grads[f].mean(axis=(0, 1))
        cam = np.maximum(np.tensordot(features.data[f], weights, axes=([2], [0])), 0.0)
        peak = cam.max()
        if peak > 0:
            cam = cam / peak
        maps.append(SaliencyMap(cam, f, target_class, weights, vanished=not np.any(grads[f])))
    params.zero_grad()  # parameter grads picked up on the way are not wanted
    return maps


def grad_cam(params: StamParams, frames, target_class: Optional[int] = None,
             frame_index: int = 0) -> SaliencyMap:
    """Grad-CAM map for frame ``frame_index`` of one sequence (see :func:`grad_cam_all`)."""
    n = _sequence(frames).shape[0]
    if not 0 <= frame_index < n:
        raise ContractError(f"frame index {frame_index} outside [0, {n})")
    return grad_cam_all(params, frames, target_class)[frame_index]


def upsample(values: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a 2-D map to ``size`` (pixel-centre aligned)."""
    values = np.asarray(values, dtype=np.float64)
    zoom = (size[0] / values.shape[0], size[1] / values.shape[1])
    return ndimage.zoom(values, zoom, order=1, mode="nearest", grid_mode=True)


def top_fraction_mask(values: np.ndarray, fraction: float = 0.1) -> np.ndarray:
    """Boolean mask of the ``ceil(fraction * size)`` largest entries (ties: row-major order)."""
    if not 0 < fraction <= 1:
        raise ParameterError("fraction must lie in (0, 1]")
    flat = np.asarray(values).ravel()
    count = math.ceil(fraction * flat.size)
    mask = np.zeros(flat.size, dtype=bool)
    mask[np.argsort(-flat, kind="stable")[:count]] = True
    return mask.reshape(np.shape(values))


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def saliency_iou(saliency: SaliencyMap, contact_mask: np.ndarray, fraction: float = 0.1) -> float:
    """IoU of the top-``fraction`` pixels of the upsampled map with a contact mask."""
    mask = np.asarray(contact_mask, dtype=bool)
    if mask.ndim == 3:
        mask = mask[..., 0]
    return iou(top_fraction_mask(upsample(saliency.values, mask.shape), fraction), mask)


def decode_token(token: int, feature_shape: tuple[int, int]) -> tuple[int, int, int]:
    """Token id -> (frame, row, col) under the frame-major ``m = n * h * w`` layout."""
    h, w = feature_shape
    frame, cell = divmod(int(token), h * w)
    row, col = divmod(cell, w)
    return frame, row, col


def encode_token(frame: int, row: int, col: int, feature_shape: tuple[int, int]) -> int:
    h, w = feature_shape
    return (frame * h + row) * w + col


def inspect_temporal_attention(params: StamParams, frames, query: int, k: int = 3) -> AttentionInspection:
    """Head-averaged attention map and the ``k`` sources the query token attends to most.

    Ties between equal weights go to the lower token id.
    """
    cfg = params.config
    if not cfg.has_temporal:
        raise ContractError(f"attention inspection needs a full-stam model, got {cfg.variant}")
    m = cfg.tokens
    if not 0 <= query < m:
        raise ContractError(f"query token {query} outside [0, {m})")
    if k < 1:
        raise ContractError("k must be >= 1")
    capture: dict = {}
    with no_grad():
        model_forward(_sequence(frames), params, capture)
    averaged = np.mean([a.data[0] for a in capture["attention"]], axis=0)
    row = averaged[query]
    order = np.argsort(-row, kind="stable")[:min(k, m)]
    h, w, _ = cfg.feature_shape
    top = [TokenWeight(int(t), *decode_token(t, (h, w)), float(row[t])) for t in order]
    return AttentionInspection(averaged, query, top)


def format_inspection(inspection: AttentionInspection) -> str:
    lines = ["token\tframe\trow\tcol\tweight"]
    lines += [f"{t.token}\t{t.frame}\t{t.row}\t{t.col}\t{t.weight!r}" for t in inspection.top]
    return "\n".join(lines) + "\n"


def quantize(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] to 8-bit grey levels with round-half-up: floor(v * 255 + 0.5)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path: PathLike, image: np.ndarray) -> None:
    """Binary greyscale PGM (P5, maxval 255) from a 2-D uint8 array."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise DimensionError("PGM image must be a 2-D uint8 array")
    height, width = image.shape
    with open(path, "wb") as handle:
        handle.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        handle.write(image.tobytes())


def read_pgm(path: PathLike) -> np.ndarray:
    """Parse a P5 file with maxval 255 (comment lines allowed in the header)."""
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != b"P5" or tokens[3] != b"255":
        raise ValueError(f"{path}: not an 8-bit P5 image")
    width, height = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(blob, dtype=np.uint8, count=width * height, offset=pos + 1)
    return data.reshape(height, width).copy()


def _nearest(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    rows = np.arange(size[0]) * image.shape[0] // size[0]
    cols = np.arange(size[1]) * image.shape[1] // size[1]
    return image[np.ix_(rows, cols)]


def export_heatmap(values: np.ndarray, base_frame: Optional[np.ndarray], path: PathLike,
                   upscale: int = 8) -> list[Path]:
    """Write the nearest-upscaled map to ``path`` and, given a frame, an overlay beside it.

    The overlay is 0.5 * frame + 0.5 * map at the same output size, saved as
    ``<stem>_overlay.pgm``. Returns the written paths.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise DimensionError(f"heat map must be 2-D, got {values.shape}")
    if upscale < 1:
        raise ParameterError("upscale must be >= 1")
    size = (values.shape[0] * upscale, values.shape[1] * upscale)
    heat = _nearest(values, size)
    path = Path(path)
    write_pgm(path, quantize(heat))
    written = [path]
    if base_frame is not None:
        frame = np.asarray(base_frame, dtype=np.float64)
        frame = frame[..., 0] if frame.ndim == 3 else frame
        overlay_path = path.with_name(path.stem + "_overlay" + path.suffix)
        write_pgm(overlay_path, quantize(0.5 * _nearest(frame, size) + 0.5 * heat))
        written.append(overlay_path)
    return written
