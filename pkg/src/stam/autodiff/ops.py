"""Differentiable primitives.

Spatial operations take channel-last volumes ``[h, w, c]`` and optionally a
single leading batch axis ``[N, h, w, c]``; the batch axis is pure vectorisation
and every sample is computed independently.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from stam.autodiff.tensor import Tensor, as_tensor
from stam.errors import ContractError, DimensionError, ParameterError

__all__ = [
    "conv2d", "pool2d", "channel_pool", "matmul", "transpose", "softmax_rows",
    "activation", "sigmoid", "relu", "elementwise", "add", "mul", "reshape",
    "concat", "reshape_concat", "sum", "mean", "scale", "affine", "mean_stack", "linear",
    "cross_entropy", "take",
]


def _as_batch(x: np.ndarray, name: str = "input") -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"{name} must be [h,w,c] or [N,h,w,c], got shape {x.shape}")


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # [N,Hp,Wp,C] -> [N,ho,wo,k,k,C]; column order (ki, kj, c) matches kernel.reshape(k*k*C, -1)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    return win.transpose(0, 1, 2, 4, 5, 3)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation.

    ``x`` is ``[h, w, c_in]`` (or batched), ``kernel`` is ``[k, k, c_in, c_out]``
    and ``bias`` is ``[c_out]``.
    """
    if stride < 1 or padding < 0:
        raise ParameterError(f"need stride >= 1 and padding >= 0, got {stride}, {padding}")
    xb, squeeze = _as_batch(x.data)
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise DimensionError(f"kernel must be [k,k,c_in,c_out], got {kernel.shape}")
    k, _, cin, cout = kernel.shape
    if xb.shape[-1] != cin:
        raise DimensionError(f"input has {xb.shape[-1]} channels, kernel expects {cin}")
    if bias.shape != (cout,):
        raise DimensionError(f"bias must be [{cout}], got {bias.shape}")
    n, h, w, _ = xb.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if k > hp or k > wp:
        raise DimensionError(f"kernel {k} larger than padded input {hp}x{wp}")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1

    xp = np.pad(xb, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xb
    cols = _im2col(xp, k, stride).reshape(n * ho * wo, k * k * cin)
    k2 = kernel.data.reshape(k * k * cin, cout)
    out = (cols @ k2 + bias.data).reshape(n, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(n * ho * wo, cout)
        dk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        db = g2.sum(axis=0) if bias.requires_grad else None
        dx = None
        if x.requires_grad and stride == 1 and padding < k:
            # full correlation of the output grad with the flipped, channel-swapped kernel
            q = k - 1 - padding
            gp = np.pad(g, ((0, 0), (q, q), (q, q), (0, 0))) if q else g
            gcols = _im2col(gp, k, 1).reshape(n * h * w, k * k * cout)
            flipped = kernel.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
            dx = (gcols @ flipped).reshape(n, h, w, cin)
            dx = dx[0] if squeeze else dx
        elif x.requires_grad:
            dcols = (g2 @ k2.T).reshape(n, ho, wo, k, k, cin)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
            dx = dxp[:, padding:padding + h, padding:padding + w, :]
            dx = dx[0] if squeeze else dx
        return dx, dk, db

    return Tensor._from_op(out[0] if squeeze else out, (x, kernel, bias),
                           _unsqueezed(backward, squeeze), "conv2d")


def _unsqueezed(backward, squeeze: bool):
    if not squeeze:
        return backward
    return lambda g: backward(g[None])


def pool2d(x: Tensor, window: int, stride: int, mode: str = "max") -> Tensor:
    """Per-channel max or mean pooling over ``window x window`` patches.

    In max mode the gradient goes to the first maximum in row-major scan
    order within each window.
    """
    if window < 1 or stride < 1:
        raise ParameterError(f"window and stride must be >= 1, got {window}, {stride}")
    if mode not in ("max", "avg"):
        raise ParameterError(f"unknown pooling mode {mode!r}")
    xb, squeeze = _as_batch(x.data)
    n, h, w, c = xb.shape
    if window > h or window > w:
        raise DimensionError(f"window {window} larger than input {h}x{w}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    if window == stride and h % window == 0 and w % window == 0:
        return _tiled_pool(x, xb, window, mode, squeeze)
    win = sliding_window_view(xb, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    flat = win.reshape(n, ho, wo, c, window * window)
    if mode == "max":
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    else:
        arg = None
        out = flat.mean(axis=-1)

    def backward(g):
        dx = np.zeros_like(xb)
        for i in range(window):
            for j in range(window):
                if mode == "max":
                    contrib = np.where(arg == i * window + j, g, 0.0)
                else:
                    contrib = g / (window * window)
                dx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += contrib
        return (dx[0] if squeeze else dx,)

    return Tensor._from_op(out[0] if squeeze else out, (x,), _unsqueezed(backward, squeeze),
                           f"pool2d_{mode}")


def _tiled_pool(x: Tensor, xb: np.ndarray, k: int, mode: str, squeeze: bool) -> Tensor:
    # non-overlapping windows that tile the input exactly: reduce over a reshape, no copies
    n, h, w, c = xb.shape
    ho, wo = h // k, w // k
    blocks = xb.reshape(n, ho, k, wo, k, c)
    out = blocks.max(axis=(2, 4)) if mode == "max" else blocks.mean(axis=(2, 4))

    def backward(g):
        if mode == "avg":
            d = np.broadcast_to((g / (k * k))[:, :, None, :, None, :], blocks.shape)
            dx = np.ascontiguousarray(d).reshape(n, h, w, c)
            return (dx[0] if squeeze else dx,)
        hit = blocks == out[:, :, None, :, None, :]
        taken = np.zeros((n, ho, wo, c), dtype=bool)
        d = np.zeros(blocks.shape)
        for i in range(k):  # row-major scan keeps only the first maximum
            for j in range(k):
                first = hit[:, :, i, :, j, :] & ~taken
                taken |= first
                d[:, :, i, :, j, :] = np.where(first, g, 0.0)
        dx = d.reshape(n, h, w, c)
        return (dx[0] if squeeze else dx,)

    return Tensor._from_op(out[0] if squeeze else out, (x,), _unsqueezed(backward, squeeze),
                           f"pool2d_{mode}")


def channel_pool(x: Tensor, mode: str = "max") -> Tensor:
    """Reduce the last (channel) axis to size 1 by max or mean."""
    if mode not in ("max", "avg"):
        raise ParameterError(f"unknown pooling mode {mode!r}")
    if x.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError(f"malformed input shape {x.shape}")
    c = x.shape[-1]
    if mode == "max":
        arg = x.data.argmax(axis=-1)[..., None]
        out = np.take_along_axis(x.data, arg, axis=-1)

        def backward(g):
            dx = np.zeros_like(x.data)
            np.put_along_axis(dx, arg, g, axis=-1)
            return (dx,)
    else:
        out = x.data.mean(axis=-1, keepdims=True)

        def backward(g):
            return (np.broadcast_to(g / c, x.shape),)

    return Tensor._from_op(out, (x,), backward, f"channel_pool_{mode}")


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; ``a`` may carry a leading batch axis."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > a.ndim or (b.ndim == a.ndim and a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"unsupported batch layout: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        db = None
        if b.requires_grad:
            db = _sum_to(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return da, db

    return Tensor._from_op(out, (a, b), backward, "matmul")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise DimensionError(f"transpose needs >= 2 axes, got {x.shape}")
    return Tensor._from_op(np.swapaxes(x.data, -1, -2), (x,),
                           lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row maximum."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(y, (x,), backward, "softmax")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        # tanh form avoids overflow in exp for large |x|
        y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
        return Tensor._from_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")
    if kind == "relu":
        on = x.data > 0
        return Tensor._from_op(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,), "relu")
    raise ParameterError(f"unknown activation {kind!r}")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Elementwise ``mul`` or ``add``.

    ``b`` must either match ``a`` exactly or match it with a channel axis of 1,
    in which case it is broadcast across channels.
    """
    if kind not in ("mul", "add"):
        raise ParameterError(f"unknown elementwise kind {kind!r}")
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        reduce_b = False
    elif a.ndim == b.ndim and a.shape[:-1] == b.shape[:-1] and b.shape[-1] == 1:
        reduce_b = True
    else:
        raise DimensionError(f"cannot broadcast {b.shape} onto {a.shape}")

    def fold(g):
        return g.sum(axis=-1, keepdims=True) if reduce_b else g

    if kind == "mul":
        out = a.data * b.data

        def backward(g):
            da = g * b.data if a.requires_grad else None
            db = fold(g * a.data) if b.requires_grad else None
            return da, db
    else:
        out = a.data + b.data

        def backward(g):
            return (g if a.requires_grad else None), (fold(g) if b.requires_grad else None)

    return Tensor._from_op(out, (a, b), backward, kind)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "mul")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size or any(s < 0 for s in shape):
        raise DimensionError(f"cannot reshape {x.shape} into {shape}")
    src = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def concat(inputs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not inputs:
        raise DimensionError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in inputs], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in inputs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tuple(inputs), backward, "concat")


def reshape_concat(inputs: Sequence[Tensor], target: Sequence[int], axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` and reshape the result to ``target``."""
    return reshape(concat(inputs, axis=axis), target)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return Tensor._from_op(np.asarray(x.data.sum()), (x,),
                           lambda g: (np.full(shape, float(g)),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return Tensor._from_op(np.asarray(x.data.mean()), (x,),
                           lambda g: (np.full(shape, float(g) / n),), "mean")


def scale(x: Tensor, factor: float) -> Tensor:
    return Tensor._from_op(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def affine(x: Tensor, factor: float, shift: float = 0.0) -> Tensor:
    """``(x + shift) * factor`` with scalar constants."""
    return Tensor._from_op((x.data + shift) * factor, (x,), lambda g: (g * factor,), "affine")


def mean_stack(inputs: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of equally shaped tensors."""
    if not inputs:
        raise ContractError("mean_stack needs at least one tensor")
    shape = inputs[0].shape
    if any(t.shape != shape for t in inputs):
        raise DimensionError("mean_stack inputs differ in shape")
    k = len(inputs)
    # centred form x0 + sum(x_i - x0) / k returns x0 bit-exactly when all inputs agree
    base = inputs[0].data
    acc = np.zeros_like(base)
    for t in inputs[1:]:
        acc += t.data - base
    out = base + acc / k
    return Tensor._from_op(out, tuple(inputs), lambda g: (g / k,) * k, "mean_stack")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` on row vectors ``[..., d_in]``."""
    if x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear shapes {x.shape}, {weight.shape}, {bias.shape}")
    out = x.data @ weight.data + bias.data

    def backward(g):
        dx = g @ weight.data.T if x.requires_grad else None
        xs = x.data.reshape(-1, x.shape[-1])
        gs = g.reshape(-1, g.shape[-1])
        dw = xs.T @ gs if weight.requires_grad else None
        db = gs.sum(axis=0) if bias.requires_grad else None
        return dx, dw, db

    return Tensor._from_op(out, (x, weight, bias), backward, "linear")


def take(x: Tensor, index: tuple) -> Tensor:
    """Basic (non-fancy) indexing; the gradient is scattered back to the slice."""
    out = np.array(x.data[index])

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[index] = g
        return (dx,)

    return Tensor._from_op(out, (x,), backward, "take")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the rows of ``logits``."""
    z = logits.data if logits.ndim == 2 else logits.data[None]
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape != (z.shape[0],) or not np.issubdtype(labels.dtype, np.integer):
        raise ContractError(f"need one integer label per row, got {labels!r}")
    k = z.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"label out of range [0, {k})")
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = np.mean(lse - z[rows, labels])

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        d = p * (float(g) / z.shape[0])
        return (d if logits.ndim == 2 else d[0],)

    return Tensor._from_op(np.asarray(loss), (logits,), backward, "cross_entropy")
