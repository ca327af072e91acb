"""Differentiable operators used by the network.

Convolutions loop over kernel offsets and contract the channel axis with
one matrix product per offset. The loop order is fixed, so every output
element is reduced in the same order on every run.
"""
from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from .errors import DataError, DimensionError, GeometryError
from .tensor import Tensor

__all__ = [
    "conv2d",
    "conv3d",
    "conv_transpose2d",
    "maxpool2d",
    "relu",
    "concat",
    "nearest_upsample2d",
    "weighted_masked_cross_entropy",
    "conv_output_size",
]

_AXIS_NAMES = {2: ("H", "W"), 3: ("D", "H", "W")}


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _check_conv_args(x: Tensor, w: Tensor, b: Tensor | None, nd: int, op: str) -> None:
    if x.ndim != nd + 2:
        raise DimensionError(f"{op}: input must have {nd + 2} axes (B, C, {', '.join(_AXIS_NAMES[nd])}), got {x.shape}")
    if w.ndim != nd + 2:
        raise DimensionError(f"{op}: weight must have {nd + 2} axes, got {w.shape}")
    if b is not None and b.ndim != 1:
        raise DimensionError(f"{op}: bias must be 1-D, got {b.shape}")


def _offset_slices(offset, start_scale: int, step: int, count: Sequence[int]):
    return tuple(slice(o * start_scale, o * start_scale + step * (n - 1) + 1, step) for o, n in zip(offset, count))


def _conv_nd(x: Tensor, w: Tensor, b: Tensor | None, stride: int, padding: int, dilation: int, nd: int, op: str) -> Tensor:
    _check_conv_args(x, w, b, nd, op)
    if stride < 1 or dilation < 1 or padding < 0:
        raise GeometryError(f"{op}: need stride >= 1, dilation >= 1, padding >= 0")
    batch, cin = x.shape[:2]
    cout = w.shape[0]
    if w.shape[1] != cin:
        raise DimensionError(f"{op}: axis Cin mismatch, input has {cin} channels but weight expects {w.shape[1]}")
    if b is not None and b.shape[0] != cout:
        raise DimensionError(f"{op}: axis Cout mismatch, weight has {cout} filters but bias has {b.shape[0]}")
    spatial = x.shape[2:]
    kernel = w.shape[2:]
    out_sp = tuple(conv_output_size(s, k, stride, padding, dilation) for s, k in zip(spatial, kernel))
    for name, n in zip(_AXIS_NAMES[nd], out_sp):
        if n < 1:
            raise GeometryError(f"{op}: non-positive output extent on axis {name} for input {spatial}, kernel {kernel}")

    # channel-major copy: (Cin, B, *padded)
    xt = np.moveaxis(x.data, 1, 0)
    if padding:
        xt = np.pad(xt, [(0, 0), (0, 0)] + [(padding, padding)] * nd)
    xt = np.ascontiguousarray(xt)
    wd = w.data
    offsets = list(itertools.product(*(range(k) for k in kernel)))
    n_out = batch * int(np.prod(out_sp))

    out = np.zeros((cout, batch) + out_sp, dtype=x.dtype)
    for off in offsets:
        sl = (slice(None), slice(None)) + _offset_slices(off, dilation, stride, out_sp)
        out += np.tensordot(wd[(slice(None), slice(None)) + off], xt[sl], axes=([1], [0]))
    out = np.moveaxis(out, 0, 1)
    if b is not None:
        out = out + b.data.reshape((1, cout) + (1,) * nd)

    def backward(g: np.ndarray):
        gt = np.ascontiguousarray(np.moveaxis(g, 1, 0))
        gm = gt.reshape(cout, n_out)
        gx = np.zeros_like(xt) if x.requires_grad else None
        gw = np.zeros_like(wd) if w.requires_grad else None
        for off in offsets:
            sl = (slice(None), slice(None)) + _offset_slices(off, dilation, stride, out_sp)
            widx = (slice(None), slice(None)) + off
            if gw is not None:
                gw[widx] = gm @ xt[sl].reshape(cin, n_out).T
            if gx is not None:
                gx[sl] += np.tensordot(wd[widx], gt, axes=([0], [0]))
        if gx is not None:
            if padding:
                gx = gx[(slice(None), slice(None)) + (slice(padding, -padding),) * nd]
            gx = np.ascontiguousarray(np.moveaxis(gx, 0, 1))
        gb = g.sum(axis=(0,) + tuple(range(2, nd + 2))) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._from_op(out, parents, backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2D cross-correlation over (B, Cin, H, W) with weight (Cout, Cin, kH, kW)."""
    return _conv_nd(x, weight, bias, stride, padding, dilation, 2, "conv2d")


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """3D cross-correlation over (B, Cin, D, H, W) with weight (Cout, Cin, kD, kH, kW)."""
    return _conv_nd(x, weight, bias, stride, padding, dilation, 3, "conv3d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Adjoint of a strided conv2d, without padding or output padding.

    weight has shape (Cin, Cout, kH, kW); output extent per axis is
    ``(n - 1) * stride + k``.
    """
    nd = 2
    op = "conv_transpose2d"
    _check_conv_args(x, weight, bias, nd, op)
    if stride < 1:
        raise GeometryError(f"{op}: stride must be >= 1, got {stride}")
    batch, cin = x.shape[:2]
    if weight.shape[0] != cin:
        raise DimensionError(f"{op}: axis Cin mismatch, input has {cin} channels but weight expects {weight.shape[0]}")
    cout = weight.shape[1]
    if bias is not None and bias.shape[0] != cout:
        raise DimensionError(f"{op}: axis Cout mismatch, weight has {cout} outputs but bias has {bias.shape[0]}")
    spatial = x.shape[2:]
    kernel = weight.shape[2:]
    out_sp = tuple((n - 1) * stride + k for n, k in zip(spatial, kernel))
    xt = np.ascontiguousarray(np.moveaxis(x.data, 1, 0))
    wd = weight.data
    offsets = list(itertools.product(*(range(k) for k in kernel)))
    n_in = batch * int(np.prod(spatial))

    out = np.zeros((cout, batch) + out_sp, dtype=x.dtype)
    for off in offsets:
        sl = (slice(None), slice(None)) + _offset_slices(off, 1, stride, spatial)
        out[sl] += np.tensordot(wd[(slice(None), slice(None)) + off], xt, axes=([0], [0]))
    out = np.moveaxis(out, 0, 1)
    if bias is not None:
        out = out + bias.data.reshape((1, cout) + (1,) * nd)

    def backward(g: np.ndarray):
        gt = np.ascontiguousarray(np.moveaxis(g, 1, 0))
        xm = xt.reshape(cin, n_in)
        gx = np.zeros_like(xt) if x.requires_grad else None
        gw = np.zeros_like(wd) if weight.requires_grad else None
        for off in offsets:
            sl = (slice(None), slice(None)) + _offset_slices(off, 1, stride, spatial)
            widx = (slice(None), slice(None)) + off
            gs = gt[sl]
            if gw is not None:
                gw[widx] = xm @ gs.reshape(cout, n_in).T
            if gx is not None:
                gx += np.tensordot(wd[widx], gs, axes=([1], [0]))
        if gx is not None:
            gx = np.ascontiguousarray(np.moveaxis(gx, 0, 1))
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(out, parents, backward)


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Window max. Gradient goes to the first maximal element in scan order."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d: input must be (B, C, H, W), got {x.shape}")
    h, w = x.shape[2:]
    for name, n in (("H", h), ("W", w)):
        if n % stride:
            raise GeometryError(f"maxpool2d: axis {name} extent {n} is not divisible by stride {stride}")
    out_sp = ((h - k) // stride + 1, (w - k) // stride + 1)
    if min(out_sp) < 1:
        raise GeometryError(f"maxpool2d: window {k} larger than input {h}x{w}")
    offsets = list(itertools.product(range(k), range(k)))
    slices = [(slice(None), slice(None)) + _offset_slices(off, 1, stride, out_sp) for off in offsets]
    windows = np.stack([x.data[sl] for sl in slices])
    arg = np.argmax(windows, axis=0)
    out = np.take_along_axis(windows, arg[None], axis=0)[0]

    def backward(g: np.ndarray):
        gx = np.zeros_like(x.data)
        for i, sl in enumerate(slices):
            gx[sl] += np.where(arg == i, g, 0)
        return (gx,)

    return Tensor._from_op(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0), (x,), lambda g: (np.where(mask, g, 0),))


def concat(inputs: Sequence[Tensor], axis: int = 1) -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise DimensionError("concat: empty input list")
    ref = inputs[0].shape
    ax = axis % len(ref)
    for t in inputs[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat: shape {t.shape} does not match {ref} outside axis {ax}")
    if len(inputs) == 1:
        return Tensor._from_op(inputs[0].data, inputs, lambda g: (g,))
    bounds = np.cumsum([t.shape[ax] for t in inputs])[:-1]
    out = np.concatenate([t.data for t in inputs], axis=ax)
    return Tensor._from_op(out, inputs, lambda g: tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=ax)))


def nearest_upsample2d(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise GeometryError(f"nearest_upsample2d: factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise DimensionError(f"nearest_upsample2d: input must be (B, C, H, W), got {x.shape}")
    if factor == 1:
        return Tensor._from_op(x.data, (x,), lambda g: (g,))
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),))


def weighted_masked_cross_entropy(logits: Tensor, target: np.ndarray, weights: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Class-weighted softmax cross-entropy averaged over supervised voxels.

    ``logits`` is (B, C, *spatial); ``target`` holds integer labels of shape
    (B, *spatial). Voxels with ``mask == False`` are ignored in both the value
    and the gradient. Computation runs in float64.
    """
    if logits.ndim < 2:
        raise DimensionError(f"cross_entropy: logits need (B, C, ...) axes, got {logits.shape}")
    n_cls = logits.shape[1]
    target = np.asarray(target)
    expected = (logits.shape[0],) + logits.shape[2:]
    if target.shape != expected:
        raise DimensionError(f"cross_entropy: target shape {target.shape} does not match logits spatial shape {expected}")
    mask = np.ones(expected, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != expected:
        raise DimensionError(f"cross_entropy: mask shape {mask.shape} does not match {expected}")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n_cls,):
        raise DimensionError(f"cross_entropy: expected {n_cls} class weights, got {weights.shape}")
    if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
        raise DataError("cross_entropy: class weights must be finite and positive")

    labels = target[mask].astype(np.int64)
    bad = (labels < 0) | (labels >= n_cls)
    if bad.any():
        voxel = tuple(int(i) for i in np.argwhere(mask)[np.argmax(bad)])
        raise DataError(f"cross_entropy: label {int(labels[np.argmax(bad)])} at voxel {voxel} outside [0, {n_cls - 1}]")

    z_all = np.moveaxis(logits.data, 1, -1)
    count = labels.size
    if count == 0:
        value = np.zeros((), dtype=logits.dtype)
        return Tensor._from_op(value, (logits,), lambda g: (np.zeros_like(logits.data),))

    z = z_all[mask].astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, labels[:, None], axis=1)[:, 0]
    w = weights[labels]
    value = np.asarray(np.sum(w * (lse - picked)) / count, dtype=logits.dtype)

    def backward(g: np.ndarray):
        p = np.exp(z - lse[:, None])
        p[np.arange(count), labels] -= 1.0
        p *= (w / count)[:, None] * np.asarray(g).item()
        gz = np.zeros(z_all.shape, dtype=logits.dtype)
        gz[mask] = p
        return (np.ascontiguousarray(np.moveaxis(gz, -1, 1)),)

    return Tensor._from_op(value, (logits,), backward)
