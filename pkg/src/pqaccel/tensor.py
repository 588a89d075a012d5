"""Dense tensors, reference convolution and channel-axis subspace partitioning.

Tensors are plain ``numpy`` arrays in NCHW layout with float32 dtype. Kernel
weights are (M, N, kh, kw). All routines here are pure functions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, ParameterError, ShapeError

DTYPE = np.float32


def as_tensor4(x, name: str = "tensor") -> np.ndarray:
    """Validate and convert ``x`` to a C-contiguous float32 4-D array."""
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (count, channels, height, width), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite entries")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


def output_hw(height: int, width: int, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    """Output spatial size of a convolution. May be (0, 0) for degenerate geometry."""
    ho = (height + 2 * padding - kh) // stride + 1
    wo = (width + 2 * padding - kw) // stride + 1
    return max(ho, 0), max(wo, 0)


@dataclass(frozen=True)
class ConvLayer:
    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    name: str = "conv"

    def __post_init__(self):
        w = as_tensor4(self.weights, f"weights of {self.name!r}")
        b = np.ascontiguousarray(self.bias, dtype=DTYPE).reshape(-1)
        if w.shape[0] < 1 or w.shape[1] < 1:
            raise ShapeError(f"layer {self.name!r} needs M >= 1 and N >= 1, got {w.shape}")
        if b.shape[0] != w.shape[0]:
            raise ShapeError(f"layer {self.name!r}: bias length {b.shape[0]} != kernel count {w.shape[0]}")
        if not np.all(np.isfinite(b)):
            raise DataError(f"bias of {self.name!r} contains non-finite entries")
        if int(self.stride) < 1 or int(self.padding) < 0:
            raise ParameterError(f"layer {self.name!r}: stride must be >= 1 and padding >= 0")
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "bias", _frozen(b))
        object.__setattr__(self, "stride", int(self.stride))
        object.__setattr__(self, "padding", int(self.padding))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.weights.shape

    @property
    def kernels(self) -> int:
        return self.weights.shape[0]

    @property
    def channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    def output_hw(self, height: int, width: int) -> tuple[int, int]:
        kh, kw = self.kernel_size
        return output_hw(height, width, kh, kw, self.stride, self.padding)

    def weight_matrix(self) -> np.ndarray:
        """Weights as an (M, N*kh*kw) matrix matching the row order of :func:`im2col`."""
        return self.weights.reshape(self.kernels, -1)

    def replace(self, **changes) -> "ConvLayer":
        fields = dict(weights=self.weights, bias=self.bias, stride=self.stride,
                      padding=self.padding, name=self.name)
        fields.update(changes)
        return ConvLayer(**fields)


def _check_input(x: np.ndarray, channels: int, kh: int, kw: int, stride: int, padding: int,
                 what: str, kernel_shape=None) -> tuple[int, int]:
    if x.shape[1] != channels:
        shape = kernel_shape if kernel_shape is not None else ("?", channels, kh, kw)
        raise ShapeError(f"{what}: input shape {x.shape} has {x.shape[1]} channels, "
                         f"kernel shape {tuple(shape)} expects {channels}")
    ho, wo = output_hw(x.shape[2], x.shape[3], kh, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"{what}: input shape {x.shape} too small for kernel {kh}x{kw} "
                         f"with stride {stride}, padding {padding}")
    return ho, wo


def pad_spatial(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv_forward(layer: ConvLayer, x) -> np.ndarray:
    """Cross-correlation of ``x`` with the layer kernels, plus bias.

    Accumulates one kernel tap at a time, independently of :func:`im2col`.
    """
    x = as_tensor4(x, "input")
    m, n, kh, kw = layer.shape
    s = layer.stride
    ho, wo = _check_input(x, n, kh, kw, s, layer.padding, f"conv_forward({layer.name})", layer.shape)
    xp = pad_spatial(x, layer.padding)
    out = np.zeros((x.shape[0], m, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            tap = xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
            out += np.einsum("mc,nchw->nmhw", layer.weights[:, :, i, j], tap)
    out += layer.bias[None, :, None, None]
    return out


def im2col(x, kernel_size: tuple[int, int], stride: int = 1, padding: int = 0) -> np.ndarray:
    """Unroll receptive fields into columns.

    Returns a (C*kh*kw, count*ho*wo) matrix. Rows are ordered (channel, tap row,
    tap column); columns are ordered (image, output row, output column).
    """
    x = as_tensor4(x, "input")
    kh, kw = kernel_size
    ho, wo = _check_input(x, x.shape[1], kh, kw, stride, padding, "im2col")
    xp = pad_spatial(x, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # win: (n, c, ho, wo, kh, kw)
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(x.shape[1] * kh * kw, -1)
    return np.ascontiguousarray(cols)


def col2im(cols: np.ndarray, input_shape: tuple[int, int, int, int], kernel_size: tuple[int, int],
           stride: int = 1, padding: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back into an input-shaped array."""
    n, c, h, w = input_shape
    kh, kw = kernel_size
    ho, wo = output_hw(h, w, kh, kw, stride, padding)
    blocks = cols.reshape(c, kh, kw, n, ho, wo)
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                blocks[:, i, j].transpose(1, 0, 2, 3)
    if padding:
        xp = xp[:, :, padding:-padding, padding:-padding]
    return xp


def conv_forward_im2col(layer: ConvLayer, x) -> np.ndarray:
    """Same result as :func:`conv_forward`, computed as one matrix product."""
    x = as_tensor4(x, "input")
    ho, wo = layer.output_hw(x.shape[2], x.shape[3])
    cols = im2col(x, layer.kernel_size, layer.stride, layer.padding)
    out = layer.weight_matrix() @ cols + layer.bias[:, None]
    return np.ascontiguousarray(out.reshape(layer.kernels, x.shape[0], ho, wo).transpose(1, 0, 2, 3))


@dataclass(frozen=True)
class SubspacePartition:
    """Split of the channel axis into ``count`` subspaces of ``dim`` channels.

    Sub-vector matrices have one column per (kernel, spatial tap), column index
    ``kernel * kh*kw + tap_row * kw + tap_col``. When ``dim`` does not divide
    the channel count, ``pad`` zero channels are appended.
    """

    channels: int
    dim: int
    count: int = field(init=False)
    pad: int = field(init=False)

    def __post_init__(self):
        if self.dim < 1:
            raise ParameterError(f"subspace dimension must be >= 1, got {self.dim}")
        if self.dim > self.channels:
            raise ParameterError(f"subspace dimension {self.dim} exceeds channel count {self.channels}")
        count = -(-self.channels // self.dim)
        object.__setattr__(self, "count", count)
        object.__setattr__(self, "pad", count * self.dim - self.channels)

    @property
    def padded_channels(self) -> int:
        return self.count * self.dim

    def pad_channels(self, x: np.ndarray) -> np.ndarray:
        """Append zero channels to an NCHW tensor or (M, N, kh, kw) kernel."""
        if self.pad == 0:
            return x
        return np.pad(x, ((0, 0), (0, self.pad), (0, 0), (0, 0)))

    def split(self, weights: np.ndarray) -> list[np.ndarray]:
        m, n, kh, kw = weights.shape
        if n != self.channels:
            raise ShapeError(f"weights shape {weights.shape} does not match partition of {self.channels} channels")
        wp = self.pad_channels(weights).reshape(m, self.count, self.dim, kh * kw)
        blocks = wp.transpose(1, 2, 0, 3).reshape(self.count, self.dim, m * kh * kw)
        return [np.ascontiguousarray(b) for b in blocks]

    def merge(self, blocks, kernels: int, kernel_size: tuple[int, int]) -> np.ndarray:
        """Inverse of :meth:`split`; drops the zero-padded channels."""
        kh, kw = kernel_size
        if len(blocks) != self.count:
            raise ShapeError(f"expected {self.count} sub-vector matrices, got {len(blocks)}")
        stacked = np.stack([np.asarray(b) for b in blocks])
        expected = (self.count, self.dim, kernels * kh * kw)
        if stacked.shape != expected:
            raise ShapeError(f"sub-vector matrices have shape {stacked.shape[1:]}, expected {expected[1:]}")
        w = stacked.reshape(self.count, self.dim, kernels, kh * kw).transpose(2, 0, 1, 3)
        w = w.reshape(kernels, self.padded_channels, kh, kw)
        return np.ascontiguousarray(w[:, :self.channels])


def partition_kernels(layer: ConvLayer, d: int) -> list[np.ndarray]:
    """Per-subspace sub-vector matrices, each d x (M*kh*kw)."""
    return SubspacePartition(layer.channels, d).split(layer.weights)
