"""Tensor conventions.

A tensor is a C-contiguous 4-D :class:`numpy.ndarray` laid out as
``(batch, channels, height, width)``.  Only ``float32`` (default) and
``float64`` are supported.  Kernels never mutate their inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

DTYPES = {"f32": np.float32, "f64": np.float64}
DEFAULT_DTYPE = np.float32


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            dtype = DTYPES[dtype]
        except KeyError:
            raise ConfigurationError(f"unsupported dtype {dtype!r}") from None
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ConfigurationError(f"unsupported dtype {dtype}")
    return dtype


def dtype_code(dtype) -> str:
    return "f64" if np.dtype(dtype) == np.float64 else "f32"


def as_tensor(x, dtype=None) -> np.ndarray:
    """Validate ``x`` as a 4-D tensor and return a contiguous array."""
    arr = np.asarray(x)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
    arr = np.ascontiguousarray(arr, dtype=resolve_dtype(dtype))
    if arr.ndim != 4:
        raise ConfigurationError(f"expected a 4-D tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ConfigurationError(f"tensor extents must be >= 1, got {arr.shape}")
    return arr


def zeros(shape, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return np.zeros(shape, dtype=resolve_dtype(dtype))


def flat_index(shape, n, c, h, w) -> int:
    _, C, H, W = shape
    return ((n * C + c) * H + h) * W + w


def conv_out_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        for field in ("in_channels", "out_channels", "kernel_h", "kernel_w",
                      "stride_h", "stride_w", "groups"):
            if getattr(self, field) < 1:
                raise ConfigurationError(f"ConvSpec.{field} must be >= 1")
        if self.pad_h < 0 or self.pad_w < 0:
            raise ConfigurationError("ConvSpec padding must be >= 0")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigurationError(
                f"channels {self.in_channels}->{self.out_channels} "
                f"not divisible by groups={self.groups}")

    @classmethod
    def square(cls, cin, cout, k, stride=1, pad=None, groups=1, bias=False):
        return cls(cin, cout, k, k, stride, stride,
                   k // 2 if pad is None else pad, k // 2 if pad is None else pad,
                   groups, bias)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups,
                self.kernel_h, self.kernel_w)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = conv_out_extent(h, self.kernel_h, self.stride_h, self.pad_h)
        wo = conv_out_extent(w, self.kernel_w, self.stride_w, self.pad_w)
        if ho < 1 or wo < 1:
            raise ConfigurationError(
                f"conv output extent {ho}x{wo} is not positive for input {h}x{w} "
                f"(kernel {self.kernel_h}x{self.kernel_w}, stride "
                f"{self.stride_h}x{self.stride_w}, pad {self.pad_h}x{self.pad_w})")
        return ho, wo

    def output_shape(self, in_shape) -> tuple[int, int, int, int]:
        n, c, h, w = in_shape
        if c != self.in_channels:
            raise ConfigurationError(
                f"conv expects {self.in_channels} input channels, got {c}")
        return (n, self.out_channels, *self.output_hw(h, w))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}
