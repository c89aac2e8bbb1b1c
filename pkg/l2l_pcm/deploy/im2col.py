"""
im2col lowering of 2-D convolutions for l2l-pcm.
"""

import math
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

Padding = Union[str, int, Tuple[int, int, int, int]]


@dataclass(frozen=True)
class Im2colBuffer:
    """
    Convolution input unrolled into one row per output position.

    Rows are ordered (batch, out_row, out_col); columns are ordered
    (kernel_row, kernel_col, channel), which is the row order of a
    (kh, kw, c, filters) kernel flattened to (kh*kw*c, filters).
    """

    patches: np.ndarray
    batch: int
    in_height: int
    in_width: int
    channels: int
    out_height: int
    out_width: int
    kernel: int
    stride: int
    padding: Tuple[int, int, int, int]
    bias_column: bool = False

    @property
    def kernel_elements(self) -> int:
        return self.kernel * self.kernel * self.channels


def resolve_padding(
    height: int, width: int, kernel: int, stride: int, padding: Padding
) -> Tuple[int, int, int, int]:
    """
    Turn a padding spec into explicit (top, bottom, left, right) amounts.

    ``"same"`` pads so the output is ``ceil(size / stride)``; an odd total
    puts the extra row/column at the bottom/right.
    """
    if isinstance(padding, str):
        if padding != "same":
            raise ValueError(f"unknown padding mode {padding!r}")
        pads = []
        for size in (height, width):
            out = math.ceil(size / stride)
            total = max((out - 1) * stride + kernel - size, 0)
            pads.append((total // 2, total - total // 2))
        return pads[0][0], pads[0][1], pads[1][0], pads[1][1]
    if isinstance(padding, int):
        return padding, padding, padding, padding
    return tuple(int(p) for p in padding)


def _as_nhwc(x: np.ndarray) -> np.ndarray:
    if x.ndim == 2:
        return x[None, :, :, None]
    if x.ndim == 3:
        return x[None]
    if x.ndim == 4:
        return x
    raise ValueError(f"expected a 2-D, 3-D or 4-D feature map, got shape {x.shape}")


def im2col(
    x: np.ndarray,
    kernel: int = 3,
    stride: int = 2,
    padding: Padding = "same",
    bias_column: bool = False,
) -> Im2colBuffer:
    """
    Unroll the receptive field of every output position into a row.

    Args:
        x: Feature map as (H, W), (H, W, C) or (B, H, W, C)
        kernel: Square kernel size
        stride: Stride in both directions
        padding: ``"same"``, a symmetric int, or (top, bottom, left, right)
        bias_column: Append a constant-one column feeding a bias row

    Returns:
        buffer: Patch matrix plus the geometry needed to fold it back
    """
    x = _as_nhwc(np.asarray(x))
    batch, height, width, channels = x.shape
    if height < 1 or width < 1:
        raise ValueError("spatial dimensions must be at least 1")
    top, bottom, left, right = resolve_padding(height, width, kernel, stride, padding)
    out_h = (height + top + bottom - kernel) // stride + 1
    out_w = (width + left + right - kernel) // stride + 1

    padded = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
    taps = []
    for i in range(kernel):
        for j in range(kernel):
            taps.append(
                padded[
                    :,
                    i : i + stride * (out_h - 1) + 1 : stride,
                    j : j + stride * (out_w - 1) + 1 : stride,
                    :,
                ]
            )
    cols = np.stack(taps, axis=3).reshape(batch * out_h * out_w, -1)
    if bias_column:
        ones = np.ones((cols.shape[0], 1), dtype=cols.dtype)
        cols = np.concatenate([cols, ones], axis=1)

    return Im2colBuffer(
        patches=cols,
        batch=batch,
        in_height=height,
        in_width=width,
        channels=channels,
        out_height=out_h,
        out_width=out_w,
        kernel=kernel,
        stride=stride,
        padding=(top, bottom, left, right),
        bias_column=bias_column,
    )


def col2im(cols: np.ndarray, geometry: Im2colBuffer) -> np.ndarray:
    """
    Fold patch-matrix gradients back onto the (B, H, W, C) input.

    Overlapping taps accumulate; taps that landed in the padding are dropped.
    """
    g = geometry
    if g.bias_column:
        cols = cols[:, :-1]
    top, bottom, left, right = g.padding
    taps = cols.reshape(
        g.batch, g.out_height, g.out_width, g.kernel * g.kernel, g.channels
    )
    padded = np.zeros(
        (g.batch, g.in_height + top + bottom, g.in_width + left + right, g.channels),
        dtype=cols.dtype,
    )
    for i in range(g.kernel):
        for j in range(g.kernel):
            padded[
                :,
                i : i + g.stride * (g.out_height - 1) + 1 : g.stride,
                j : j + g.stride * (g.out_width - 1) + 1 : g.stride,
                :,
            ] += taps[:, :, :, i * g.kernel + j, :]
    return padded[:, top : top + g.in_height, left : left + g.in_width, :]
