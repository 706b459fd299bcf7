"""Deformable convolution and the deformable token merging module.

A deformable convolution samples the input at the regular kernel grid
shifted by learned, input-dependent offsets (predicted by a plain conv
over the same input), evaluated with bilinear interpolation. Token
merging composes one deformable conv with batch norm and GELU and halves
the spatial extents.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, StateError
from .init import weight, zeros, ones
from .tensor import (BatchNormState, Tensor, add, batch_norm, conv2d,
                     deform_sample, gelu, matmul, reshape)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def tap_grid(kernel: int) -> np.ndarray:
    """[K*K, 2] raw tap coordinates (ky, kx) in row-major tap order."""
    ky, kx = np.divmod(np.arange(kernel * kernel), kernel)
    return np.stack([ky, kx], axis=1).astype(np.int64)


@dataclass
class DeformableConvParams:
    """Main kernel plus the offset-predicting conv (same kernel and stride).

    The offset conv has 2*K*K output channels, (dy, dx) per tap, and is
    zero-initialized in both weights and biases so initial offsets are
    exactly zero.
    """

    w: Tensor          # [K, K, Cin, Cout]
    b: Tensor          # [Cout]
    offset_w: Tensor   # [K, K, Cin, 2*K*K]
    offset_b: Tensor   # [2*K*K]
    stride: int
    padding: int = 0

    @property
    def kernel(self) -> int:
        return self.w.shape[0]

    @classmethod
    def create(cls, rng: np.random.Generator, cin: int, cout: int,
               kernel: int = 2, stride: int = 2, dtype=np.float32) -> "DeformableConvParams":
        return cls(
            w=weight(rng, (kernel, kernel, cin, cout), dtype),
            b=zeros(cout, dtype),
            offset_w=zeros((kernel, kernel, cin, 2 * kernel * kernel), dtype),
            offset_b=zeros(2 * kernel * kernel, dtype),
            stride=stride,
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.conv.w": self.w,
            f"{prefix}.conv.b": self.b,
            f"{prefix}.offset_conv.w": self.offset_w,
            f"{prefix}.offset_conv.b": self.offset_b,
        }


def deformable_conv(x: Tensor, p: DeformableConvParams) -> tuple[Tensor, np.ndarray]:
    """Deformable convolution of an NHWC tensor.

    Each output location accumulates bilinear samples taken at the
    regular tap positions shifted by the predicted offsets. Returns the
    output and a detached copy of the offset field
    [N, Ho, Wo, K*K, 2] for inspection.
    """
    n, h, w, cin = x.shape
    k, s, pad = p.kernel, p.stride, p.padding
    cout = p.w.shape[3]
    offsets = conv2d(x, p.offset_w, p.offset_b, stride=s, padding=pad)
    ho, wo = offsets.shape[1], offsets.shape[2]
    offsets = reshape(offsets, (n, ho, wo, k * k, 2))

    taps = tap_grid(k).astype(x.data.dtype)
    base = np.empty((ho, wo, k * k, 2), dtype=x.data.dtype)
    base[..., 0] = (np.arange(ho) * s - pad)[:, None, None] + taps[:, 0]
    base[..., 1] = (np.arange(wo) * s - pad)[None, :, None] + taps[:, 1]
    positions = add(offsets, Tensor(base))

    samples = deform_sample(x, positions)                       # [N, Ho, Wo, K*K, Cin]
    flat = reshape(samples, (n, ho, wo, k * k * cin))
    out = add(matmul(flat, reshape(p.w, (k * k * cin, cout))), p.b)
    return out, offsets.data.copy()


@dataclass
class DtmParams:
    """Deformable token merging: GELU(BN(DC(x))), stride-2 2x2 kernel."""

    dc: DeformableConvParams
    bn_g: Tensor
    bn_b: Tensor
    bn_state: BatchNormState = field(default_factory=BatchNormState)

    @classmethod
    def create(cls, rng: np.random.Generator, cin: int, cout: int,
               dtype=np.float32) -> "DtmParams":
        return cls(
            dc=DeformableConvParams.create(rng, cin, cout, kernel=2, stride=2, dtype=dtype),
            bn_g=ones(cout, dtype),
            bn_b=zeros(cout, dtype),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.dc.named(prefix)
        out[f"{prefix}.bn.g"] = self.bn_g
        out[f"{prefix}.bn.b"] = self.bn_b
        return out

    def named_state(self, prefix: str) -> dict[str, np.ndarray]:
        if self.bn_state.mean is None:
            return {}
        return {
            f"{prefix}.bn.running_mean": self.bn_state.mean,
            f"{prefix}.bn.running_var": self.bn_state.var,
        }


def dtm_forward(x: Tensor, p: DtmParams, mode: str = "train") -> tuple[Tensor, np.ndarray]:
    """Merge tokens: halve each spatial extent, map Cin to Cout channels."""
    _, h, w, _ = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"token merging requires even spatial extents, got {h}x{w}")
    y, offsets = deformable_conv(x, p.dc)
    y = batch_norm(y, p.bn_g, p.bn_b, p.bn_state, mode, BN_MOMENTUM, BN_EPS)
    return gelu(y), offsets


@dataclass
class UniformMergeParams:
    """Regular-grid merge baseline: GELU(BN(strided 2x2 conv))."""

    w: Tensor
    b: Tensor
    bn_g: Tensor
    bn_b: Tensor
    bn_state: BatchNormState = field(default_factory=BatchNormState)

    @classmethod
    def create(cls, rng: np.random.Generator, cin: int, cout: int,
               dtype=np.float32) -> "UniformMergeParams":
        return cls(
            w=weight(rng, (2, 2, cin, cout), dtype),
            b=zeros(cout, dtype),
            bn_g=ones(cout, dtype),
            bn_b=zeros(cout, dtype),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.conv.w": self.w,
            f"{prefix}.conv.b": self.b,
            f"{prefix}.bn.g": self.bn_g,
            f"{prefix}.bn.b": self.bn_b,
        }

    def named_state(self, prefix: str) -> dict[str, np.ndarray]:
        if self.bn_state.mean is None:
            return {}
        return {
            f"{prefix}.bn.running_mean": self.bn_state.mean,
            f"{prefix}.bn.running_var": self.bn_state.var,
        }


def uniform_merge_forward(x: Tensor, p: UniformMergeParams, mode: str = "train") -> Tensor:
    _, h, w, _ = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"token merging requires even spatial extents, got {h}x{w}")
    y = conv2d(x, p.w, p.b, stride=2, padding=0)
    y = batch_norm(y, p.bn_g, p.bn_b, p.bn_state, mode, BN_MOMENTUM, BN_EPS)
    return gelu(y)


def trace_offsets(offset_fields: Mapping[int, np.ndarray], token: tuple[int, int],
                  batch_index: int = 0, patch_size: int = 4) -> np.ndarray:
    """Expand one final-stage token through the three merge modules.

    ``offset_fields`` maps stage index (2, 3, 4) to that stage's offset
    field [N, Ho, Wo, K*K, 2]. Starting from the token's location on the
    stage-4 grid, each merge expands a position q into 2q + tap + offset
    for its four taps; offsets at fractional positions are looked up at
    the nearest grid location. The 4^3 = 64 leaf positions land on the
    stage-1 grid and are mapped to image pixels by the patch size.

    Returns [64, 2] (image_y, image_x), leaf index k4*16 + k3*4 + k2.
    With all offsets zero the leaves tile the token's 32x32 image
    footprint on a regular 4-pixel grid.
    """
    for stage in (2, 3, 4):
        if stage not in offset_fields:
            raise StateError(f"no offset field recorded for the stage-{stage} merge; run a forward pass first")

    taps = tap_grid(2).astype(np.float64)
    positions = [np.asarray(token, dtype=np.float64)]
    for stage in (4, 3, 2):
        field_arr = np.asarray(offset_fields[stage], dtype=np.float64)[batch_index]
        ho, wo = field_arr.shape[0], field_arr.shape[1]
        children = []
        for pos in positions:
            iy = int(np.clip(np.rint(pos[0]), 0, ho - 1))
            ix = int(np.clip(np.rint(pos[1]), 0, wo - 1))
            for k in range(4):
                children.append(2.0 * pos + taps[k] + field_arr[iy, ix, k])
        positions = children
    return np.asarray(positions) * patch_size
