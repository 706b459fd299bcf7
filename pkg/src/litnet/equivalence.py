"""Numerical demonstrations that per-pixel FC layers, convolutions, and
multi-head self-attention coincide under explicit constructions, plus
gradient-based receptive-field probes.

The attention-to-convolution bridge assigns each head a pixel shift from
the kernel's offset alphabet and forces one-hot (delta) attention onto
the shifted pixel, so head h's value/output path carries exactly the
kernel slice at its shift. On interior pixels the result equals the
zero-padded convolution bit for bit up to float accumulation order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .blocks import MsaParams, mlp_block, msa
from .errors import ConfigError
from .tensor import Tape, Tensor, conv2d, mul, reshape, sum_all

INFLUENCE_THRESHOLD = 1e-8  # relative to the strongest pixel


def centered_taps(kernel: int) -> tuple[tuple[int, int], ...]:
    """The kernel's offset alphabet: tap coordinates shifted by -(K-1)//2.

    For odd K these are the usual centered offsets; for K = 2 they are
    {0, 1}^2, matching stride-2 token merging.
    """
    shift = (kernel - 1) // 2
    return tuple((ky - shift, kx - shift)
                 for ky in range(kernel) for kx in range(kernel))


@dataclass(frozen=True)
class HeadShiftMap:
    """Bijection from head index to a pixel shift of a K x K kernel."""

    shifts: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(set(self.shifts)) != len(self.shifts):
            raise ConfigError(f"head shifts must be distinct, got {self.shifts}")

    @property
    def num_heads(self) -> int:
        return len(self.shifts)

    @classmethod
    def for_kernel(cls, kernel: int) -> "HeadShiftMap":
        return cls(centered_taps(kernel))

    def permuted(self, perm: Sequence[int]) -> "HeadShiftMap":
        return HeadShiftMap(tuple(self.shifts[i] for i in perm))


def _check_shift_map(shift_map: HeadShiftMap, kernel: int) -> None:
    expected = kernel * kernel
    if shift_map.num_heads != expected:
        raise ConfigError(
            f"{shift_map.num_heads} heads cannot realize a {kernel}x{kernel} kernel; "
            f"need exactly {expected} (a perfect square)")
    if set(shift_map.shifts) != set(centered_taps(kernel)):
        raise ConfigError(
            f"head shifts {shift_map.shifts} are not a bijection onto the "
            f"{kernel}x{kernel} kernel offsets")


def delta_attention(shift_map: HeadShiftMap, grid: tuple[int, int]) -> np.ndarray:
    """One-hot attention [heads, T, T]: head h sends pixel p to p + f(h).

    Shifted targets that fall outside the grid attend to p itself so every
    row remains a probability distribution; those pixels are excluded from
    exact-equality comparisons via :func:`interior_mask`.
    """
    h, w = grid
    t = h * w
    attn = np.zeros((shift_map.num_heads, t, t))
    for head, (dy, dx) in enumerate(shift_map.shifts):
        for py in range(h):
            for px in range(w):
                row = py * w + px
                qy, qx = py + dy, px + dx
                col = qy * w + qx if 0 <= qy < h and 0 <= qx < w else row
                attn[head, row, col] = 1.0
    return attn


def interior_mask(grid: tuple[int, int], kernel: int) -> np.ndarray:
    """[H, W] mask of pixels whose full K x K support lies in the grid."""
    h, w = grid
    mask = np.ones((h, w), dtype=bool)
    for dy, dx in centered_taps(kernel):
        shifted = np.zeros((h, w), dtype=bool)
        ys = np.arange(h) + dy
        xs = np.arange(w) + dx
        ok_y = (ys >= 0) & (ys < h)
        ok_x = (xs >= 0) & (xs < w)
        shifted[np.ix_(ok_y, ok_x)] = True
        mask &= shifted
    return mask


def build_msa_as_conv(conv_w: np.ndarray, shift_map: HeadShiftMap,
                      grid: tuple[int, int]) -> tuple[MsaParams, np.ndarray]:
    """Attention parameters and override that reproduce a convolution.

    Head h's value projection is the identity on the input channels and
    its slice of the output projection is the kernel slice at shift
    f(h); with the returned delta attention, running ``msa`` on a
    flattened image equals the zero-padded convolution on all interior
    pixels. With K = 1 the construction is a per-pixel FC layer.
    """
    conv_w = np.asarray(conv_w, dtype=np.float64)
    if conv_w.ndim != 4 or conv_w.shape[0] != conv_w.shape[1]:
        raise ConfigError(f"expected a [K, K, Cin, Cout] kernel, got {conv_w.shape}")
    kernel, _, cin, cout = conv_w.shape
    _check_shift_map(shift_map, kernel)
    heads = shift_map.num_heads
    inner = heads * cin

    qkv_w = np.zeros((cin, 3 * inner))
    for head in range(heads):
        start = 2 * inner + head * cin
        qkv_w[:, start:start + cin] = np.eye(cin)
    out_w = np.zeros((inner, cout))
    shift = (kernel - 1) // 2
    for head, (dy, dx) in enumerate(shift_map.shifts):
        out_w[head * cin:(head + 1) * cin, :] = conv_w[dy + shift, dx + shift]

    params = MsaParams(
        qkv_w=Tensor(qkv_w),
        qkv_b=Tensor(np.zeros(3 * inner)),
        out_w=Tensor(out_w),
        out_b=Tensor(np.zeros(cout)),
        num_heads=heads,
    )
    return params, delta_attention(shift_map, grid)


def msa_as_conv_apply(image: np.ndarray, conv_w: np.ndarray,
                      shift_map: HeadShiftMap) -> np.ndarray:
    """Run the attention construction on one [H, W, Cin] image."""
    image = np.asarray(image, dtype=np.float64)
    h, w, cin = image.shape
    params, override = build_msa_as_conv(conv_w, shift_map, (h, w))
    tokens = Tensor(image.reshape(1, h * w, cin))
    out, _ = msa(tokens, params, attn_override=override)
    return out.data.reshape(h, w, -1)


def conv_reference(image: np.ndarray, conv_w: np.ndarray) -> np.ndarray:
    """Zero-padded stride-1 convolution of one image, same spatial extents."""
    image = np.asarray(image, dtype=np.float64)
    kernel = conv_w.shape[0]
    x = Tensor(image[None])
    out = conv2d(x, Tensor(np.asarray(conv_w, dtype=np.float64)),
                 stride=1, padding=(kernel - 1) // 2)
    return out.data[0]


def msa_vs_conv_deviation(image: np.ndarray, conv_w: np.ndarray,
                          shift_map: HeadShiftMap | None = None) -> float:
    """Max abs deviation between the two routes on interior pixels.

    Outputs align by pixel index in both parities; for even K the
    symmetric-padding conv output is smaller than the grid, but it still
    covers every interior pixel.
    """
    kernel = conv_w.shape[0]
    if shift_map is None:
        shift_map = HeadShiftMap.for_kernel(kernel)
    got = msa_as_conv_apply(image, conv_w, shift_map)
    want = conv_reference(image, conv_w)
    ys, xs = np.nonzero(interior_mask(image.shape[:2], kernel))
    return float(np.abs(got[ys, xs] - want[ys, xs]).max())


def verify_fc_equals_1x1_conv(w: np.ndarray, rng: np.random.Generator | None = None,
                              dtype=np.float64) -> float:
    """Apply one weight matrix as a per-pixel FC layer and as a 1x1 conv.

    Returns the max abs deviation between the two routes on a random
    image with entries in [-1, 1].
    """
    w = np.asarray(w, dtype=dtype)
    if w.ndim != 2:
        raise ConfigError(f"expected a [Cin, Cout] matrix, got shape {w.shape}")
    rng = rng or np.random.default_rng(0)
    cin = w.shape[0]
    image = rng.uniform(-1.0, 1.0, size=(5, 6, cin)).astype(dtype)

    tokens = Tensor(image.reshape(1, 30, cin))
    fc = (tokens @ Tensor(w)).data.reshape(5, 6, -1)
    conv = conv2d(Tensor(image[None]), Tensor(w[None, None])).data[0]
    return float(np.abs(fc - conv).max())


# --------------------------------------------------------------------------
# Receptive-field probes
# --------------------------------------------------------------------------


class MlpProbe:
    """Token-wise residual MLP as a probe layer (support: one pixel)."""

    def __init__(self, params):
        self.params = params

    def apply(self, x: Tensor) -> Tensor:
        n, h, w, c = x.shape
        tokens = reshape(x, (n, h * w, c))
        return reshape(mlp_block(tokens, self.params), (n, h, w, c))


class ConvProbe:
    """Zero-padded stride-1 convolution as a probe layer."""

    def __init__(self, conv_w: np.ndarray):
        self.conv_w = np.asarray(conv_w, dtype=np.float64)

    def apply(self, x: Tensor) -> Tensor:
        kernel = self.conv_w.shape[0]
        return conv2d(x, Tensor(self.conv_w), stride=1, padding=(kernel - 1) // 2)


class AttentionProbe:
    """The attention-as-convolution construction as a probe layer."""

    def __init__(self, conv_w: np.ndarray, shift_map: HeadShiftMap | None = None):
        self.conv_w = np.asarray(conv_w, dtype=np.float64)
        self.shift_map = shift_map or HeadShiftMap.for_kernel(self.conv_w.shape[0])

    def apply(self, x: Tensor) -> Tensor:
        n, h, w, c = x.shape
        params, override = build_msa_as_conv(self.conv_w, self.shift_map, (h, w))
        out, _ = msa(reshape(x, (n, h * w, c)), params, attn_override=override)
        return reshape(out, (n, h, w, out.shape[-1]))


@dataclass
class ReceptiveFieldReport:
    """Influence of input pixels on one query pixel's output.

    ``masks[d]`` marks the input pixels whose gradient magnitude exceeds
    ``threshold`` (relative to the strongest pixel) after the first d + 1
    layers; ``k_eff`` is the bounding-box side of the final mask.
    """

    query: tuple[int, int]
    masks: list[np.ndarray]
    magnitudes: list[np.ndarray]
    k_eff: int
    threshold: float = INFLUENCE_THRESHOLD


def _mask_extent(mask: np.ndarray) -> int:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return 0
    return int(max(ys.max() - ys.min(), xs.max() - xs.min())) + 1


def receptive_field_probe(stack: Sequence, grid: tuple[int, int],
                          query: tuple[int, int], channels: int = 3,
                          rng: np.random.Generator | None = None) -> ReceptiveFieldReport:
    """Differentiate each prefix of ``stack`` at one query pixel.

    The scalar probed is the channel sum of the output at ``query``; the
    gradient with respect to the input image gives the influence map.
    """
    rng = rng or np.random.default_rng(0)
    h, w = grid
    qy, qx = query
    if not (0 <= qy < h and 0 <= qx < w):
        raise ConfigError(f"query {query} outside grid {grid}")
    base = rng.uniform(-1.0, 1.0, size=(1, h, w, channels))

    masks, magnitudes = [], []
    for depth in range(1, len(stack) + 1):
        x = Tensor(base.copy(), requires_grad=True)
        with Tape() as tape:
            y = x
            for layer in stack[:depth]:
                y = layer.apply(y)
            pick = np.zeros(y.shape)
            pick[0, qy, qx, :] = 1.0
            scalar = sum_all(mul(y, Tensor(pick)))
        tape.backward(scalar)
        mag = np.abs(x.grad[0]).max(axis=-1)
        peak = mag.max()
        mask = mag > (INFLUENCE_THRESHOLD * peak if peak > 0 else INFLUENCE_THRESHOLD)
        masks.append(mask)
        magnitudes.append(mag)
    return ReceptiveFieldReport(query=(qy, qx), masks=masks, magnitudes=magnitudes,
                                k_eff=_mask_extent(masks[-1]))


def export_attention_maps(model, images, stage: int, block: int = 0) -> np.ndarray:
    """Average attention probabilities [heads, T, T] over an image batch."""
    from .model import ForwardRecord  # local import to avoid a cycle

    record = ForwardRecord()
    model.forward(images, mode="train", record=record)
    key = (stage, block)
    if key not in record.attention:
        raise ConfigError(
            f"stage {stage} block {block} has no attention; "
            "the first two stages do not have self-attention layers")
    return record.attention[key].mean(axis=0)
