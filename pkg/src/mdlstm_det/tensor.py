"""Numeric substrate: valid strided convolution, activations, dropout, SGD.

Tensors are plain numpy arrays shaped ``(channels, height, width)``.
Every backward pass here is written out by hand.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical seeds give identical draws on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def check_tensor(x: np.ndarray, name: str = "tensor") -> None:
    if x.ndim != 3:
        raise ValueError(f"{name} must be rank 3 (channels, height, width), got shape {x.shape}")


@dataclass
class ConvParams:
    weight: np.ndarray  # (out_channels, in_channels, kernel_h, kernel_w)
    bias: np.ndarray  # (out_channels,)
    stride: tuple[int, int]  # (stride_y, stride_x)

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def parameter_count(self) -> int:
        return self.weight.size + self.bias.size


def conv_output_size(height: int, width: int, kernel: tuple[int, int],
                     stride: tuple[int, int]) -> tuple[int, int]:
    """Valid-mode output dims; non-positive values mean the input is too small."""
    kh, kw = kernel
    sy, sx = stride
    return (height - kh) // sy + 1, (width - kw) // sx + 1


def _check_conv_input(x: np.ndarray, params: ConvParams) -> None:
    check_tensor(x, "conv input")
    out_c, in_c, kh, kw = params.weight.shape
    if x.shape[0] != in_c:
        raise ValueError(f"conv input channels: expected {in_c}, got {x.shape[0]}")
    if x.shape[1] < kh:
        raise ValueError(f"conv input height {x.shape[1]} smaller than kernel height {kh}")
    if x.shape[2] < kw:
        raise ValueError(f"conv input width {x.shape[2]} smaller than kernel width {kw}")


def _patches(x: np.ndarray, params: ConvParams) -> np.ndarray:
    kh, kw = params.kernel
    sy, sx = params.stride
    # (C, Ho, Wo, kh, kw) view, strided down to the sampled positions
    return sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::sy, ::sx]


def conv2d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    _check_conv_input(x, params)
    patches = _patches(x, params)
    out = np.tensordot(params.weight, patches, axes=([1, 2, 3], [0, 3, 4]))
    out += params.bias[:, None, None]
    return out


def conv2d_backward(x: np.ndarray, params: ConvParams,
                    grad_out: np.ndarray) -> tuple[np.ndarray, ConvParams]:
    """Returns ``(grad_input, grads)`` where ``grads`` mirrors ``params``."""
    _check_conv_input(x, params)
    out_c, in_c, kh, kw = params.weight.shape
    sy, sx = params.stride
    ho, wo = conv_output_size(x.shape[1], x.shape[2], (kh, kw), (sy, sx))
    if grad_out.shape != (out_c, ho, wo):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match conv output {(out_c, ho, wo)}")

    patches = _patches(x, params)
    grad_w = np.tensordot(grad_out, patches, axes=([1, 2], [1, 2]))
    grad_b = grad_out.sum(axis=(1, 2))

    grad_x = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            # (in_c, ho, wo) contribution of kernel tap (i, j)
            contrib = np.tensordot(params.weight[:, :, i, j], grad_out, axes=([0], [0]))
            grad_x[:, i:i + sy * (ho - 1) + 1:sy, j:j + sx * (wo - 1) + 1:sx] += contrib
    return grad_x, ConvParams(grad_w.astype(x.dtype, copy=False), grad_b, params.stride)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation_forward(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "none":
        return x
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(y: np.ndarray, grad_out: np.ndarray, kind: str) -> np.ndarray:
    """Backward in terms of the forward *output* ``y``."""
    if kind == "sigmoid":
        return grad_out * y * (1 - y)
    if kind == "tanh":
        return grad_out * (1 - y * y)
    if kind == "none":
        return grad_out
    raise ValueError(f"unknown activation {kind!r}")


def dropout(x: np.ndarray, p: float, rng: np.random.Generator | None,
            training: bool) -> tuple[np.ndarray, np.ndarray]:
    """Inverted dropout. Returns the output and the (already scaled) mask."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, np.ones_like(x)
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - p)
    return x * mask, mask


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
    """In-place ``p -= lr * g`` over matching parameter lists."""
    if len(params) != len(grads):
        raise ValueError(f"parameter/gradient length mismatch: {len(params)} vs {len(grads)}")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"parameter/gradient shape mismatch: {p.shape} vs {g.shape}")
        p -= p.dtype.type(lr) * g
