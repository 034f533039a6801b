"""Float tensor primitives: padding, valid convolution, activations, softmax,
and merging of two stacked linear convolutions into one.

Tensors are plain float64 numpy arrays laid out channels-first, either
(C, H, W) for one sample or (B, C, H, W) for a batch. Convolution is
cross-correlation (no kernel flip) everywhere in the package.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels

ACTIVATIONS = ("none", "relu", "leaky_relu")
DEFAULT_LEAKY_ALPHA = 0.2


@dataclass
class ConvLayer:
    """Square-kernel convolution with bias and an optional activation.

    ``weights`` has shape (C_out, C_in, K, K); ``bias`` has shape (C_out,).
    """

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "none"
    alpha: float = DEFAULT_LEAKY_ALPHA
    name: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ValueError(f"weights must be (C_out, C_in, K, K), got {self.weights.shape}")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise ValueError(
                f"bias length {self.bias.shape[0]} != out_channels {self.weights.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size

    @property
    def is_linear(self) -> bool:
        return self.activation == "none"

    def copy(self) -> "ConvLayer":
        return ConvLayer(self.weights.copy(), self.bias.copy(), self.activation, self.alpha, self.name)


def _check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values produced by {what}")
    return x


def replicate_index(n: int, radius: int) -> np.ndarray:
    return np.clip(np.arange(-radius, n + radius), 0, n - 1)


def pad(x: np.ndarray, radius: int, mode: str = "replicate") -> np.ndarray:
    """Pad the two trailing (spatial) axes by ``radius`` on every side."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return x.copy()
    if mode == "replicate":
        iy = replicate_index(x.shape[-2], radius)
        ix = replicate_index(x.shape[-1], radius)
        return x[..., iy, :][..., ix]
    if mode == "zero":
        widths = [(0, 0)] * (x.ndim - 2) + [(radius, radius), (radius, radius)]
        return np.pad(x, widths)
    raise ValueError(f"unknown pad mode {mode!r}")


def pad_backward(g: np.ndarray, radius: int, h: int, w: int) -> np.ndarray:
    """Adjoint of replicate padding: fold the border gradient back onto the edges."""
    if radius == 0:
        return g
    ph = np.zeros((h + 2 * radius, h))
    ph[np.arange(h + 2 * radius), replicate_index(h, radius)] = 1.0
    pw = np.zeros((w + 2 * radius, w))
    pw[np.arange(w + 2 * radius), replicate_index(w, radius)] = 1.0
    return np.einsum("...yx,yi,xj->...ij", g, ph, pw, optimize=True)


def apply_activation(x: np.ndarray, kind: str, alpha: float = DEFAULT_LEAKY_ALPHA) -> np.ndarray:
    if kind == "none":
        return x
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "leaky_relu":
        return np.where(x >= 0, x, alpha * x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(pre: np.ndarray, grad: np.ndarray, kind: str, alpha: float = DEFAULT_LEAKY_ALPHA) -> np.ndarray:
    """Chain ``grad`` through the activation evaluated at pre-activation ``pre``."""
    if kind == "none":
        return grad
    if kind == "relu":
        return grad * (pre > 0)
    if kind == "leaky_relu":
        return np.where(pre >= 0, grad, alpha * grad)
    raise ValueError(f"unknown activation {kind!r}")


def conv2d_linear(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Valid cross-correlation plus bias, no activation. x is (B, C, H, W)."""
    k = layer.kernel
    b, c, h, w = x.shape
    if c != layer.in_channels:
        raise ValueError(f"in_channels mismatch: input has {c}, layer expects {layer.in_channels}")
    if h < k or w < k:
        raise ValueError(f"spatial size {h}x{w} smaller than kernel {k}")
    if k == 1:
        out = np.einsum("oc,bchw->bohw", layer.weights[:, :, 0, 0], x, optimize=True)
    else:
        cols = kernels.im2col(np.ascontiguousarray(x), k)
        out = (cols @ layer.weights.reshape(layer.out_channels, -1).T).transpose(0, 3, 1, 2)
    return out + layer.bias[None, :, None, None]


def conv2d_valid(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Valid convolution followed by the layer's activation.

    Accepts (C, H, W) or (B, C, H, W); output drops K-1 rows and columns.
    """
    single = x.ndim == 3
    xb = x[None] if single else x
    if xb.ndim != 4:
        raise ValueError(f"expected (C,H,W) or (B,C,H,W), got shape {x.shape}")
    out = apply_activation(conv2d_linear(xb, layer), layer.activation, layer.alpha)
    _check_finite(out, "conv2d_valid")
    return out[0] if single else out


def softmax_rows(m: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Softmax over the last axis of m / temperature, max-subtracted."""
    if not 0.0 < temperature <= 1.0:
        raise ValueError("temperature must be in (0, 1]")
    z = m / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return _check_finite(e / e.sum(axis=-1, keepdims=True), "softmax_rows")


def fuse_linear_pair(l1: ConvLayer, l2: ConvLayer) -> ConvLayer:
    """Single convolution equivalent to applying ``l1`` then ``l2``.

    The fused kernel has size K1 + K2 - 1; it is the full 2-D convolution of
    the two kernels summed over the shared middle channel.
    """
    if not (l1.is_linear and l2.is_linear):
        raise ValueError("fusion requires linear layers")
    if l1.out_channels != l2.in_channels:
        raise ValueError(
            f"channel mismatch: first layer outputs {l1.out_channels}, second expects {l2.in_channels}"
        )
    k1, k2 = l1.kernel, l2.kernel
    kf = k1 + k2 - 1
    w = np.zeros((l2.out_channels, l1.in_channels, kf, kf))
    for s in range(k2):
        for t in range(k2):
            w[:, :, s:s + k1, t:t + k1] += np.einsum("ab,bcuv->acuv", l2.weights[:, :, s, t], l1.weights)
    bias = l2.bias + l2.weights.sum(axis=(2, 3)) @ l1.bias
    name = f"{l1.name}+{l2.name}" if l1.name or l2.name else ""
    return ConvLayer(w, bias, "none", l2.alpha, name)
