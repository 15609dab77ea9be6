"""Network building blocks: conv / pool / dense / batch norm / softmax.

Layout conventions: activations are NHWC (batch, height, width, channels),
conv kernels are (kh, kw, c_in, c_out), dense weights are (d_in, d_out).
All convolutions run at stride 1; padding is 'same' (symmetric zeros) or
'valid'. Pooling is non-overlapping with floor division of the spatial size.
"""

from __future__ import annotations

import zlib

import numpy as np

from .errors import ConfigurationError, ShapeError
from .tensor import Tensor

# ---------------------------------------------------------------------------
# parameters and initialization


class Parameter(Tensor):
    """A named trainable tensor; names are unique within a model."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, op="param")
        self.name = name


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by (seed, parameter name).

    Keying on the name rather than creation order keeps shared layers
    identically initialized across model variants that add or drop other
    layers (the spatial-transformer ablations).
    """
    return np.random.default_rng(np.random.SeedSequence((seed, zlib.crc32(name.encode()))))


def glorot_uniform(shape: tuple[int, ...], fan_in: int, fan_out: int,
                   rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def he_normal(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


# ---------------------------------------------------------------------------
# convolution


def _pad_amounts(k: int) -> tuple[int, int]:
    # symmetric for odd kernels; one extra on the trailing side for even ones
    total = k - 1
    before = total // 2
    return before, total - before


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """Stride-1 cross-correlation of an NHWC batch with an HWIO kernel."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be NHWC, got {x.ndim} axes")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be (kh, kw, c_in, c_out), got {kernel.ndim} axes")
    n, h, w, c_in = x.shape
    kh, kw, kc_in, c_out = kernel.shape
    if kh < 1 or kw < 1:
        raise ShapeError(f"kernel spatial size must be >= 1, got {kh}x{kw}")
    if kc_in != c_in:
        raise ShapeError(f"channel axis mismatch: input has {c_in} channels (axis 3), "
                         f"kernel expects {kc_in} (axis 2)")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias axis 0 must equal c_out={c_out}, got shape {bias.shape}")
    if padding == "same":
        (pt, pb), (pl, pr) = _pad_amounts(kh), _pad_amounts(kw)
    elif padding == "valid":
        pt = pb = pl = pr = 0
        if h < kh or w < kw:
            raise ShapeError(f"valid conv needs input >= kernel: {h}x{w} vs {kh}x{kw}")
    else:
        raise ConfigurationError(f"unknown padding mode: {padding!r}")

    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    hp, wp = xp.shape[1], xp.shape[2]
    ho, wo = hp - kh + 1, wp - kw + 1

    cols = np.empty((n, ho, wo, kh, kw, c_in))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + ho, j:j + wo, :]
    cols2 = cols.reshape(n * ho * wo, kh * kw * c_in)
    wmat = kernel.data.reshape(kh * kw * c_in, c_out)
    y = (cols2 @ wmat + bias.data).reshape(n, ho, wo, c_out)

    out = Tensor.result(y, "conv2d", (x, kernel, bias))
    if out.requires_grad:
        def bwd(g):
            g2 = g.reshape(n * ho * wo, c_out)
            if kernel.requires_grad:
                kernel.accumulate_grad((cols2.T @ g2).reshape(kernel.shape))
            if bias.requires_grad:
                bias.accumulate_grad(g2.sum(axis=0))
            if x.requires_grad:
                dcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, c_in)
                dxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
                x.accumulate_grad(dxp[:, pt:pt + h, pl:pl + w, :])
        out._backward = bwd
    return out


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a
    window are dropped. Gradient routes to the first maximum in each window
    (row-major scan), which keeps replays deterministic under ties."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d input must be NHWC, got {x.ndim} axes")
    n, h, w, c = x.shape
    if h < size or w < size:
        raise ShapeError(f"maxpool2d needs spatial size >= {size}, got {h}x{w}")
    ho, wo = h // size, w // size
    hc, wc = ho * size, wo * size

    windows = (x.data[:, :hc, :wc, :]
               .reshape(n, ho, size, wo, size, c)
               .transpose(0, 1, 3, 5, 2, 4)
               .reshape(n, ho, wo, c, size * size))
    arg = windows.argmax(axis=-1)           # first occurrence on ties
    y = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    out = Tensor.result(y, "maxpool2d", (x,))
    if out.requires_grad:
        def bwd(g):
            dwin = np.zeros_like(windows)
            np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
            dx_c = (dwin.reshape(n, ho, wo, c, size, size)
                    .transpose(0, 1, 4, 2, 5, 3)
                    .reshape(n, hc, wc, c))
            if hc == h and wc == w:
                x.accumulate_grad(dx_c)
            else:
                dx = np.zeros_like(x.data)
                dx[:, :hc, :wc, :] = dx_c
                x.accumulate_grad(dx)
        out._backward = bwd
    return out


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ weight + bias for a (batch, d_in) input."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"dense input axis 1 is {x.shape[-1]}, weight expects {weight.shape[0]}")
    return x.matmul(weight) + bias


def softmax_rows(x: Tensor) -> Tensor:
    """Row softmax with max-subtraction for stability."""
    if x.shape[-1] < 2:
        raise ShapeError("softmax needs at least 2 columns")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor.result(p, "softmax", (x,))
    if out.requires_grad:
        def bwd(g):
            dot = (g * p).sum(axis=-1, keepdims=True)
            x.accumulate_grad(p * (g - dot))
        out._backward = bwd
    return out


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale each row to unit Euclidean norm (rows must be nonzero)."""
    sq = (x * x).sum(axis=-1, keepdims=True)
    return x / sq.sqrt()


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               train: bool, eps: float = 1e-5, momentum: float = 0.9) -> Tensor:
    """Per-channel batch normalization over all axes but the last.

    Train mode normalizes by batch statistics (population variance) and
    updates the running buffers in place:
        running <- momentum * running + (1 - momentum) * batch.
    Eval mode normalizes by the running buffers.
    """
    if x.shape[-1] != gamma.shape[0]:
        raise ShapeError(f"batch_norm channel axis is {x.shape[-1]}, "
                         f"gamma has {gamma.shape[0]}")
    axes = tuple(range(x.ndim - 1))
    if train:
        if x.shape[0] < 2:
            raise ShapeError("batch_norm train mode needs batch size >= 2 "
                             "(variance undefined for a single sample)")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    y = gamma.data * xhat + beta.data
    out = Tensor.result(y, "batch_norm", (x, gamma, beta))
    if out.requires_grad:
        m = x.size // x.shape[-1]

        def bwd(g):
            if gamma.requires_grad:
                gamma.accumulate_grad((g * xhat).sum(axis=axes))
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=axes))
            if x.requires_grad:
                if train:
                    gsum = g.sum(axis=axes) / m
                    gx = (g * xhat).sum(axis=axes) / m
                    x.accumulate_grad(gamma.data * inv_std * (g - gsum - xhat * gx))
                else:
                    x.accumulate_grad(g * gamma.data * inv_std)
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# layer objects (thin state holders over the functional ops)


class Conv2d:
    def __init__(self, kh: int, kw: int, c_in: int, c_out: int, name: str,
                 seed: int, padding: str = "same", init: str = "he"):
        rng = param_rng(seed, name)
        fan_in = kh * kw * c_in
        fan_out = kh * kw * c_out
        if init == "he":
            k = he_normal((kh, kw, c_in, c_out), fan_in, rng)
        else:
            k = glorot_uniform((kh, kw, c_in, c_out), fan_in, fan_out, rng)
        self.kernel = Parameter(k, f"{name}/kernel")
        self.bias = Parameter(np.zeros(c_out), f"{name}/bias")
        self.padding = padding

    def params(self) -> list[Parameter]:
        return [self.kernel, self.bias]

    def __call__(self, x: Tensor, train: bool = True) -> Tensor:
        return conv2d(x, self.kernel, self.bias, self.padding)


class Dense:
    def __init__(self, d_in: int, d_out: int, name: str, seed: int, init: str = "he"):
        rng = param_rng(seed, name)
        if init == "he":
            w = he_normal((d_in, d_out), d_in, rng)
        else:
            w = glorot_uniform((d_in, d_out), d_in, d_out, rng)
        self.weight = Parameter(w, f"{name}/weight")
        self.bias = Parameter(np.zeros(d_out), f"{name}/bias")

    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor, train: bool = True) -> Tensor:
        return dense(x, self.weight, self.bias)


class BatchNorm:
    """Learned scale/shift plus running statistics for eval mode."""

    def __init__(self, channels: int, name: str, eps: float = 1e-5, momentum: float = 0.9):
        self.gamma = Parameter(np.ones(channels), f"{name}/gamma")
        self.beta = Parameter(np.zeros(channels), f"{name}/beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps = eps
        self.momentum = momentum
        self.name = name

    def params(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{self.name}/running_mean", self.running_mean),
                (f"{self.name}/running_var", self.running_var)]

    def __call__(self, x: Tensor, train: bool = True) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean,
                          self.running_var, train, self.eps, self.momentum)


class MaxPool:
    def __init__(self, size: int = 2):
        self.size = size

    def params(self) -> list[Parameter]:
        return []

    def __call__(self, x: Tensor, train: bool = True) -> Tensor:
        return maxpool2d(x, self.size)
