"""Spatial transformer layer: localization net, affine grid, bilinear sampler.

Coordinate convention is corner-aligned: normalized -1 maps to the center of
the first pixel and +1 to the center of the last, so an identity theta
reproduces the input to rounding error. Samples falling outside the image
read as zeros (and push no gradient into the input).

theta is a per-sample 2x3 matrix [[a, b, tx], [c, d, ty]] acting on target
coordinates: (x_src, y_src) = theta . (x_t, y_t, 1).
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigurationError, ShapeError
from .nn import Conv2d, Dense, MaxPool, Parameter
from .tensor import Tensor


def identity_theta(n: int) -> np.ndarray:
    t = np.zeros((n, 2, 3))
    t[:, 0, 0] = 1.0
    t[:, 1, 1] = 1.0
    return t


def compose_theta(first, second) -> np.ndarray:
    """theta of the single warp equivalent to sampling with `first`, then
    sampling that output with `second` (matrix product in homogeneous form)."""
    def hom(t):
        t = np.asarray(t, dtype=np.float64)
        out = np.zeros(t.shape[:-2] + (3, 3))
        out[..., :2, :] = t
        out[..., 2, 2] = 1.0
        return out
    return (hom(first) @ hom(second))[..., :2, :]


def affine_grid(theta: Tensor, out_h: int, out_w: int) -> Tensor:
    """Apply per-sample theta to the canonical corner-aligned target grid.

    Returns (n, out_h, out_w, 2) normalized source coordinates, channel 0
    holding x and channel 1 holding y. Differentiable with respect to theta.
    """
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"grid size must be >= 1, got {out_h}x{out_w}")
    if theta.ndim != 3 or theta.shape[1:] != (2, 3):
        raise ShapeError(f"theta must be (n, 2, 3), got {theta.shape}")
    xs = np.linspace(-1.0, 1.0, out_w)
    ys = np.linspace(-1.0, 1.0, out_h)
    target = np.empty((out_h, out_w, 3))
    target[:, :, 0] = xs[None, :]
    target[:, :, 1] = ys[:, None]
    target[:, :, 2] = 1.0

    grid = np.einsum("nrc,hwc->nhwr", theta.data, target)
    out = Tensor.result(grid, "affine_grid", (theta,))
    if out.requires_grad:
        def bwd(g):
            theta.accumulate_grad(np.einsum("nhwr,hwc->nrc", g, target))
        out._backward = bwd
    return out


def bilinear_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Sample an NHWC image batch at normalized grid coordinates.

    Each output pixel is the bilinear blend of the 4 pixels around its
    source point; neighbors outside the image contribute zero. Differentiable
    with respect to both the image values and the grid coordinates.
    """
    if x.ndim != 4:
        raise ShapeError(f"bilinear_sample input must be NHWC, got {x.ndim} axes")
    if grid.ndim != 4 or grid.shape[-1] != 2:
        raise ShapeError(f"grid must be (n, h, w, 2), got {grid.shape}")
    if grid.shape[0] != x.shape[0]:
        raise ShapeError(f"batch axis mismatch: input {x.shape[0]}, grid {grid.shape[0]}")
    n, h, w, c = x.shape
    ho, wo = grid.shape[1], grid.shape[2]

    sx = 0.5 * (w - 1)
    sy = 0.5 * (h - 1)
    px = (grid.data[..., 0] + 1.0) * sx
    py = (grid.data[..., 1] + 1.0) * sy
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1
    wx1 = px - x0
    wx0 = 1.0 - wx1
    wy1 = py - y0
    wy0 = 1.0 - wy1

    bidx = np.arange(n)[:, None, None]

    def corner(yy, xx):
        mask = ((yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)).astype(np.float64)
        vals = x.data[bidx, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1), :]
        return vals * mask[..., None], mask

    v00, m00 = corner(y0, x0)
    v01, m01 = corner(y0, x1)
    v10, m10 = corner(y1, x0)
    v11, m11 = corner(y1, x1)

    y = ((wy0 * wx0)[..., None] * v00 + (wy0 * wx1)[..., None] * v01
         + (wy1 * wx0)[..., None] * v10 + (wy1 * wx1)[..., None] * v11)

    out = Tensor.result(y, "bilinear_sample", (x, grid))
    if out.requires_grad:
        def bwd(g):
            if x.requires_grad:
                dx = np.zeros_like(x.data)
                for yy, xx, wgt, mask in ((y0, x0, wy0 * wx0, m00),
                                          (y0, x1, wy0 * wx1, m01),
                                          (y1, x0, wy1 * wx0, m10),
                                          (y1, x1, wy1 * wx1, m11)):
                    np.add.at(dx,
                              (bidx, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)),
                              g * (wgt * mask)[..., None])
                x.accumulate_grad(dx)
            if grid.requires_grad:
                dpx = (g * (wy0[..., None] * (v01 - v00)
                            + wy1[..., None] * (v11 - v10))).sum(axis=-1)
                dpy = (g * (wx0[..., None] * (v10 - v00)
                            + wx1[..., None] * (v11 - v01))).sum(axis=-1)
                dgrid = np.stack([dpx * sx, dpy * sy], axis=-1)
                grid.accumulate_grad(dgrid)
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# localization networks

# tanh(THETA_BIAS) = 0.99, the closest the tanh head can sit to identity scale
THETA_BIAS = math.atanh(0.99)


def _conv_stack_sizes(size: int) -> tuple[int, int, int, int]:
    s1 = size // 2       # pool 2x2
    c1 = s1 - 4          # conv 5x5 valid
    s2 = c1 // 2         # pool 2x2
    c2 = s2 - 4          # conv 5x5 valid
    return s1, c1, s2, c2


def locnet_min_size() -> int:
    """Smallest input size the conv localization stack accepts."""
    n = 2
    while _conv_stack_sizes(n)[3] < 1:
        n += 1
    return n


def _near_identity_head(d_in: int, name: str, seed: int) -> Dense:
    """Final 6-unit dense layer initialized so tanh(output) is the near-identity
    theta [[0.99, 0, 0], [0, 0.99, 0]] for every input."""
    head = Dense(d_in, 6, name, seed)
    head.weight.data[:] = 0.0
    head.bias.data[[0, 4]] = THETA_BIAS
    return head


class LocalizationNet:
    """Conv localization network regressing 6 affine parameters.

    Stack: maxpool 2x2 -> conv 5x5x20 tanh -> maxpool 2x2 -> conv 5x5x20 tanh
    -> dense 50 tanh -> dense 6 tanh.
    """

    def __init__(self, size: int, channels: int, name: str, seed: int):
        c2 = _conv_stack_sizes(size)[3]
        if c2 < 1:
            raise ConfigurationError(
                f"localization net input {size}x{size} is too small: the "
                f"pool/conv/pool/conv stack needs size >= {locnet_min_size()}")
        self.pool = MaxPool(2)
        self.conv1 = Conv2d(5, 5, channels, 20, f"{name}/conv1", seed,
                            padding="valid", init="glorot")
        self.conv2 = Conv2d(5, 5, 20, 20, f"{name}/conv2", seed,
                            padding="valid", init="glorot")
        self.dense1 = Dense(c2 * c2 * 20, 50, f"{name}/dense1", seed, init="glorot")
        self.head = _near_identity_head(50, f"{name}/theta", seed)

    def params(self) -> list[Parameter]:
        return (self.conv1.params() + self.conv2.params()
                + self.dense1.params() + self.head.params())

    def buffers(self):
        return []

    def __call__(self, x: Tensor, train: bool = True) -> Tensor:
        h = self.conv1(self.pool(x)).tanh()
        h = self.conv2(self.pool(h)).tanh()
        h = h.reshape((h.shape[0], -1))
        h = self.dense1(h).tanh()
        return self.head(h).tanh()


class DenseLocalizationNet:
    """Fallback for maps smaller than the conv stack minimum: flatten ->
    dense 50 tanh -> dense 6 tanh, same near-identity head."""

    def __init__(self, size: int, channels: int, name: str, seed: int):
        self.dense1 = Dense(size * size * channels, 50, f"{name}/dense1", seed,
                            init="glorot")
        self.head = _near_identity_head(50, f"{name}/theta", seed)

    def params(self) -> list[Parameter]:
        return self.dense1.params() + self.head.params()

    def buffers(self):
        return []

    def __call__(self, x: Tensor, train: bool = True) -> Tensor:
        h = x.reshape((x.shape[0], -1))
        h = self.dense1(h).tanh()
        return self.head(h).tanh()


def build_localization_net(size: int, channels: int, name: str, seed: int,
                           allow_dense_fallback: bool = False):
    """Conv localization net when the input is large enough; optionally the
    dense fallback for smaller maps."""
    if _conv_stack_sizes(size)[3] >= 1:
        return LocalizationNet(size, channels, name, seed)
    if allow_dense_fallback:
        return DenseLocalizationNet(size, channels, name, seed)
    return LocalizationNet(size, channels, name, seed)  # raises with the minimum


class SpatialTransformer:
    """Resolution-preserving spatial transformer: predict theta from the
    input, build the sampling grid, resample the input."""

    def __init__(self, size: int, channels: int, name: str, seed: int):
        self.size = size
        self.channels = channels
        self.locnet = build_localization_net(size, channels, f"{name}/loc", seed,
                                             allow_dense_fallback=True)

    def params(self) -> list[Parameter]:
        return self.locnet.params()

    def buffers(self):
        return self.locnet.buffers()

    def theta(self, x: Tensor, train: bool = True) -> Tensor:
        flat = self.locnet(x, train)
        return flat.reshape((flat.shape[0], 2, 3))

    def __call__(self, x: Tensor, train: bool = True, theta_override=None) -> Tensor:
        if x.shape[1] != self.size or x.shape[2] != self.size:
            raise ShapeError(f"spatial transformer built for {self.size}x{self.size}, "
                             f"got {x.shape[1]}x{x.shape[2]}")
        if theta_override is None:
            theta = self.theta(x, train)
        elif isinstance(theta_override, Tensor):
            theta = theta_override
        else:
            theta = Tensor(np.broadcast_to(np.asarray(theta_override, dtype=np.float64),
                                           (x.shape[0], 2, 3)).copy())
        grid = affine_grid(theta, x.shape[1], x.shape[2])
        return bilinear_sample(x, grid)
