"""Layer primitives: dense, 5x5-style convolutions, max pooling, flatten.

All arithmetic runs in float64 (DTYPE). Convolutions use valid padding and
im2col; images are laid out NHWC, conv weights as [filters, in_channels, k, k].
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64

RELU = "relu"
LINEAR = "none"


class ShapeError(ValueError):
    """Raised when an input does not match the shape a layer expects."""


def _apply_activation(z, activation):
    if activation == RELU:
        return np.maximum(z, 0.0)
    return z


def _activation_grad(dout, out, activation):
    if activation == RELU:
        return dout * (out > 0.0)
    return dout


class Dense:
    """Fully-connected layer: y = act(x @ W.T + b), W shaped [out, in]."""

    kind = "dense"

    def __init__(self, weights, bias, activation=LINEAR):
        self.weights = np.ascontiguousarray(weights, dtype=DTYPE)
        self.bias = np.ascontiguousarray(bias, dtype=DTYPE)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"dense weights {self.weights.shape} / bias {self.bias.shape} inconsistent"
            )
        self.activation = activation

    @property
    def out_shape(self):
        return (self.weights.shape[0],)

    def in_shape_ok(self, shape):
        return shape == (self.weights.shape[1],)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.weights.shape[1]:
            raise ShapeError(f"dense expected [B, {self.weights.shape[1]}], got {x.shape}")
        z = x @ self.weights.T + self.bias
        out = _apply_activation(z, self.activation)
        return out, (x, out)

    def backward(self, dout, cache):
        x, out = cache
        dz = _activation_grad(dout, out, self.activation)
        dw = dz.T @ x
        db = dz.sum(axis=0)
        dx = dz @ self.weights
        return dx, {"weights": dw, "bias": db}

    def params(self):
        return [("weights", self.weights), ("bias", self.bias)]


def im2col(x, k, stride):
    """Extract k x k patches from NHWC input -> [B, Ho, Wo, C*k*k]."""
    b, h, w, c = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    sb, sh, sw, sc = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, ho, wo, k, k, c),
        strides=(sb, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return patches.reshape(b, ho, wo, k * k * c), (ho, wo)


def col2im(dcols, x_shape, k, stride):
    """Scatter patch gradients [B, Ho, Wo, k*k*C] back to NHWC input grads."""
    b, h, w, c = x_shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    dx = np.zeros(x_shape, dtype=DTYPE)
    dcols = dcols.reshape(b, ho, wo, k, k, c)
    for i in range(k):
        for j in range(k):
            dx[:, i : i + ho * stride : stride, j : j + wo * stride : stride, :] += dcols[
                :, :, :, i, j, :
            ]
    return dx


class Conv2D:
    """Valid-padding convolution, NHWC in/out, weights [F, Cin, k, k]."""

    kind = "conv2d"

    def __init__(self, weights, bias, activation=LINEAR, stride=1):
        self.weights = np.ascontiguousarray(weights, dtype=DTYPE)
        self.bias = np.ascontiguousarray(bias, dtype=DTYPE)
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ShapeError(f"conv weights must be [F, Cin, k, k], got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"conv bias shape {self.bias.shape} != ({self.weights.shape[0]},)")
        self.activation = activation
        self.stride = int(stride)

    @property
    def kernel(self):
        return self.weights.shape[2]

    @property
    def filters(self):
        return self.weights.shape[0]

    def _wmat(self):
        # [k*k*Cin, F] matching im2col's (k, k, C) patch ordering
        f, cin, k, _ = self.weights.shape
        return self.weights.transpose(2, 3, 1, 0).reshape(k * k * cin, f)

    def forward(self, x):
        f, cin, k, _ = self.weights.shape
        if x.ndim != 4 or x.shape[3] != cin:
            raise ShapeError(f"conv expected [B, H, W, {cin}], got {x.shape}")
        if x.shape[1] < k or x.shape[2] < k:
            raise ShapeError(f"conv input {x.shape[1:3]} smaller than kernel {k}")
        cols, (ho, wo) = im2col(x, k, self.stride)
        z = cols @ self._wmat() + self.bias
        out = _apply_activation(z, self.activation)
        return out, (x, cols, out)

    def backward(self, dout, cache):
        x, cols, out = cache
        f, cin, k, _ = self.weights.shape
        dz = _activation_grad(dout, out, self.activation)
        b, ho, wo, _ = dz.shape
        dz2 = dz.reshape(-1, f)
        cols2 = cols.reshape(-1, k * k * cin)
        dwmat = cols2.T @ dz2  # [k*k*Cin, F]
        dw = dwmat.reshape(k, k, cin, f).transpose(3, 2, 0, 1)
        db = dz2.sum(axis=0)
        dcols = dz2 @ self._wmat().T
        dx = col2im(dcols.reshape(b, ho, wo, -1), x.shape, k, self.stride)
        return dx, {"weights": dw, "bias": db}

    def params(self):
        return [("weights", self.weights), ("bias", self.bias)]


class MaxPool2D:
    """Max pooling with window == stride (non-overlapping), NHWC."""

    kind = "maxpool2d"

    def __init__(self, stride=2):
        self.stride = int(stride)

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"maxpool expected NHWC input, got {x.shape}")
        s = self.stride
        b, h, w, c = x.shape
        ho, wo = h // s, w // s
        xv = x[:, : ho * s, : wo * s, :].reshape(b, ho, s, wo, s, c)
        out = xv.max(axis=(2, 4))
        # argmax mask for routing gradients; ties send gradient to every max cell
        mask = xv == out[:, :, None, :, None, :]
        return out, (x.shape, mask)

    def backward(self, dout, cache):
        x_shape, mask = cache
        s = self.stride
        b, h, w, c = x_shape
        ho, wo = h // s, w // s
        dx = np.zeros(x_shape, dtype=DTYPE)
        dxv = dx[:, : ho * s, : wo * s, :].reshape(b, ho, s, wo, s, c)
        counts = mask.sum(axis=(2, 4), keepdims=True)
        dxv += mask * (dout[:, :, None, :, None, :] / counts)
        return dx, None

    def params(self):
        return []


class Flatten:
    """Reshape [B, ...] -> [B, prod(...)]."""

    kind = "flatten"

    def __init__(self):
        pass

    def forward(self, x):
        return x.reshape(x.shape[0], -1), (x.shape,)

    def backward(self, dout, cache):
        (x_shape,) = cache
        return dout.reshape(x_shape), None

    def params(self):
        return []
