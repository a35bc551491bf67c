"""Layers with explicit forward/backward passes (numpy only).

Variational layers keep a Gaussian posterior ``N(mu, softplus(rho)^2)`` per
weight. Their ``apply`` methods take concrete weights so the same code runs
sampled models, mean models and the training graph.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


def softplus(x):
    return np.logaddexp(0.0, x)


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class VariationalLinear:
    """Shared posterior bookkeeping for dense and convolutional layers."""

    kind = "linear"
    linear = True

    def __init__(self, w_shape, n_bias, fan_in, prior_sigma=0.1, rho_init=-5.0, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        bound = 1.0 / math.sqrt(fan_in)
        self.prior_sigma = float(prior_sigma)
        self.mu_W = rng.uniform(-bound, bound, size=w_shape)
        self.rho_W = np.full(w_shape, float(rho_init))
        self.mu_b = rng.uniform(-bound, bound, size=n_bias)
        self.rho_b = np.full(n_bias, float(rho_init))

    PARAM_NAMES = ("mu_W", "rho_W", "mu_b", "rho_b")

    def params(self):
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    @property
    def sigma_W(self):
        return softplus(self.rho_W)

    @property
    def sigma_b(self):
        return softplus(self.rho_b)

    def sample(self, rng):
        W = self.mu_W + self.sigma_W * rng.standard_normal(self.mu_W.shape)
        b = self.mu_b + self.sigma_b * rng.standard_normal(self.mu_b.shape)
        return W, b

    def validate(self):
        for name, arr in self.params().items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{self.kind} layer has non-finite {name}")
        if self.mu_W.shape != self.rho_W.shape or self.mu_b.shape != self.rho_b.shape:
            raise ValueError(f"{self.kind} layer has inconsistent mu/rho shapes")

    def kl(self):
        """Closed-form KL(q || N(0, prior_sigma^2)) summed over weights and biases."""
        total = 0.0
        for mu, rho in ((self.mu_W, self.rho_W), (self.mu_b, self.rho_b)):
            sigma = softplus(rho)
            total += np.sum(np.log(self.prior_sigma / sigma)
                            + (sigma**2 + mu**2) / (2 * self.prior_sigma**2) - 0.5)
        return float(total)

    def kl_grads(self):
        """Gradients of :meth:`kl` with respect to mu and rho."""
        grads = {}
        ps2 = self.prior_sigma**2
        for suffix in ("W", "b"):
            mu, rho = getattr(self, "mu_" + suffix), getattr(self, "rho_" + suffix)
            sigma = softplus(rho)
            grads["mu_" + suffix] = mu / ps2
            grads["rho_" + suffix] = (-1.0 / sigma + sigma / ps2) * expit(rho)
        return grads


class VariationalDense(VariationalLinear):
    kind = "dense"

    def __init__(self, n_in, n_out, prior_sigma=0.1, rho_init=-5.0, rng=None):
        self.n_in, self.n_out = int(n_in), int(n_out)
        super().__init__((self.n_out, self.n_in), self.n_out, self.n_in, prior_sigma, rho_init, rng)

    def config(self):
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out, "prior_sigma": self.prior_sigma}

    def output_shape(self, in_shape):
        if math.prod(in_shape) != self.n_in:
            raise ValueError(f"dense layer expects {self.n_in} inputs, got shape {in_shape}")
        return (self.n_out,)

    def apply(self, x, W, b):
        x2 = x.reshape(x.shape[0], -1)
        return x2 @ W.T + b, (x.shape, x2)

    def apply_backward(self, cache, dz, W):
        shape, x2 = cache
        return (dz @ W).reshape(shape), dz.T @ x2, dz.sum(axis=0)

    def lower(self, W, b, in_shape):
        """Dense matrix acting on the flattened input."""
        return np.asarray(W), np.asarray(b)


def im2col(x, k, stride, padding):
    """``(B, C, H, W)`` -> ``(B, C*k*k, H'*W')`` patch matrix."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    B, C, Ho, Wo = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * k * k, Ho * Wo)
    return cols, (Ho, Wo)


def col2im(dcols, x_shape, k, stride, padding, out_hw):
    B, C, H, W = x_shape
    Ho, Wo = out_hw
    dx = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    d6 = dcols.reshape(B, C, k, k, Ho, Wo)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += d6[:, :, i, j]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


class VariationalConv2d(VariationalLinear):
    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 prior_sigma=0.1, rho_init=-5.0, rng=None):
        self.in_channels, self.out_channels = int(in_channels), int(out_channels)
        self.kernel_size, self.stride, self.padding = int(kernel_size), int(stride), int(padding)
        k = self.kernel_size
        super().__init__((self.out_channels, self.in_channels, k, k), self.out_channels,
                         self.in_channels * k * k, prior_sigma, rho_init, rng)

    def config(self):
        return {"kind": self.kind, "in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": self.kernel_size, "stride": self.stride, "padding": self.padding,
                "prior_sigma": self.prior_sigma}

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ValueError(f"conv layer expects ({self.in_channels}, H, W) input, got {in_shape}")
        _, H, W = in_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        Ho, Wo = (H + 2 * p - k) // s + 1, (W + 2 * p - k) // s + 1
        if Ho < 1 or Wo < 1:
            raise ValueError(f"kernel {k} does not fit input {in_shape}")
        return (self.out_channels, Ho, Wo)

    def apply(self, x, W, b):
        cols, (Ho, Wo) = im2col(x, self.kernel_size, self.stride, self.padding)
        Wm = W.reshape(self.out_channels, -1)
        z = np.einsum("ok,bkp->bop", Wm, cols) + b[None, :, None]
        return z.reshape(x.shape[0], self.out_channels, Ho, Wo), (x.shape, cols, (Ho, Wo))

    def apply_backward(self, cache, dz, W):
        x_shape, cols, hw = cache
        B = dz.shape[0]
        dz2 = dz.reshape(B, self.out_channels, -1)
        Wm = W.reshape(self.out_channels, -1)
        dW = np.einsum("bop,bkp->ok", dz2, cols).reshape(W.shape)
        db = dz2.sum(axis=(0, 2))
        dcols = np.einsum("ok,bop->bkp", Wm, dz2)
        dx = col2im(dcols, x_shape, self.kernel_size, self.stride, self.padding, hw)
        return dx, dW, db

    def lower(self, W, b, in_shape):
        """Equivalent dense matrix on flattened (C, H, W) input, found by pushing
        the standard basis through the convolution."""
        n_in = math.prod(in_shape)
        basis = np.eye(n_in).reshape((n_in,) + tuple(in_shape))
        z, _ = self.apply(basis, W, np.zeros_like(b))
        M = z.reshape(n_in, -1).T
        Ho, Wo = self.output_shape(in_shape)[1:]
        return M, np.repeat(b, Ho * Wo)


class Activation:
    kind = "activation"
    linear = False
    FUNCTIONS = ("relu", "sigmoid", "tanh", "identity")

    def __init__(self, fn: str):
        if fn not in self.FUNCTIONS:
            raise ValueError(f"unsupported activation {fn!r}")
        self.fn = fn

    def config(self):
        return {"kind": self.kind, "fn": self.fn}

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        if self.fn == "relu":
            y = np.maximum(x, 0.0)
        elif self.fn == "sigmoid":
            y = expit(x)
        elif self.fn == "tanh":
            y = np.tanh(x)
        else:
            y = x
        return y, (x, y)

    def backward(self, cache, dy):
        x, y = cache
        if self.fn == "relu":
            return dy * (x > 0)
        if self.fn == "sigmoid":
            return dy * y * (1 - y)
        if self.fn == "tanh":
            return dy * (1 - y * y)
        return dy


class Pool2d:
    """Non-overlapping ``size x size`` pooling; trailing rows/columns are cropped."""

    kind = "pool"
    linear = False

    def __init__(self, mode: str, size: int = 2):
        if mode not in ("max", "avg"):
            raise ValueError(f"unsupported pooling {mode!r}")
        self.mode, self.size = mode, int(size)

    def config(self):
        return {"kind": self.kind, "mode": self.mode, "size": self.size}

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ValueError(f"pooling expects (C, H, W) input, got {in_shape}")
        C, H, W = in_shape
        if H < self.size or W < self.size:
            raise ValueError(f"pool size {self.size} larger than input {in_shape}")
        return (C, H // self.size, W // self.size)

    def forward(self, x):
        s = self.size
        B, C, H, W = x.shape
        Ho, Wo = H // s, W // s
        xr = x[:, :, :Ho * s, :Wo * s].reshape(B, C, Ho, s, Wo, s)
        if self.mode == "avg":
            return xr.mean(axis=(3, 5)), (x.shape, None)
        y = xr.max(axis=(3, 5))
        flat = xr.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, s * s)
        return y, (x.shape, flat.argmax(axis=-1))

    def backward(self, cache, dy):
        shape, arg = cache
        s = self.size
        B, C, H, W = shape
        Ho, Wo = dy.shape[2], dy.shape[3]
        if self.mode == "avg":
            blocks = np.broadcast_to(dy[:, :, :, None, :, None] / (s * s), (B, C, Ho, s, Wo, s))
        else:
            onehot = np.zeros((B, C, Ho, Wo, s * s))
            np.put_along_axis(onehot, arg[..., None], 1.0, axis=-1)
            blocks = (onehot * dy[..., None]).reshape(B, C, Ho, Wo, s, s).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(shape)
        dx[:, :, :Ho * s, :Wo * s] = blocks.reshape(B, C, Ho * s, Wo * s)
        return dx


def layer_from_config(cfg: dict, rng=None):
    kind = cfg["kind"]
    if kind == "dense":
        return VariationalDense(cfg["n_in"], cfg["n_out"], cfg.get("prior_sigma", 0.1), rng=rng)
    if kind == "conv":
        return VariationalConv2d(cfg["in_channels"], cfg["out_channels"], cfg["kernel_size"],
                                 cfg.get("stride", 1), cfg.get("padding", 0),
                                 cfg.get("prior_sigma", 0.1), rng=rng)
    if kind == "activation":
        return Activation(cfg["fn"])
    if kind == "pool":
        return Pool2d(cfg["mode"], cfg.get("size", 2))
    raise ValueError(f"unknown layer kind {kind!r}")
