"""Differentiable layer toolkit on plain numpy arrays.

Every layer implements forward(x, train) and backward(grad_out), with
backward returning the gradient with respect to the input and
accumulating parameter gradients in place. Image tensors are laid out
(batch, height, width, channels); feature tensors keep the feature axis
last, so all layers accept arbitrary leading batch axes.

Backward passes are exact, which is what finite_diff_check verifies:
the analytic route and central differences are two independent
computations of the same derivative.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NonFiniteError, TrainingDivergedError


class Parameter:
    """Named trainable array with an accumulated gradient."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def parameter_count(params) -> int:
    """Total trainable values across a parameter list."""
    return sum(p.size for p in params)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _require_finite(x: np.ndarray, where: str) -> None:
    # a full-array sum is cheap next to the layer math and goes non-finite
    # iff some element is (barring astronomically large finite sums)
    if not np.isfinite(np.sum(x)):
        raise NonFiniteError(f"non-finite values entering {where}")


class Layer:
    def params(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Dense(Layer):
    """Affine map on the last axis: y = x @ W + b."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 name: str = "dense", dtype=np.float64):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = Parameter(
            f"{name}.weight", glorot_uniform(rng, (in_dim, out_dim), in_dim, out_dim, dtype)
        )
        self.bias = Parameter(f"{name}.bias", np.zeros(out_dim, dtype=dtype))
        self._x = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train=False):
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"dense expects width {self.in_dim}, got {x.shape}")
        _require_finite(x, "dense")
        if train:
            self._x = x
        return x @ self.weight.value + self.bias.value

    def backward(self, grad):
        if self._x is None:
            raise RuntimeError("backward before forward(train=True)")
        x2 = self._x.reshape(-1, self.in_dim)
        g2 = grad.reshape(-1, self.out_dim)
        self.weight.grad += x2.T @ g2
        self.bias.grad += g2.sum(axis=0)
        return grad @ self.weight.value.T


class Elu(Layer):
    """y = x for x > 0 else exp(x) - 1; smooth at the origin."""

    def __init__(self):
        self._y = None
        self._neg = None

    def forward(self, x, train=False):
        neg = x <= 0
        y = x.copy()
        y[neg] = np.expm1(x[neg])
        if train:
            self._y, self._neg = y, neg
        return y

    def backward(self, grad):
        if self._y is None:
            raise RuntimeError("backward before forward(train=True)")
        dydx = np.ones_like(self._y)
        dydx[self._neg] = self._y[self._neg] + 1.0
        return grad * dydx


class Relu(Layer):
    def __init__(self):
        self._pos = None

    def forward(self, x, train=False):
        if train:
            self._pos = x > 0
        return np.maximum(x, 0)

    def backward(self, grad):
        if self._pos is None:
            raise RuntimeError("backward before forward(train=True)")
        return grad * self._pos


class LayerNorm(Layer):
    """Zero-mean unit-variance over the last axis, then learned scale/shift."""

    EPS = 1e-5

    def __init__(self, dim: int, name: str = "ln", dtype=np.float64):
        if dim < 2:
            raise DimensionError(f"layer norm needs width >= 2, got {dim}")
        self.dim = dim
        self.gain = Parameter(f"{name}.gain", np.ones(dim, dtype=dtype))
        self.shift = Parameter(f"{name}.shift", np.zeros(dim, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.gain, self.shift]

    def forward(self, x, train=False):
        if x.shape[-1] != self.dim:
            raise DimensionError(f"layer norm expects width {self.dim}, got {x.shape}")
        _require_finite(x, "layer norm")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.EPS)
        xhat = xc * inv
        if train:
            self._cache = (xhat, inv)
        return self.gain.value * xhat + self.shift.value

    def backward(self, grad):
        if self._cache is None:
            raise RuntimeError("backward before forward(train=True)")
        xhat, inv = self._cache
        d = self.dim
        g2 = grad.reshape(-1, d)
        x2 = xhat.reshape(-1, d)
        self.gain.grad += (g2 * x2).sum(axis=0)
        self.shift.grad += g2.sum(axis=0)
        dxhat = grad * self.gain.value
        term = (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return term * inv


class Conv2d(Layer):
    """2D cross-correlation with stride and zero padding, via im2col."""

    def __init__(self, in_ch: int, out_ch: int, ksize: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, name: str = "conv", dtype=np.float64):
        if ksize < 1 or stride < 1 or padding < 0:
            raise DimensionError("conv2d needs ksize/stride >= 1 and padding >= 0")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.ksize, self.stride, self.padding = ksize, stride, padding
        fan_in = ksize * ksize * in_ch
        self.weight = Parameter(
            f"{name}.weight",
            glorot_uniform(rng, (ksize, ksize, in_ch, out_ch), fan_in, out_ch, dtype),
        )
        self.bias = Parameter(f"{name}.bias", np.zeros(out_ch, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def _out_hw(self, h, w):
        k, s, p = self.ksize, self.stride, self.padding
        if h + 2 * p < k or w + 2 * p < k:
            raise DimensionError(f"kernel {k} does not fit {h}x{w} input with padding {p}")
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def _im2col(self, xp, ho, wo):
        b = xp.shape[0]
        k, s, c = self.ksize, self.stride, self.in_ch
        cols = np.empty((b, ho, wo, k, k, c), dtype=xp.dtype)
        for di in range(k):
            for dj in range(k):
                cols[:, :, :, di, dj, :] = xp[:, di : di + ho * s : s, dj : dj + wo * s : s, :]
        return cols.reshape(b, ho, wo, k * k * c)

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[3] != self.in_ch:
            raise DimensionError(
                f"conv2d expects (B, H, W, {self.in_ch}), got {x.shape}"
            )
        _require_finite(x, "conv2d")
        b, h, w, _ = x.shape
        ho, wo = self._out_hw(h, w)
        p = self.padding
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        cols = self._im2col(xp, ho, wo)
        wmat = self.weight.value.reshape(-1, self.out_ch)
        y = cols @ wmat + self.bias.value
        if train:
            self._cache = (cols, xp.shape, (h, w))
        return y

    def backward(self, grad):
        if self._cache is None:
            raise RuntimeError("backward before forward(train=True)")
        cols, xp_shape, (h, w) = self._cache
        b, ho, wo, _ = grad.shape
        k, s, p, c = self.ksize, self.stride, self.padding, self.in_ch
        g2 = grad.reshape(-1, self.out_ch)
        self.weight.grad += (cols.reshape(-1, k * k * c).T @ g2).reshape(self.weight.value.shape)
        self.bias.grad += g2.sum(axis=0)
        gcols = (grad @ self.weight.value.reshape(-1, self.out_ch).T).reshape(
            b, ho, wo, k, k, c
        )
        gxp = np.zeros(xp_shape, dtype=grad.dtype)
        for di in range(k):
            for dj in range(k):
                gxp[:, di : di + ho * s : s, dj : dj + wo * s : s, :] += gcols[:, :, :, di, dj, :]
        if p:
            return gxp[:, p : p + h, p : p + w, :]
        return gxp


class MaxPool2x2(Layer):
    """Non-overlapping 2x2 max pool; ties route the gradient to one winner."""

    def __init__(self):
        self._cache = None

    def forward(self, x, train=False):
        if x.ndim != 4:
            raise DimensionError(f"maxpool expects (B, H, W, C), got {x.shape}")
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise DimensionError(f"maxpool needs even height/width, got {h}x{w}")
        win = (
            x.reshape(b, h // 2, 2, w // 2, 2, c)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(b, h // 2, w // 2, c, 4)
        )
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        if train:
            self._cache = (idx, x.shape)
        return y

    def backward(self, grad):
        if self._cache is None:
            raise RuntimeError("backward before forward(train=True)")
        idx, (b, h, w, c) = self._cache
        gwin = np.zeros((b, h // 2, w // 2, c, 4), dtype=grad.dtype)
        np.put_along_axis(gwin, idx[..., None], grad[..., None], axis=-1)
        return (
            gwin.reshape(b, h // 2, w // 2, c, 2, 2)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(b, h, w, c)
        )


class GlobalAvgPool(Layer):
    """(B, H, W, C) -> (B, C) spatial mean."""

    def __init__(self):
        self._hw = None

    def forward(self, x, train=False):
        if x.ndim != 4:
            raise DimensionError(f"global pool expects (B, H, W, C), got {x.shape}")
        if train:
            self._hw = x.shape[1:3]
        return x.mean(axis=(1, 2))

    def backward(self, grad):
        if self._hw is None:
            raise RuntimeError("backward before forward(train=True)")
        h, w = self._hw
        return np.broadcast_to(grad[:, None, None, :] / (h * w), grad.shape[:1] + (h, w) + grad.shape[1:]).copy()


class SpiralConv(Layer):
    """Gather each node's spiral neighborhood, concatenate, apply shared MLP.

    The per-node map is a two-layer perceptron with an ELU between, so
    one spiral-conv layer can mix neighborhood features nonlinearly.
    All nodes share the same weights; the spiral index matrix supplies
    the neighborhood ordering (one row per output node).
    """

    def __init__(self, in_dim: int, out_dim: int, spiral_len: int, rng: np.random.Generator,
                 hidden: int | None = None, name: str = "spiral", dtype=np.float64):
        if spiral_len < 1:
            raise DimensionError(f"spiral length must be >= 1, got {spiral_len}")
        self.in_dim, self.out_dim, self.spiral_len = in_dim, out_dim, spiral_len
        self.hidden = out_dim if hidden is None else hidden
        self.fc1 = Dense(spiral_len * in_dim, self.hidden, rng, f"{name}.fc1", dtype)
        self.act = Elu()
        self.fc2 = Dense(self.hidden, out_dim, rng, f"{name}.fc2", dtype)
        self._cache = None

    def params(self):
        return self.fc1.params() + self.fc2.params()

    def forward(self, x, spirals, train=False):
        spirals = np.asarray(spirals)
        if spirals.ndim != 2 or spirals.shape[1] != self.spiral_len:
            raise DimensionError(
                f"spiral matrix must be (M, {self.spiral_len}), got {spirals.shape}"
            )
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"expected node width {self.in_dim}, got {x.shape}")
        if spirals.min() < 0 or spirals.max() >= x.shape[-2]:
            raise DimensionError("spiral indices outside node range")
        _require_finite(x, "spiral conv")
        gathered = x[..., spirals, :]
        lead = gathered.shape[:-2]
        cat = gathered.reshape(lead + (self.spiral_len * self.in_dim,))
        y = self.fc2.forward(self.act.forward(self.fc1.forward(cat, train), train), train)
        if train:
            self._cache = (spirals, x.shape)
        return y

    def backward(self, grad):
        if self._cache is None:
            raise RuntimeError("backward before forward(train=True)")
        spirals, x_shape = self._cache
        gcat = self.fc1.backward(self.act.backward(self.fc2.backward(grad)))
        gath = gcat.reshape(gcat.shape[:-1] + (self.spiral_len, self.in_dim))
        gx = np.zeros(x_shape, dtype=grad.dtype)
        if gx.ndim == 2:
            np.add.at(gx, spirals.reshape(-1), gath.reshape(-1, self.in_dim))
        else:
            flat = gx.reshape(-1, *x_shape[-2:])
            gf = gath.reshape(flat.shape[0], -1, self.in_dim)
            for b in range(flat.shape[0]):
                np.add.at(flat[b], spirals.reshape(-1), gf[b])
            gx = flat.reshape(x_shape)
        return gx


class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 initial_step: int = 0):
        self.parameters = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = int(initial_step)
        self._m = [np.zeros_like(p.value) for p in self.parameters]
        self._v = [np.zeros_like(p.value) for p in self.parameters]

    def zero_grad(self):
        for p in self.parameters:
            p.grad[...] = 0

    def step(self):
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for p, m, v in zip(self.parameters, self._m, self._v):
            g = p.grad
            if not np.isfinite(np.sum(g)):
                raise TrainingDivergedError(f"non-finite gradient for {p.name}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def finite_diff_check(loss_fn, grad_fn, wrt, step: float = 1e-6, floor: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn() re-evaluates the scalar loss from current array contents;
    grad_fn() returns analytic gradient arrays aligned with ``wrt``, the
    list of arrays to probe (perturbed in place and restored). The
    relative error denominator is floored so near-zero coordinate pairs
    compare absolutely.
    """
    grads = [np.array(g, dtype=np.float64, copy=True) for g in grad_fn()]
    if len(grads) != len(wrt):
        raise DimensionError(f"grad_fn returned {len(grads)} arrays for {len(wrt)} targets")
    worst = 0.0
    for arr, g in zip(wrt, grads):
        if arr.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} != array shape {arr.shape}")
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = float(loss_fn())
            flat[i] = orig - step
            lm = float(loss_fn())
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * step)
            analytic = float(gflat[i])
            err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), floor)
            worst = max(worst, err)
    return worst
