"""Network building blocks with hand-written backward passes.

Every layer follows the same protocol::

    y, cache = layer.forward(x)
    dx = layer.backward(dy, cache, grads)

``forward`` never mutates the layer, so one set of weights can serve many
threads at once. ``backward`` adds parameter gradients into ``grads`` keyed
by the qualified parameter name.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GN_EPS = 1e-5


class SegNetError(ValueError):
    pass


class ChannelMismatch(SegNetError):
    pass


class NonPositiveOutputSize(SegNetError):
    pass


class ShapeMismatch(SegNetError):
    pass


class EmptyRates(SegNetError):
    pass


def _accumulate(grads: dict, name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


def conv_output_size(n: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvParams:
    weights: np.ndarray  # (C_out, C_in, k, k)
    bias: np.ndarray  # (C_out,)
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ShapeMismatch(f"weights must be (C_out, C_in, k, k), got {self.weights.shape}")
        if self.weights.shape[2] % 2 == 0:
            raise ShapeMismatch("kernel size must be odd")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeMismatch("bias must have one entry per output channel")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise SegNetError("need stride >= 1, dilation >= 1, padding >= 0")


def _conv_forward(x, w, b, stride, dilation, padding):
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    if c != ci:
        raise ChannelMismatch(f"input has {c} channels, kernel expects {ci}")
    ho = conv_output_size(h, k, stride, dilation, padding)
    wo = conv_output_size(wd, k, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise NonPositiveOutputSize(f"output size {ho}x{wo} for input {h}x{wd}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = np.empty((n, ho, wo, c, k, k), dtype=np.result_type(x, w))
    for i in range(k):
        r = i * dilation
        for j in range(k):
            q = j * dilation
            patch = xp[:, :, r:r + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    cols = cols.reshape(n * ho * wo, c * k * k)
    out = cols @ w.reshape(co, -1).T + b
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def _conv_backward(dy, cols, x_shape, w, stride, dilation, padding):
    n, c, h, wd = x_shape
    co, _, k, _ = w.shape
    _, _, ho, wo = dy.shape
    dy_r = dy.transpose(0, 2, 3, 1).reshape(-1, co)
    dw = (dy_r.T @ cols).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3))
    dcols = (dy_r @ w.reshape(co, -1)).reshape(n, ho, wo, c, k, k)
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=dy.dtype)
    for i in range(k):
        r = i * dilation
        for j in range(k):
            q = j * dilation
            dxp[:, :, r:r + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
    return np.ascontiguousarray(dx), dw, db


def conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Dilated, strided, zero-padded cross-correlation plus bias."""
    return _conv_forward(x, p.weights, p.bias, p.stride, p.dilation, p.padding)[0]


def conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    """Return ``(grad_x, grad_w, grad_b)`` for :func:`conv2d_forward`."""
    out, cols = _conv_forward(x, p.weights, p.bias, p.stride, p.dilation, p.padding)
    if grad_out.shape != out.shape:
        raise ShapeMismatch(f"grad_out shape {grad_out.shape} != output shape {out.shape}")
    return _conv_backward(grad_out, cols, x.shape, p.weights, p.stride, p.dilation, p.padding)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Module:
    def __init__(self, name: str):
        self.name = name

    def parameters(self) -> dict:
        return {}


class Conv2d(Module):
    """2-D convolution; ``bias=False`` for convs feeding a norm layer."""

    def __init__(self, name, c_in, c_out, k=3, stride=1, dilation=1, padding=None, bias=True):
        super().__init__(name)
        if k % 2 == 0:
            raise ShapeMismatch("kernel size must be odd")
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (k // 2) if padding is None else padding
        self.weight = np.zeros((c_out, c_in, k, k))
        self.bias = np.zeros(c_out) if bias else None

    def parameters(self):
        p = {f"{self.name}.weight": self.weight}
        if self.bias is not None:
            p[f"{self.name}.bias"] = self.bias
        return p

    def as_params(self) -> ConvParams:
        bias = self.bias if self.bias is not None else np.zeros(self.weight.shape[0])
        return ConvParams(self.weight, bias, self.stride, self.dilation, self.padding)

    def forward(self, x):
        bias = self.bias if self.bias is not None else 0.0
        y, cols = _conv_forward(x, self.weight, bias, self.stride, self.dilation, self.padding)
        return y, (cols, x.shape)

    def backward(self, dy, cache, grads):
        cols, x_shape = cache
        dx, dw, db = _conv_backward(dy, cols, x_shape, self.weight, self.stride, self.dilation, self.padding)
        _accumulate(grads, f"{self.name}.weight", dw)
        if self.bias is not None:
            _accumulate(grads, f"{self.name}.bias", db)
        return dx


class GroupNorm(Module):
    """Per-sample group normalization with a learned per-channel affine."""

    def __init__(self, name, channels, groups=4, eps=GN_EPS):
        super().__init__(name)
        if channels % groups:
            raise ShapeMismatch(f"{channels} channels do not split into {groups} groups")
        self.groups = groups
        self.eps = eps
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)

    def parameters(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def forward(self, x):
        n, c, h, w = x.shape
        g = x.reshape(n, self.groups, -1)
        mean = g.mean(axis=2, keepdims=True)
        var = g.var(axis=2, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = ((g - mean) * inv_std).reshape(x.shape)
        y = xhat * self.gamma[None, :, None, None] + self.beta[None, :, None, None]
        return y, (xhat, inv_std)

    def backward(self, dy, cache, grads):
        xhat, inv_std = cache
        n, c, h, w = dy.shape
        _accumulate(grads, f"{self.name}.gamma", (dy * xhat).sum(axis=(0, 2, 3)))
        _accumulate(grads, f"{self.name}.beta", dy.sum(axis=(0, 2, 3)))
        dxhat = (dy * self.gamma[None, :, None, None]).reshape(n, self.groups, -1)
        xh = xhat.reshape(n, self.groups, -1)
        m = xh.shape[2]
        dx = inv_std / m * (m * dxhat - dxhat.sum(axis=2, keepdims=True)
                            - xh * (dxhat * xh).sum(axis=2, keepdims=True))
        return dx.reshape(dy.shape)


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, y):
    return dy * (y > 0)


class ConvNormReLU(Module):
    """conv -> group norm -> ReLU."""

    def __init__(self, name, c_in, c_out, k=3, stride=1, dilation=1, groups=4):
        super().__init__(name)
        self.conv = Conv2d(f"{name}.conv", c_in, c_out, k, stride, dilation, bias=False)
        self.norm = GroupNorm(f"{name}.norm", c_out, groups)

    def parameters(self):
        return {**self.conv.parameters(), **self.norm.parameters()}

    def forward(self, x):
        a, c1 = self.conv.forward(x)
        b, c2 = self.norm.forward(a)
        y = relu_forward(b)
        return y, (c1, c2, y)

    def backward(self, dy, cache, grads):
        c1, c2, y = cache
        db = relu_backward(dy, y)
        da = self.norm.backward(db, c2, grads)
        return self.conv.backward(da, c1, grads)


class ResidualBlock(Module):
    """``ReLU(F(x) + shortcut(x))`` with F = conv-norm-ReLU-conv-norm.

    The shortcut is the identity when input and output shapes agree,
    otherwise a strided 1x1 projection.
    """

    def __init__(self, name, c_in, c_out, stride=1, groups=4):
        super().__init__(name)
        self.conv1 = Conv2d(f"{name}.conv1", c_in, c_out, 3, stride, bias=False)
        self.norm1 = GroupNorm(f"{name}.norm1", c_out, groups)
        self.conv2 = Conv2d(f"{name}.conv2", c_out, c_out, 3, 1, bias=False)
        self.norm2 = GroupNorm(f"{name}.norm2", c_out, groups)
        self.proj = None
        if stride != 1 or c_in != c_out:
            self.proj = Conv2d(f"{name}.proj", c_in, c_out, 1, stride, padding=0)

    def parameters(self):
        p = {}
        for m in (self.conv1, self.norm1, self.conv2, self.norm2, self.proj):
            if m is not None:
                p.update(m.parameters())
        return p

    def forward(self, x):
        a, ca = self.conv1.forward(x)
        b, cb = self.norm1.forward(a)
        r = relu_forward(b)
        c, cc = self.conv2.forward(r)
        d, cd = self.norm2.forward(c)
        if self.proj is None:
            s, cs = x, None
        else:
            s, cs = self.proj.forward(x)
        if s.shape != d.shape:
            raise ShapeMismatch(f"shortcut {s.shape} vs residual {d.shape}")
        y = relu_forward(d + s)
        return y, (ca, cb, r, cc, cd, cs, y)

    def backward(self, dy, cache, grads):
        ca, cb, r, cc, cd, cs, y = cache
        dsum = relu_backward(dy, y)
        dc = self.norm2.backward(dsum, cd, grads)
        dr = self.conv2.backward(dc, cc, grads)
        da = self.norm1.backward(relu_backward(dr, r), cb, grads)
        dx = self.conv1.backward(da, ca, grads)
        if self.proj is None:
            return dx + dsum
        return dx + self.proj.backward(dsum, cs, grads)


# ---------------------------------------------------------------------------
# Bilinear upsampling (align_corners = False)
# ---------------------------------------------------------------------------

def upsample_matrix(n: int, factor: int) -> np.ndarray:
    """(n*factor, n) interpolation matrix; sample i reads (i + 0.5)/factor - 0.5."""
    m = np.zeros((n * factor, n))
    for i in range(n * factor):
        src = max((i + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        lam = src - i0 if i0 < n - 1 else 0.0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def bilinear_upsample(x: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise SegNetError("upsample factor must be >= 1")
    if factor == 1:
        return x.copy()
    _, _, h, w = x.shape
    uh = upsample_matrix(h, factor)
    uw = upsample_matrix(w, factor)
    return np.ascontiguousarray(np.einsum("ih,nchw,jw->ncij", uh, x, uw, optimize=True))


def bilinear_upsample_backward(dy: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return dy.copy()
    _, _, ho, wo = dy.shape
    uh = upsample_matrix(ho // factor, factor)
    uw = upsample_matrix(wo // factor, factor)
    return np.ascontiguousarray(np.einsum("ih,ncij,jw->nchw", uh, dy, uw, optimize=True))


class Upsample(Module):
    def __init__(self, name, factor):
        super().__init__(name)
        self.factor = factor

    def forward(self, x):
        return bilinear_upsample(x, self.factor), None

    def backward(self, dy, cache, grads):
        return bilinear_upsample_backward(dy, self.factor)


# ---------------------------------------------------------------------------
# Atrous spatial pyramid pooling
# ---------------------------------------------------------------------------

class ASPP(Module):
    """Parallel 1x1, dilated 3x3 (one per rate) and image-pooling branches,
    concatenated and projected by a 1x1 conv-norm-ReLU."""

    def __init__(self, name, c_in, width, rates, groups=4):
        super().__init__(name)
        rates = list(rates)
        if not rates:
            raise EmptyRates("ASPP needs at least one atrous rate")
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise SegNetError("ASPP rates must be strictly increasing")
        self.rates = rates
        self.branches = [ConvNormReLU(f"{name}.b0", c_in, width, 1, groups=groups)]
        for i, r in enumerate(rates, start=1):
            self.branches.append(ConvNormReLU(f"{name}.b{i}", c_in, width, 3, dilation=r, groups=groups))
        self.pool_conv = Conv2d(f"{name}.pool", c_in, width, 1, padding=0)
        self.project = ConvNormReLU(f"{name}.project", width * (len(rates) + 2), width, 1, groups=groups)

    def parameters(self):
        p = {}
        for b in self.branches:
            p.update(b.parameters())
        p.update(self.pool_conv.parameters())
        p.update(self.project.parameters())
        return p

    def forward(self, x):
        _, _, h, w = x.shape
        outs, caches = [], []
        for b in self.branches:
            y, c = b.forward(x)
            outs.append(y)
            caches.append(c)
        pooled = x.mean(axis=(2, 3), keepdims=True)
        pz, pc = self.pool_conv.forward(pooled)
        pr = relu_forward(pz)
        outs.append(np.broadcast_to(pr, pr.shape[:2] + (h, w)))
        cat = np.concatenate(outs, axis=1)
        y, cproj = self.project.forward(cat)
        return y, (caches, pc, pr, cproj, (h, w), outs[0].shape[1])

    def backward(self, dy, cache, grads):
        caches, pc, pr, cproj, (h, w), width = cache
        dcat = self.project.backward(dy, cproj, grads)
        dx = None
        for i, (b, c) in enumerate(zip(self.branches, caches)):
            g = b.backward(dcat[:, i * width:(i + 1) * width], c, grads)
            dx = g if dx is None else dx + g
        dpool_b = dcat[:, len(self.branches) * width:].sum(axis=(2, 3), keepdims=True)
        dpooled = self.pool_conv.backward(relu_backward(dpool_b, pr), pc, grads)
        return dx + np.broadcast_to(dpooled / (h * w), dx.shape)


# ---------------------------------------------------------------------------
# Functional entry points
# ---------------------------------------------------------------------------

def residual_block(x: np.ndarray, block: ResidualBlock) -> np.ndarray:
    return block.forward(x)[0]


def aspp(x: np.ndarray, rates, module: ASPP) -> np.ndarray:
    if not list(rates):
        raise EmptyRates("ASPP needs at least one atrous rate")
    if list(rates) != module.rates:
        raise SegNetError(f"rates {list(rates)} do not match module rates {module.rates}")
    return module.forward(x)[0]
