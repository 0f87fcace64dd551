"""Neural-network layers for grouped-ensemble 1-D CNNs.

Every operation is differentiable through the tensor engine. Grouped
convolution and group normalization are the load-bearing pieces: a grouped
layer must behave exactly like the corresponding stack of independent
per-group layers, which is what makes a single grouped model equivalent to
an ensemble of separate models.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DEFAULT_DTYPE, Tensor

NORM_EPSILON = 1e-5
NORM_KINDS = ("layer", "group", "batch")


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _as_streams(rng, groups: int) -> list[np.random.Generator]:
    """Normalize an rng argument to one stream per parameter group."""
    if isinstance(rng, np.random.Generator):
        return [rng] * groups
    streams = list(rng)
    if len(streams) < groups:
        raise ValueError(f"need {groups} init streams, got {len(streams)}")
    return streams[:groups]


# -- convolution -------------------------------------------------------------------


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None, *,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 1-D cross-correlation.

    ``x`` is (batch, in_channels, width); ``weight`` is
    (out_channels, in_channels // groups, kernel). With ``groups=N`` the
    input channels split into N equal blocks, each convolved with its own
    weight slice, so block g of the output depends only on block g of the
    input.
    """
    b, cin, w = x.shape
    cout, cin_g, k = weight.shape
    if cin % groups or cout % groups:
        raise ValueError(f"channels not divisible by groups: in={cin}, out={cout}, "
                         f"groups={groups}")
    if cin_g != cin // groups:
        raise ValueError(f"weight expects {cin_g * groups} input channels "
                         f"(groups={groups}), input has {cin}")
    if w + 2 * padding < k:
        raise ValueError(f"window of width {w} (padding {padding}) is shorter than "
                         f"kernel {k}")

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding)))
    windows = sliding_window_view(xd, k, axis=2)[:, :, ::stride]  # (b, cin, wout, k)
    wout = windows.shape[2]
    cout_g = cout // groups

    # stacked matmul layout (BLAS-friendly): per group, rows are (batch, pos)
    # and columns are the flattened (in-channel, tap) patch
    patches = np.ascontiguousarray(
        windows.reshape(b, groups, cin_g, wout, k).transpose(1, 0, 3, 2, 4)
    ).reshape(groups, b * wout, cin_g * k)
    wmat = weight.data.reshape(groups, cout_g, cin_g * k)

    out = patches @ wmat.transpose(0, 2, 1)  # (groups, b*wout, cout_g)
    out = out.reshape(groups, b, wout, cout_g).transpose(1, 0, 3, 2) \
        .reshape(b, cout, wout)
    if bias is not None:
        out = out + bias.data[None, :, None]

    padded_w = xd.shape[2]

    def backward(g):
        gg = np.ascontiguousarray(
            g.reshape(b, groups, cout_g, wout).transpose(1, 0, 3, 2)
        ).reshape(groups, b * wout, cout_g)
        grad_w = (gg.transpose(0, 2, 1) @ patches).reshape(cout, cin_g, k)
        grad_b = g.sum(axis=(0, 2)) if bias is not None else None
        grad_patches = (gg @ wmat).reshape(groups, b, wout, cin_g, k) \
            .transpose(1, 0, 3, 2, 4).reshape(b, cin, wout, k)
        gxp = np.zeros((b, cin, padded_w), dtype=g.dtype)
        for kk in range(k):
            gxp[:, :, kk:kk + stride * wout:stride] += grad_patches[:, :, :, kk]
        grad_x = gxp[:, :, padding:padding + w] if padding else gxp
        if bias is not None:
            return grad_x, grad_w, grad_b
        return grad_x, grad_w

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.record(out, parents, backward, "conv1d")


class Conv1d:
    """1-D convolution layer with optional channel grouping.

    Default padding preserves width for odd kernels at stride 1. When a
    list of generators is supplied, each channel group draws its weights
    from its own stream, keeping ensemble groups independently initialized.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, *,
                 stride: int = 1, padding: int | None = None, groups: int = 1,
                 dtype=DEFAULT_DTYPE, rng=None,
                 weight: np.ndarray | None = None, bias: np.ndarray | None = None):
        if in_channels % groups or out_channels % groups:
            raise ValueError(f"channels not divisible by groups: in={in_channels}, "
                             f"out={out_channels}, groups={groups}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = (kernel_size - 1) // 2 if padding is None else padding
        self.groups = groups

        cin_g = in_channels // groups
        cout_g = out_channels // groups
        fan_in = cin_g * kernel_size
        if weight is None:
            streams = _as_streams(rng, groups)
            weight = np.empty((out_channels, cin_g, kernel_size), dtype=dtype)
            for g in range(groups):
                weight[g * cout_g:(g + 1) * cout_g] = he_uniform(
                    streams[g], (cout_g, cin_g, kernel_size), fan_in, dtype)
        if bias is None:
            streams = _as_streams(rng, groups)
            bias = np.empty(out_channels, dtype=dtype)
            for g in range(groups):
                bias[g * cout_g:(g + 1) * cout_g] = he_uniform(
                    streams[g], (cout_g,), fan_in, dtype)
        self.weight = Tensor(np.asarray(weight, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.asarray(bias, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, "
                             f"got {x.shape[1]}")
        return conv1d(x, self.weight, self.bias, stride=self.stride,
                      padding=self.padding, groups=self.groups)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


# -- normalization -----------------------------------------------------------------


def _normalize(values: np.ndarray, axis, eps: float):
    mean = values.mean(axis=axis, keepdims=True)
    var = values.var(axis=axis, keepdims=True)  # population variance
    inv = 1.0 / np.sqrt(var + eps)
    return (values - mean) * inv, inv


def _norm_backward(g, y, inv, axis):
    # d/dx of y = (x - mean) * inv over the normalization set
    g_mean = g.mean(axis=axis, keepdims=True)
    gy_mean = (g * y).mean(axis=axis, keepdims=True)
    return inv * (g - g_mean - y * gy_mean)


class NormLayer:
    """Layer, group, or batch normalization without scale/shift parameters.

    Group normalization with N groups is exactly N independent layer
    normalizations, one per channel block. Batch normalization keeps
    per-channel running statistics for inference (population variance,
    momentum update).
    """

    def __init__(self, kind: str, num_channels: int, *, groups: int = 1,
                 eps: float = NORM_EPSILON, momentum: float = 0.1,
                 dtype=DEFAULT_DTYPE):
        if kind not in NORM_KINDS:
            raise ValueError(f"unknown normalization kind {kind!r}")
        if eps <= 0:
            raise ValueError(f"epsilon must be positive, got {eps}")
        if kind == "layer":
            groups = 1
        if kind == "group" and num_channels % groups:
            raise ValueError(f"{num_channels} channels not divisible into "
                             f"{groups} groups")
        self.kind = kind
        self.num_channels = num_channels
        self.groups = groups
        self.eps = eps
        self.momentum = momentum
        self.training = True
        if kind == "batch":
            self.running_mean = np.zeros(num_channels, dtype=dtype)
            self.running_var = np.ones(num_channels, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        b, c, w = x.shape
        if c != self.num_channels:
            raise ValueError(f"expected {self.num_channels} channels, got {c}")
        if self.kind == "batch":
            return self._batch_forward(x)

        groups = self.groups
        xr = x.data.reshape(b, groups, (c // groups) * w)
        y, inv = _normalize(xr, axis=2, eps=self.eps)

        def backward(g):
            gr = g.reshape(b, groups, (c // groups) * w)
            return (_norm_backward(gr, y, inv, axis=2).reshape(b, c, w),)

        return Tensor.record(y.reshape(b, c, w), (x,), backward, self.kind + "norm")

    def _batch_forward(self, x: Tensor) -> Tensor:
        b, c, w = x.shape
        if self.training:
            if b < 2:
                raise ValueError("batch normalization needs batch size >= 2 in "
                                 "training mode")
            xd = x.data
            mean = xd.mean(axis=(0, 2))
            var = xd.var(axis=(0, 2))
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean
            self.running_var = (1 - m) * self.running_var + m * var
            inv = 1.0 / np.sqrt(var + self.eps)
            y = (xd - mean[None, :, None]) * inv[None, :, None]

            def backward(g):
                return (_norm_backward(g, y, inv[None, :, None], axis=(0, 2)),)

            return Tensor.record(y, (x,), backward, "batchnorm")

        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        y = (x.data - self.running_mean[None, :, None]) * inv[None, :, None]
        return Tensor.record(y, (x,), lambda g: (g * inv[None, :, None],), "batchnorm")

    def parameters(self) -> list[Tensor]:
        return []

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        if self.kind == "batch":
            return [("running_mean", self.running_mean),
                    ("running_var", self.running_var)]
        return []


# -- dense -----------------------------------------------------------------------


class Dense:
    """Fully-connected layer: (batch, in_features) -> (batch, out_features)."""

    def __init__(self, in_features: int, out_features: int, *,
                 dtype=DEFAULT_DTYPE, rng=None,
                 weight: np.ndarray | None = None, bias: np.ndarray | None = None):
        self.in_features = in_features
        self.out_features = out_features
        if weight is None:
            stream = _as_streams(rng, 1)[0]
            weight = he_uniform(stream, (out_features, in_features), in_features, dtype)
        if bias is None:
            stream = _as_streams(rng, 1)[0]
            bias = he_uniform(stream, (out_features,), in_features, dtype)
        self.weight = Tensor(np.asarray(weight, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.asarray(bias, dtype=dtype), requires_grad=True)

    def __call__(self, v: Tensor) -> Tensor:
        return dense(v, self.weight, self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def dense(v: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if v.ndim != 2 or v.shape[1] != weight.shape[1]:
        raise ValueError(f"feature mismatch: input {v.shape} vs weight "
                         f"{weight.shape}")
    vd, wd = v.data, weight.data
    out = vd @ wd.T + bias.data[None, :]

    def backward(g):
        return g @ wd, g.T @ vd, g.sum(axis=0)

    return Tensor.record(out, (v, weight, bias), backward, "dense")


# -- activations, pooling, heads --------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor.record(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def max_pool(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling along the width axis.

    A trailing remainder narrower than ``window`` is dropped. Channels are
    processed independently, so pooling commutes with channel grouping.
    """
    if window < 1:
        raise ValueError(f"pool window must be >= 1, got {window}")
    b, c, w = x.shape
    nw = w // window
    if nw == 0:
        raise ValueError(f"width {w} shorter than pool window {window}")
    xr = x.data[:, :, :nw * window].reshape(b, c, nw, window)
    idx = xr.argmax(axis=3)
    out = np.take_along_axis(xr, idx[..., None], axis=3)[..., 0]

    def backward(g):
        gx = np.zeros((b, c, nw, window), dtype=g.dtype)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=3)
        gx = gx.reshape(b, c, nw * window)
        if nw * window != w:
            gx = np.pad(gx, ((0, 0), (0, 0), (0, w - nw * window)))
        return (gx,)

    return Tensor.record(out, (x,), backward, "max_pool")


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over the width axis: (b, c, w) -> (b, c). Channel-independent."""
    b, c, w = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None] / w, (b, c, w)).copy(),)

    return Tensor.record(x.data.mean(axis=2), (x,), backward, "gap")


def softmax_temperature(p: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax of logits divided by a temperature.

    Dividing the logits by T before the (max-stabilized) softmax means that
    scaling logits by N and setting T=N reproduces the plain softmax
    bit-for-bit whenever N is a power of two.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = p.data / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - inner) / temperature,)

    return Tensor.record(y, (p,), backward, "softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean categorical cross-entropy from raw logits.

    ``labels`` are integer class indices of shape (batch,). Computed via a
    max-shifted log-sum-exp for stability.
    """
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(b), labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(b), labels] -= 1.0
        return (grad * (g / b),)

    return Tensor.record(np.asarray(loss, dtype=logits.dtype), (logits,),
                         backward, "cross_entropy")
