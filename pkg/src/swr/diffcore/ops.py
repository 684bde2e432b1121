"""The fixed differentiable op set used by the backbone, policy net and losses.

Convolutions loop over kernel offsets and do one vectorized multiply-add per
offset; there is no im2col buffer.
"""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, make_output


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_output("add", a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return make_output("sub", a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; a scalar tensor broadcasts over the other operand."""
    _check_broadcast("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_output("mul", a.data * b.data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return make_output("scale", a.data * s, (a,), lambda g: (g * s,))


def sum(a: Tensor) -> Tensor:  # noqa: A001
    return make_output("sum", a.data.sum(dtype=a.data.dtype), (a,),
                       lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.dtype.type(a.size)
    return make_output("mean", a.data.mean(dtype=a.data.dtype), (a,),
                       lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make_output("matmul", a.data @ b.data, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return add(out, b) if b is not None else out


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, a.data.dtype.type(0))
    return make_output("relu", out, (a,), lambda g: (g * (out > 0),))


def abs(a: Tensor) -> Tensor:  # noqa: A001
    """|a| with subgradient 0 at the kink."""
    sign = np.sign(a.data)
    return make_output("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} to {shape}") from None
    return make_output("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_output("getitem", np.array(a.data[idx]), (a,), bw)


# ---------------------------------------------------------------------------
# convolutions

def _pair(v) -> tuple[int, int]:
    return (int(v), int(v)) if np.isscalar(v) else (int(v[0]), int(v[1]))


def _conv_geometry(op, x_shape, kh, kw, stride, padding):
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    _, _, h, w = x_shape
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(op, f"kernel {kh}x{kw} does not fit input {x_shape} with padding {(ph, pw)}")
    return sh, sw, ph, pw, ho, wo


def conv2d(x: Tensor, w: Tensor, stride=1, padding=0) -> Tensor:
    """Dense 2-D convolution (cross-correlation), x: (N,C,H,W), w: (O,C,kh,kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, _, _ = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError("conv2d", f"input channels {c} != kernel channels {cw}")
    sh, sw, ph, pw, ho, wo = _conv_geometry("conv2d", x.shape, kh, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    out = np.zeros((n, ho, wo, o), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw]
            out += np.tensordot(patch, w.data[:, :, i, j], axes=([1], [1]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bw(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw]
                    gw[:, :, i, j] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g, w.data[:, :, i, j], axes=([1], [0]))
                    gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += contrib.transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]]
        return gx, gw

    return make_output("conv2d", out, (x, w), bw)


def depthwise_conv2d(x: Tensor, w: Tensor, stride=1, padding=0) -> Tensor:
    """Per-channel convolution, x: (N,C,H,W), w: (C,1,kh,kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[1] != 1:
        raise ShapeError("depthwise_conv2d", f"expected (N,C,H,W) and (C,1,kh,kw), got {x.shape} and {w.shape}")
    n, c, _, _ = x.shape
    if w.shape[0] != c:
        raise ShapeError("depthwise_conv2d", f"input channels {c} != kernel channels {w.shape[0]}")
    _, _, kh, kw = w.shape
    sh, sw, ph, pw, ho, wo = _conv_geometry("depthwise_conv2d", x.shape, kh, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    out = np.zeros((n, c, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] * w.data[None, :, 0, i, j, None, None]

    def bw(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw]
                    gw[:, 0, i, j] = (g * patch).sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += g * w.data[None, :, 0, i, j, None, None]
            gx = gxp[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]]
        return gx, gw

    return make_output("depthwise_conv2d", out, (x, w), bw)


def pointwise_conv2d(x: Tensor, w: Tensor) -> Tensor:
    """1x1 convolution, x: (N,C,H,W), w: (O,C,1,1)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[2:] != (1, 1):
        raise ShapeError("pointwise_conv2d", f"expected (N,C,H,W) and (O,C,1,1), got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError("pointwise_conv2d", f"input channels {x.shape[1]} != kernel channels {w.shape[1]}")
    w2 = w.data[:, :, 0, 0]
    out = np.ascontiguousarray(np.tensordot(x.data, w2, axes=([1], [1])).transpose(0, 3, 1, 2))

    def bw(g):
        gw = np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None] if w.requires_grad else None
        gx = np.tensordot(g, w2, axes=([1], [0])).transpose(0, 3, 1, 2) if x.requires_grad else None
        return gx, gw

    return make_output("pointwise_conv2d", out, (x, w), bw)


# ---------------------------------------------------------------------------
# normalization and pooling

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, train: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Batch norm over channel axis 1 of a 2-D or 4-D input.

    Train mode normalizes with batch statistics and updates the running
    arrays in place (unbiased variance, torch convention). Eval mode is an
    affine map using the stored statistics and mutates nothing.
    """
    if x.data.ndim not in (2, 4):
        raise ShapeError("batch_norm", f"expected 2-D or 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,):
        raise ShapeError("batch_norm", f"channel count {c} does not match affine {gamma.shape}")
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.data.ndim == 2 else (1, c, 1, 1)
    dt = x.data.dtype.type
    m = x.size // c
    if train:
        if m < 2:
            raise ShapeError("batch_norm", "train mode needs more than one value per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= dt(1 - momentum)
        running_mean += dt(momentum) * mu.astype(running_mean.dtype)
        running_var *= dt(1 - momentum)
        running_var += dt(momentum) * (var * dt(m / (m - 1))).astype(running_var.dtype)
    else:
        mu = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)
    inv = dt(1) / np.sqrt(var + dt(eps))
    a = gamma.data * inv
    out = x.data * a.reshape(bshape) + (beta.data - mu * a).reshape(bshape)

    def bw(g):
        gsum = g.sum(axis=axes)
        # sum over batch/space of g * xhat, without materializing xhat
        gx_sum = (g * x.data).sum(axis=axes)
        gxhat_sum = (gx_sum - mu * gsum) * inv
        ggamma = gxhat_sum if gamma.requires_grad else None
        gbeta = gsum if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            if train:
                k = a * inv * gxhat_sum / dt(m)
                shift = (-a * gsum / dt(m) + k * mu).reshape(bshape)
                gx = g * a.reshape(bshape) - x.data * k.reshape(bshape) + shift
            else:
                gx = g * a.reshape(bshape)
        return gx, ggamma, gbeta

    return make_output("batch_norm", out.astype(x.data.dtype, copy=False), (x, gamma, beta), bw)


def avg_pool2d(x: Tensor, kernel) -> Tensor:
    """Non-overlapping average pool (stride = kernel); trailing remainder dropped."""
    if x.data.ndim != 4:
        raise ShapeError("avg_pool2d", f"expected 4-D input, got {x.shape}")
    kh, kw = _pair(kernel)
    n, c, h, w = x.shape
    ho, wo = h // kh, w // kw
    if ho < 1 or wo < 1:
        raise ShapeError("avg_pool2d", f"kernel {kh}x{kw} larger than input {h}x{w}")
    dt = x.data.dtype.type
    cropped = x.data[:, :, :ho * kh, :wo * kw]
    out = cropped.reshape(n, c, ho, kh, wo, kw).mean(axis=(3, 5), dtype=x.data.dtype)

    def bw(g):
        gx = np.zeros_like(x.data)
        spread = np.repeat(np.repeat(g, kh, axis=2), kw, axis=3) / dt(kh * kw)
        gx[:, :, :ho * kh, :wo * kw] = spread
        return (gx,)

    return make_output("avg_pool2d", out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool", f"expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    dt = x.data.dtype.type
    out = x.data.mean(axis=(2, 3), dtype=x.data.dtype)
    return make_output("global_avg_pool", out, (x,),
                       lambda g: (np.broadcast_to(g[:, :, None, None] / dt(h * w), x.shape).copy(),))


# ---------------------------------------------------------------------------
# softmax family and losses

def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    p = _softmax(a.data)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make_output("softmax", p, (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return make_output("log_softmax", out, (a,), bw)


def cross_entropy(logits: Tensor, labels, label_smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy of (N,K) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError("cross_entropy", f"logits {logits.shape} vs {labels.shape[0]} labels")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError("cross_entropy", f"labels outside [0, {k})")
    dt = logits.data.dtype.type
    target = np.full((n, k), dt(label_smoothing / k), dtype=logits.data.dtype)
    target[np.arange(n), labels] += dt(1.0 - label_smoothing)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -(target * logp).sum(dtype=logits.data.dtype) / dt(n)

    def bw(g):
        return (g * (np.exp(logp) - target) / dt(n),)

    return make_output("cross_entropy", np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


def gumbel_softmax_hard(logits: Tensor, tau: float, rng=None, noise: np.ndarray | None = None) -> Tensor:
    """Hard Gumbel-Softmax over the last axis with a straight-through gradient.

    The forward value is the one-hot argmax of ``(logits + g) / tau``; the
    backward pass uses the Jacobian of the tempered softmax at the same noise
    draw ``g``. Pass ``noise`` to pin ``g`` (gradient checks), otherwise it is
    drawn from ``rng``.
    """
    if not tau > 0:
        raise ValueError(f"gumbel_softmax_hard: tau must be positive, got {tau}")
    if noise is None:
        if rng is None:
            raise ValueError("gumbel_softmax_hard: need rng or explicit noise")
        noise = rng.gumbel(logits.shape)
    noise = np.asarray(noise, dtype=logits.data.dtype)
    if noise.shape != logits.shape:
        raise ShapeError("gumbel_softmax_hard", f"noise {noise.shape} vs logits {logits.shape}")
    dt = logits.data.dtype.type
    y = _softmax((logits.data + noise) / dt(tau))
    hard = np.zeros_like(y)
    np.put_along_axis(hard, y.argmax(axis=-1)[..., None], dt(1), axis=-1)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)) / dt(tau),)

    return make_output("gumbel_softmax_hard", hard, (logits,), bw)
