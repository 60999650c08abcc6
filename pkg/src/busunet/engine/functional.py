"""Differentiable image operators on NCHW tensors."""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..errors import ParameterError, ShapeError
from .tensor import Tensor, make_result

BCE_EPS = 1e-7


def _require_rank4(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects a rank-4 NCHW tensor, got shape {x.shape}")


def _same_padding(k: int) -> tuple[int, int]:
    total = k - 1
    return total // 2, total - total // 2


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Gather sliding windows of padded input into a (C*kh*kw, N*ho*wo) matrix."""
    n, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add the adjoint of :func:`_im2col` back into a padded NCHW array."""
    n, c, hp, wp = shape
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    padding: str = "same",
    stride: int = 1,
) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    ``padding="same"`` zero-pads so a stride-1 output keeps H and W; any odd
    remainder goes to the trailing edge. ``"valid"`` uses no padding.
    """
    _require_rank4(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d kernel must be rank 4, got {weight.shape}")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = weight.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"same padding needs odd kernel extents, got {kh}x{kw}")
        (pt, pb), (pl, pr) = _same_padding(kh), _same_padding(kw)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ParameterError(f"unknown padding {padding!r}")
    hp, wp = h + pt + pb, w + pl + pr
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    if hp < kh or wp < kw or ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output would be empty for input {x.shape} and kernel {weight.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(cout, -1)
    out = (wmat @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gx = gw = None
        if x.requires_grad:
            gcols = wmat.T @ gmat
            gxp = _col2im(gcols, xp.shape, kh, kw, stride, ho, wo)
            gx = np.ascontiguousarray(gxp[:, :, pt : pt + h, pl : pl + w])
        if weight.requires_grad:
            # recompute windows instead of caching them; keeps peak memory ~kh*kw lower
            gw = (gmat @ _im2col(xp, kh, kw, stride, ho, wo).T).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(out, parents, grad_fn, "conv2d")


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias to an NCHW tensor."""
    _require_rank4(x, "bias_add")
    if bias.shape != (x.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} != ({x.shape[1]},)")
    out = x.data + bias.data.reshape(1, -1, 1, 1)
    return make_result(out, (x, bias), lambda g: (g, g.sum(axis=(0, 2, 3))), "bias_add")


def maxpool2d(x: Tensor, return_indices: bool = False):
    """2x2 max pooling with stride 2.

    Ties go to the first element of the window in row-major order, which is
    also the only element that receives gradient.
    """
    _require_rank4(x, "maxpool2d")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial extents, got {h}x{w}")
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        scattered = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(scattered, idx[..., None], g[..., None], axis=-1)
        gx = scattered.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    result = make_result(out, (x,), grad_fn, "maxpool2d")
    return (result, idx) if return_indices else result


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by a factor of two in H and W."""
    _require_rank4(x, "upsample2x")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def grad_fn(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_result(out, (x,), grad_fn, "upsample2x")


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place as ``(1 - momentum) * old + momentum * batch``.
    In inference mode the running buffers are used unchanged.
    """
    _require_rank4(x, "batchnorm")
    c = x.shape[1]
    for name, arr in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"batchnorm {name} shape {arr.shape} != ({c},)")
    shape = (1, c, 1, 1)
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape).astype(x.dtype)) * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    m = x.data.size // c

    def grad_fn(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(shape)
        if training:
            dx = (inv.reshape(shape) / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3)).reshape(shape)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
            )
        else:
            dx = dxhat * inv.reshape(shape)
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), grad_fn, "batchnorm")


def dropout(x: Tensor, rate: float, training: bool = True, rng=None) -> Tensor:
    """Inverted dropout: surviving units are scaled by ``1 / (1 - rate)``.

    ``rng`` may be a ``numpy.random.Generator`` or an integer seed.
    """
    if not 0 <= rate < 1:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    keep = (gen.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def bce_loss(pred: Tensor, target, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to ``[eps, 1 - eps]``."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != pred.shape:
        raise ShapeError(f"bce_loss shape mismatch: pred {pred.shape} vs target {t.shape}")
    t = t.astype(pred.dtype, copy=False)
    p = np.clip(pred.data, eps, 1 - eps)
    n = p.size
    value = -(t * np.log(p) + (1 - t) * np.log1p(-p)).mean()
    inside = (pred.data >= eps) & (pred.data <= 1 - eps)

    def grad_fn(g):
        dp = (-(t / p) + (1 - t) / (1 - p)) * (g / n) * inside
        return (dp.astype(pred.dtype),)

    return make_result(np.asarray(value, dtype=pred.dtype), (pred,), grad_fn, "bce")


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)``, computed in logit space.

    Same value as ``bce_loss(sigmoid(z), t)`` away from the clamp, but the
    gradient ``(sigmoid(z) - t) / n`` never vanishes on saturated mistakes.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_with_logits shape mismatch: logits {logits.shape} vs target {t.shape}")
    z = logits.data
    t = t.astype(z.dtype, copy=False)
    n = z.size
    value = (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean()

    def grad_fn(g):
        p = np.where(z >= 0, 1 / (1 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))))
        return (((p - t) * (g / n)).astype(z.dtype),)

    return make_result(np.asarray(value, dtype=z.dtype), (logits,), grad_fn, "bce_logits")
