"""Forward/backward kernels for the 2D engine.

All spatial ops use stride 1 and "same" zero padding, so feature maps keep
their H x W size through every layer. Convolution is im2col + one BLAS matmul;
the column gather understands dilation directly. Reductions that feed
parameters or statistics accumulate in float64 regardless of tensor dtype.
"""

from __future__ import annotations

import numpy as np

from ..errors import DataError, NumericalError

LOG_CLAMP = 1e-7
DICE_SMOOTH = 1e-5


def _same_pad(k: int, d: int) -> int:
    return (k - 1) // 2 * d


def _check_conv_args(x, w, dilation):
    if x.ndim != 4:
        raise DataError(f"conv input must be (N,H,W,C), got shape {x.shape}")
    kh, kw, in_c, _ = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DataError(f"kernel extents must be odd, got {kh}x{kw}")
    if x.shape[3] != in_c:
        raise DataError(f"input has {x.shape[3]} channels, kernel expects {in_c}")
    if dilation < 1:
        raise DataError(f"dilation must be >= 1, got {dilation}")


def strided_taps(xp, h: int, w: int, kh: int, kw: int, dilation: int):
    """(N, Hp, Wp, C) padded array -> overlapping (N, h, w, kh, kw, C) tap view."""
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(n, h, w, kh, kw, c),
        strides=(sn, sh, sw, sh * dilation, sw * dilation, sc))


def im2col(x, kh: int, kw: int, dilation: int, out=None):
    """Gather dilated kh*kw neighborhoods: (N,H,W,C) -> (N*H*W, kh*kw*C)."""
    n, h, w_, c = x.shape
    if kh == 1 and kw == 1:
        return x.reshape(n * h * w_, c)
    ph, pw = _same_pad(kh, dilation), _same_pad(kw, dilation)
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    if out is None:
        out = np.empty((n, h, w_, kh * kw * c), dtype=x.dtype)
    cols = out.reshape(n, h, w_, kh, kw, c)
    np.copyto(cols, strided_taps(xp, h, w_, kh, kw, dilation))
    return cols.reshape(n * h * w_, kh * kw * c)


def col2im(dcols, x_shape, kh: int, kw: int, dilation: int):
    """Scatter-add column gradients back onto the (padded) input grid."""
    n, h, w_, c = x_shape
    if kh == 1 and kw == 1:
        return dcols.reshape(n, h, w_, c)
    ph, pw = _same_pad(kh, dilation), _same_pad(kw, dilation)
    dxp = np.zeros((n, h + 2 * ph, w_ + 2 * pw, c), dtype=dcols.dtype)
    dc = dcols.reshape(n, h, w_, kh * kw, c)
    t = 0
    for i in range(kh):
        for j in range(kw):
            dxp[:, i * dilation:i * dilation + h,
                j * dilation:j * dilation + w_, :] += dc[:, :, :, t, :]
            t += 1
    return np.ascontiguousarray(dxp[:, ph:ph + h, pw:pw + w_, :])


def conv2d(x, w, b, dilation: int = 1):
    """Dilated same-padding convolution; w is (kh, kw, inC, outC), b is (outC,)."""
    _check_conv_args(x, w, dilation)
    n, h, w_, _ = x.shape
    kh, kw, in_c, out_c = w.shape
    cols = im2col(x, kh, kw, dilation)
    y = cols @ w.reshape(kh * kw * in_c, out_c)
    y += b
    return y.reshape(n, h, w_, out_c)


def conv2d_backward(x, w, dilation: int, dy, cols=None):
    """Gradients of conv2d w.r.t. input, weights, and bias.

    ``cols`` may pass the forward's im2col buffer to skip regathering.
    """
    _check_conv_args(x, w, dilation)
    kh, kw, in_c, out_c = w.shape
    if dy.shape != x.shape[:3] + (out_c,):
        raise DataError(f"upstream gradient shape {dy.shape} does not match output")
    dyf = dy.reshape(-1, out_c)
    if cols is None:
        cols = im2col(x, kh, kw, dilation)
    dw = (cols.T @ dyf).reshape(w.shape)
    db = dyf.sum(axis=0, dtype=np.float64).astype(w.dtype)
    dcols = dyf @ w.reshape(kh * kw * in_c, out_c).T
    dx = col2im(dcols, x.shape, kh, kw, dilation)
    return dx, dw, db


def batchnorm_forward(x, gamma, beta, running_mean, running_var, eps: float,
                      momentum: float, training: bool, n_updates: int = 1):
    """Per-channel batch normalization over the (N, H, W) axes.

    Train mode normalizes with batch statistics (population variance) and
    updates the running arrays in place; infer mode uses the running stats and
    requires them to have been updated at least once.

    Returns (y, cache) where cache feeds batchnorm_backward (None in infer mode).
    """
    if training:
        m = x.shape[0] * x.shape[1] * x.shape[2]
        mu = np.mean(x, axis=(0, 1, 2), dtype=np.float64)
        xm = x - mu
        var = np.einsum("nhwc,nhwc->c", xm, xm, optimize=False) / m
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xm * inv).astype(x.dtype)
        y = xhat * gamma + beta
        running_mean *= momentum
        running_mean += ((1.0 - momentum) * mu).astype(running_mean.dtype)
        running_var *= momentum
        running_var += ((1.0 - momentum) * var).astype(running_var.dtype)
        return y.astype(x.dtype), (xhat, inv.astype(x.dtype), gamma)
    if n_updates < 1:
        raise NumericalError("batch norm inference requires trained running statistics")
    inv = 1.0 / np.sqrt(running_var.astype(np.float64) + eps)
    y = (x - running_mean) * (gamma * inv).astype(x.dtype) + beta
    return y.astype(x.dtype), None


def batchnorm_backward(dy, cache):
    """Analytic gradient through train-mode batch normalization."""
    xhat, inv, gamma = cache
    m = float(dy.shape[0] * dy.shape[1] * dy.shape[2])
    dgamma = np.sum(dy * xhat, axis=(0, 1, 2), dtype=np.float64)
    dbeta = np.sum(dy, axis=(0, 1, 2), dtype=np.float64)
    coef = (gamma * inv).astype(dy.dtype)
    dx = coef * (dy - (dbeta / m).astype(dy.dtype)
                 - xhat * (dgamma / m).astype(dy.dtype))
    return dx.astype(dy.dtype), dgamma.astype(gamma.dtype), dbeta.astype(gamma.dtype)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    return np.where(x > 0, dy, 0).astype(dy.dtype)


def softmax(x):
    """Softmax over the channel (last) axis; rows sum to 1."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dy, y):
    inner = np.sum(dy * y, axis=-1, keepdims=True)
    return (y * (dy - inner)).astype(y.dtype)


def dropout(x, rate: float, rng, training: bool):
    """Inverted dropout: train mode zeroes units with probability ``rate`` and
    scales survivors by 1/(1-rate); infer mode is the identity.

    Returns (y, mask); mask is None in infer mode.
    """
    if not 0.0 <= rate < 1.0:
        raise DataError(f"dropout rate {rate} outside [0, 1)")
    if not training or rate == 0.0:
        return x, None
    u = rng.random(x.shape, dtype=np.float32)
    mask = u >= rate
    scale = x.dtype.type(1.0 / (1.0 - rate))
    return x * mask * scale, mask


def dropout_backward(dy, mask, rate: float):
    if mask is None:
        return dy
    return dy * mask * dy.dtype.type(1.0 / (1.0 - rate))


def glorot_uniform(fan_in: int, fan_out: int, shape, rng, dtype=np.float32):
    """Uniform on [-L, L] with L = sqrt(6 / (fan_in + fan_out))."""
    if fan_in <= 0 or fan_out <= 0:
        raise DataError("fans must be positive")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def he_uniform(fan_in: int, shape, rng, dtype=np.float32):
    """Uniform on [-L, L] with L = sqrt(6 / fan_in)."""
    if fan_in <= 0:
        raise DataError("fan_in must be positive")
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def dice_loss(pred_fg, target_fg, smooth: float = DICE_SMOOTH):
    """Soft overlap loss 1 - (2*sum(x*y)+s) / (sum(x^2)+sum(y^2)+s).

    Sums run over the whole tensor (batch included). Returns (loss, dpred).
    """
    if pred_fg.shape != target_fg.shape:
        raise DataError(f"shape mismatch {pred_fg.shape} vs {target_fg.shape}")
    x = pred_fg.astype(np.float64, copy=False)
    y = target_fg.astype(np.float64, copy=False)
    inter = float(np.sum(x * y))
    denom = float(np.sum(x * x) + np.sum(y * y)) + smooth
    num = 2.0 * inter + smooth
    loss = 1.0 - num / denom
    # d(1 - num/denom)/dx = -(2*y*denom - num*2*x) / denom^2
    dpred = ((num * 2.0 * x - 2.0 * y * denom) / (denom * denom)).astype(pred_fg.dtype)
    return loss, dpred


def weighted_cross_entropy(probs, target_labels, class_weights):
    """Mean weighted categorical cross-entropy over pixels.

    ``probs`` is the softmax output (N,H,W,C); ``target_labels`` an integer
    (N,H,W) class map; ``class_weights`` one weight per class. The log argument
    is clamped at 1e-7. Returns (loss, dprobs).
    """
    n, h, w_, c = probs.shape
    weights = np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (c,):
        raise DataError(f"need {c} class weights, got shape {weights.shape}")
    if target_labels.shape != (n, h, w_):
        raise DataError(f"label shape {target_labels.shape} != {(n, h, w_)}")
    npix = n * h * w_
    labels = target_labels.astype(np.intp)
    p_true = np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0]
    clamped = np.maximum(p_true, probs.dtype.type(LOG_CLAMP))
    w_pix = weights[labels]
    loss = float(-np.sum(w_pix * np.log(clamped.astype(np.float64))) / npix)
    dprobs = np.zeros_like(probs)
    dtrue = np.where(p_true > LOG_CLAMP,
                     (-w_pix / npix / clamped.astype(np.float64)), 0.0)
    np.put_along_axis(dprobs, labels[..., None],
                      dtrue[..., None].astype(probs.dtype), axis=-1)
    return loss, dprobs
