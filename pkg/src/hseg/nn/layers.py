"""Stateful layer objects wrapping the functional kernels.

Training forwards run through buffer-reusing fast paths: every large scratch
array (padded inputs, im2col columns, gradient workspaces, dropout masks) is
owned by its layer and recycled across iterations, which matters a lot more
than FLOPs on this engine's workloads. The buffers make layer outputs valid
only until the layer's next forward; the fixed architectures here never hold
an activation across iterations, and inference goes through the plain
functional kernels. Numerical results are identical to the functional path.
"""

from __future__ import annotations

import ctypes

import numpy as np

from ..errors import DataError, NumericalError
from . import functional as F

_MALLOC_TUNED = False


def enable_malloc_tuning() -> None:
    """Keep glibc from mmap-ing large blocks so big temporaries reuse pages.

    The training loop cycles through ~1 GB of short-lived arrays per
    iteration; with default malloc thresholds each allocation is a fresh mmap
    and every first touch page-faults. Raising the thresholds roughly halves
    iteration time. No-op on non-glibc platforms.
    """
    global _MALLOC_TUNED
    if _MALLOC_TUNED:
        return
    _MALLOC_TUNED = True
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(ctypes.c_int(-3), ctypes.c_int(1 << 30))  # M_MMAP_THRESHOLD
        libc.mallopt(ctypes.c_int(-1), ctypes.c_int(1 << 30))  # M_TRIM_THRESHOLD
    except OSError:
        pass


class Layer:
    kind = "base"

    def __init__(self):
        self._bufs: dict[str, np.ndarray] = {}

    def _buf(self, name: str, shape, dtype=np.float32) -> np.ndarray:
        buf = self._bufs.get(name)
        if buf is None or buf.shape != shape or buf.dtype != dtype:
            buf = np.empty(shape, dtype=dtype)
            self._bufs[name] = buf
        return buf

    def forward(self, x, training: bool = False, rng=None):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def parameters(self):
        """List of (name, array) learnable parameters."""
        return []

    def gradients(self):
        return []

    def state_arrays(self):
        """Parameters plus non-learnable state (e.g. running stats) for checkpoints."""
        return self.parameters()


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, kh: int, kw: int, in_c: int, out_c: int, dilation: int = 1):
        super().__init__()
        if dilation < 1:
            raise DataError(f"dilation must be >= 1, got {dilation}")
        self.kh, self.kw, self.in_c, self.out_c = kh, kw, in_c, out_c
        self.dilation = dilation
        self.w = np.zeros((kh, kw, in_c, out_c), dtype=np.float32)
        self.b = np.zeros(out_c, dtype=np.float32)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        # first layers of a network never need d(loss)/d(input)
        self.needs_input_grad = True
        self._x_shape = None
        self._live_cols = None

    @property
    def fan_in(self) -> int:
        return self.kh * self.kw * self.in_c

    @property
    def fan_out(self) -> int:
        return self.kh * self.kw * self.out_c

    def init_glorot(self, rng):
        self.w = F.glorot_uniform(self.fan_in, self.fan_out, self.w.shape, rng)
        self.b = np.zeros(self.out_c, dtype=np.float32)

    def init_he(self, rng):
        self.w = F.he_uniform(self.fan_in, self.w.shape, rng)
        self.b = np.zeros(self.out_c, dtype=np.float32)

    def _pad(self) -> tuple[int, int]:
        return ((self.kh - 1) // 2 * self.dilation, (self.kw - 1) // 2 * self.dilation)

    def _padded(self, name: str, x, channels: int):
        """Write x into the interior of a persistent zero-bordered buffer."""
        n, h, w_ = x.shape[:3]
        ph, pw = self._pad()
        shape = (n, h + 2 * ph, w_ + 2 * pw, channels)
        xp = self._bufs.get(name)
        if xp is None or xp.shape != shape:
            xp = np.zeros(shape, dtype=np.float32)
            self._bufs[name] = xp
        xp[:, ph:ph + h, pw:pw + w_, :] = x
        return xp

    def _gather_cols(self, name: str, x, channels: int):
        """im2col through persistent buffers; border zeros are written once."""
        n, h, w_ = x.shape[:3]
        k = self.kh * self.kw * channels
        if self.kh == 1 and self.kw == 1:
            return x.reshape(n * h * w_, channels)
        xp = self._padded(f"{name}.pad", x, channels)
        cols = self._buf(name, (n * h * w_, k))
        np.copyto(cols.reshape(n, h, w_, self.kh, self.kw, channels),
                  F.strided_taps(xp, h, w_, self.kh, self.kw, self.dilation))
        return cols

    def forward(self, x, training: bool = False, rng=None):
        if x.shape[3] != self.in_c:
            raise DataError(f"conv expects {self.in_c} input channels, got {x.shape[3]}")
        if not training:
            return F.conv2d(x, self.w, self.b, self.dilation)
        n, h, w_, _ = x.shape
        k = self.kh * self.kw * self.in_c
        cols = self._gather_cols("cols", x, self.in_c)
        self._live_cols = cols
        self._x_shape = x.shape
        y = self._buf("y", (n * h * w_, self.out_c))
        np.matmul(cols, self.w.reshape(k, self.out_c), out=y)
        y += self.b
        return y.reshape(n, h, w_, self.out_c)

    def backward(self, dy):
        """Parameter gradients from the kept columns; the input gradient is the
        same-pad dilated correlation of dy with the flipped kernel, so it can
        be computed with a second gather + matmul instead of a scatter-add."""
        n, h, w_, c = self._x_shape
        k = self.kh * self.kw * self.in_c
        dyf = np.ascontiguousarray(dy.reshape(-1, self.out_c))
        cols = self._live_cols
        np.matmul(cols.T, dyf, out=self.dw.reshape(k, self.out_c))
        self.db = dyf.sum(axis=0, dtype=np.float64).astype(np.float32)
        if not self.needs_input_grad:
            return None
        if self.kh == 1 and self.kw == 1:
            dcols = self._buf("dcols", (n * h * w_, c))
            np.matmul(dyf, self.w.reshape(k, self.out_c).T, out=dcols)
            return dcols.reshape(n, h, w_, c)
        # dW consumed cols above, so the buffer can host the dy gather when
        # the channel counts match
        name = "cols" if self.in_c == self.out_c else "dycols"
        dycols = self._gather_cols(name, dy.reshape(n, h, w_, self.out_c), self.out_c)
        wflip = np.ascontiguousarray(
            self.w[::-1, ::-1].transpose(0, 1, 3, 2)).reshape(-1, self.in_c)
        dx = self._buf("dx", (n, h, w_, c))
        np.matmul(dycols, wflip, out=dx.reshape(n * h * w_, c))
        self._live_cols = None
        return dx

    def parameters(self):
        return [("w", self.w), ("b", self.b)]

    def gradients(self):
        return [("w", self.dw), ("b", self.db)]


class BatchNorm(Layer):
    kind = "bn"

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.9):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = np.ones(channels, dtype=np.float32)
        self.beta = np.zeros(channels, dtype=np.float32)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.n_updates = 0
        self.dgamma = np.zeros_like(self.gamma)
        self.dbeta = np.zeros_like(self.beta)
        self._inv = None

    def forward(self, x, training: bool = False, rng=None):
        if x.shape[3] != self.channels:
            raise DataError(f"batch norm expects {self.channels} channels, got {x.shape[3]}")
        if not training:
            y, _ = F.batchnorm_forward(x, self.gamma, self.beta, self.running_mean,
                                       self.running_var, self.eps, self.momentum,
                                       training=False, n_updates=self.n_updates)
            return y
        m = x.shape[0] * x.shape[1] * x.shape[2]
        mu = np.mean(x, axis=(0, 1, 2), dtype=np.float64)
        xhat = self._buf("xhat", x.shape)
        np.subtract(x, mu.astype(np.float32), out=xhat)
        sq = self._buf("sq", x.shape)
        np.multiply(xhat, xhat, out=sq)
        var = sq.sum(axis=(0, 1, 2), dtype=np.float64) / m
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat *= inv.astype(np.float32)
        self._inv = inv.astype(np.float32)
        y = self._buf("y", x.shape)
        np.multiply(xhat, self.gamma, out=y)
        y += self.beta
        self.running_mean *= self.momentum
        self.running_mean += ((1.0 - self.momentum) * mu).astype(np.float32)
        self.running_var *= self.momentum
        self.running_var += ((1.0 - self.momentum) * var).astype(np.float32)
        self.n_updates += 1
        return y

    def backward(self, dy):
        if self._inv is None:
            raise NumericalError("batch norm backward without a training forward")
        xhat = self._bufs["xhat"]
        sq = self._bufs["sq"]
        m = float(dy.shape[0] * dy.shape[1] * dy.shape[2])
        np.multiply(dy, xhat, out=sq)
        dgamma = sq.sum(axis=(0, 1, 2), dtype=np.float64)
        dbeta = dy.sum(axis=(0, 1, 2), dtype=np.float64)
        self.dgamma = dgamma.astype(np.float32)
        self.dbeta = dbeta.astype(np.float32)
        dx = self._buf("dx", dy.shape)
        np.multiply(xhat, (dgamma / m).astype(np.float32), out=dx)
        np.subtract(dy, dx, out=dx)
        dx -= (dbeta / m).astype(np.float32)
        dx *= self.gamma * self._inv
        return dx

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def gradients(self):
        return [("gamma", self.dgamma), ("beta", self.dbeta)]

    def state_arrays(self):
        return self.parameters() + [("running_mean", self.running_mean),
                                    ("running_var", self.running_var)]


class ReLU(Layer):
    kind = "relu"

    def __init__(self, inplace: bool = False):
        super().__init__()
        self.inplace = inplace
        self._mask = None

    def forward(self, x, training: bool = False, rng=None):
        if training:
            if self.inplace:
                y = np.maximum(x, 0.0, out=x)
            else:
                y = np.maximum(x, 0.0, out=self._buf("y", x.shape, x.dtype))
            mask = self._buf("mask", x.shape, np.bool_)
            np.greater(y, 0.0, out=mask)
            self._mask = mask
            return y
        return F.relu(x)

    def backward(self, dy):
        if self.inplace:
            dy *= self._mask
            return dy
        dx = self._buf("dx", dy.shape, dy.dtype)
        np.multiply(dy, self._mask, out=dx)
        return dx


class Softmax(Layer):
    kind = "softmax"

    def __init__(self):
        super().__init__()
        self._y = None

    def forward(self, x, training: bool = False, rng=None):
        y = F.softmax(x)
        if training:
            self._y = y
        return y

    def backward(self, dy):
        return F.softmax_backward(dy, self._y)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise DataError(f"dropout rate {rate} outside [0, 1)")
        self.rate = rate
        self._mask = None

    def forward(self, x, training: bool = False, rng=None):
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise DataError("training-mode dropout needs an rng stream")
        u = self._buf("u", x.shape)
        rng.random(out=u, dtype=np.float32)
        mask = self._buf("mask", x.shape, np.bool_)
        np.greater_equal(u, self.rate, out=mask)
        self._mask = mask
        y = self._buf("y", x.shape, x.dtype)
        np.multiply(x, mask, out=y)
        y *= 1.0 / (1.0 - self.rate)
        return y

    def backward(self, dy):
        if self._mask is None:
            return dy
        dx = self._buf("dx", dy.shape, dy.dtype)
        np.multiply(dy, self._mask, out=dx)
        dx *= 1.0 / (1.0 - self.rate)
        return dx
