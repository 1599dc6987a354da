"""Dense tensor layers with hand-written forward/backward kernels.

Everything operates on channel-last numpy arrays with a leading batch axis:
images are (N, H, W, C), sequences are (N, T, C), vectors are (N, F).
Kernels are pure with respect to their inputs; each layer instance caches
what its own backward pass needs, so one layer object serves one forward
call at a time.

Geometry is deliberately restricted to what the model families need:
3x3 valid convolutions, 2x2 max pooling, 3-tap causal 1D convolutions
with dilation 1.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Layer",
    "Conv2D",
    "BatchNorm2D",
    "ReLU",
    "MaxPool2x2",
    "Dense",
    "LSTM",
    "CausalConv1D",
    "FakeQuantAct",
    "sigmoid",
    "softmax",
    "weighted_softmax_xent",
]

BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits, axis=-1):
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


class Layer:
    """Base class: named parameter dict plus matching gradient dict."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def zero_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


def _conv2d_valid(x, kernel):
    # x: (N, H, W, Cin), kernel: (3, 3, Cin, Cout) -> (N, H-2, W-2, Cout)
    patches = np.lib.stride_tricks.sliding_window_view(x, (3, 3), axis=(1, 2))
    # patches: (N, H-2, W-2, Cin, 3, 3)
    return np.einsum("nhwcij,ijco->nhwo", patches, kernel, optimize=True)


class Conv2D(Layer):
    """3x3 valid (no padding) convolution with bias."""

    def __init__(self, c_in, c_out, dtype=np.float32):
        super().__init__()
        self.c_in = c_in
        self.c_out = c_out
        self.params = {
            "kernel": np.zeros((3, 3, c_in, c_out), dtype=dtype),
            "bias": np.zeros(c_out, dtype=dtype),
        }
        self.quantize_weights = False
        self.weight_qparams = None  # set on QAT-prepared models

    def forward(self, x, train=False):
        if x.shape[-1] != self.c_in:
            raise ValueError(
                f"conv2d expects {self.c_in} input channels, got {x.shape[-1]}"
            )
        if x.shape[1] < 3 or x.shape[2] < 3:
            raise ValueError(f"conv2d needs spatial extent >= 3, got {x.shape[1:3]}")
        kernel = self.params["kernel"]
        if self.quantize_weights:
            kernel, self.weight_qparams = _fake_quant_weight(kernel)
        self._x = x
        self._kernel = kernel
        return _conv2d_valid(x, kernel) + self.params["bias"]

    def backward(self, dout):
        x, kernel = self._x, self._kernel
        patches = np.lib.stride_tricks.sliding_window_view(x, (3, 3), axis=(1, 2))
        self.grads["kernel"] = np.einsum(
            "nhwcij,nhwo->ijco", patches, dout, optimize=True
        ).astype(kernel.dtype)
        self.grads["bias"] = dout.sum(axis=(0, 1, 2)).astype(kernel.dtype)
        padded = np.pad(dout, ((0, 0), (2, 2), (2, 2), (0, 0)))
        windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
        # full correlation with the spatially flipped kernel recovers dx
        return np.einsum(
            "nhwoij,ijco->nhwc", windows, kernel[::-1, ::-1], optimize=True
        ).astype(x.dtype)


class BatchNorm2D(Layer):
    """Per-channel batch normalization over batch and spatial axes."""

    def __init__(self, channels, eps=BN_EPSILON, momentum=BN_MOMENTUM, dtype=np.float32):
        super().__init__()
        if channels < 1:
            raise ValueError("batchnorm needs at least one channel")
        self.eps = eps
        self.momentum = momentum
        self.params = {
            "gamma": np.ones(channels, dtype=dtype),
            "beta": np.zeros(channels, dtype=dtype),
        }
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x, train=False):
        axes = tuple(range(x.ndim - 1))
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.running_mean = (m * self.running_mean + (1 - m) * mean).astype(
                self.running_mean.dtype
            )
            self.running_var = (m * self.running_var + (1 - m) * var).astype(
                self.running_var.dtype
            )
        else:
            # inference computes the folded affine form a*x + b so the
            # output is bit-identical to a BN-folded model
            a, b = self.infer_affine()
            return a * x + b
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, axes, x.dtype)
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, dout):
        # assumes forward ran in train mode (batch statistics)
        xhat, inv_std, axes, dtype = self._cache
        gamma = self.params["gamma"]
        self.grads["gamma"] = (dout * xhat).sum(axis=axes).astype(gamma.dtype)
        self.grads["beta"] = dout.sum(axis=axes).astype(gamma.dtype)
        dxhat = dout * gamma
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=axes)
            - xhat * (dxhat * xhat).mean(axis=axes)
        )
        return dx.astype(dtype)

    def infer_affine(self):
        """Folded inference-mode form: y = a*x + b."""
        a = self.params["gamma"] / np.sqrt(self.running_var + self.eps)
        b = self.params["beta"] - a * self.running_mean
        return a, b


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0)

    def backward(self, dout):
        return np.where(self._mask, dout, 0)


class MaxPool2x2(Layer):
    """2x2 max pooling; gradient routed to the first maximum in scan order."""

    def forward(self, x, train=False):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
        blocks = (
            x.reshape(n, h // 2, 2, w // 2, 2, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(n, h // 2, w // 2, 4, c)
        )
        self._argmax = blocks.argmax(axis=3)  # first occurrence on ties
        self._shape = x.shape
        return np.take_along_axis(blocks, self._argmax[:, :, :, None, :], axis=3)[
            :, :, :, 0, :
        ]

    def backward(self, dout):
        n, h, w, c = self._shape
        dblocks = np.zeros((n, h // 2, w // 2, 4, c), dtype=dout.dtype)
        np.put_along_axis(dblocks, self._argmax[:, :, :, None, :], dout[:, :, :, None, :], axis=3)
        return (
            dblocks.reshape(n, h // 2, w // 2, 2, 2, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(n, h, w, c)
        )


class Dense(Layer):
    """Fully connected layer, optional ReLU."""

    def __init__(self, n_in, n_out, activation="none", dtype=np.float32):
        super().__init__()
        if activation not in ("none", "relu"):
            raise ValueError(f"unknown activation {activation!r}")
        self.n_in = n_in
        self.n_out = n_out
        self.activation = activation
        self.params = {
            "weight": np.zeros((n_in, n_out), dtype=dtype),
            "bias": np.zeros(n_out, dtype=dtype),
        }
        self.quantize_weights = False
        self.weight_qparams = None

    def forward(self, x, train=False):
        if x.shape[-1] != self.n_in:
            raise ValueError(f"dense expects length {self.n_in}, got {x.shape[-1]}")
        weight = self.params["weight"]
        if self.quantize_weights:
            weight, self.weight_qparams = _fake_quant_weight(weight)
        self._x = x
        self._weight = weight
        z = x @ weight + self.params["bias"]
        if self.activation == "relu":
            self._mask = z > 0
            return np.where(self._mask, z, 0)
        return z

    def backward(self, dout):
        if self.activation == "relu":
            dout = np.where(self._mask, dout, 0)
        weight = self._weight
        self.grads["weight"] = (self._x.T @ dout).astype(weight.dtype)
        self.grads["bias"] = dout.sum(axis=0).astype(weight.dtype)
        return dout @ weight.T


class LSTM(Layer):
    """Single LSTM cell unrolled over the time axis; returns the last hidden state.

    Gate order in the packed weight matrices is (input i, forget f, cell g,
    output o). Input is (N, T, F).
    """

    def __init__(self, n_in, hidden, dtype=np.float32):
        super().__init__()
        self.n_in = n_in
        self.hidden = hidden
        self.params = {
            "wx": np.zeros((n_in, 4 * hidden), dtype=dtype),
            "wh": np.zeros((hidden, 4 * hidden), dtype=dtype),
            "bias": np.zeros(4 * hidden, dtype=dtype),
        }

    @staticmethod
    def cell_step(x, h_prev, c_prev, wx, wh, bias, hidden):
        if h_prev.shape[-1] != hidden or c_prev.shape[-1] != hidden:
            raise ValueError("hidden-size mismatch in lstm cell step")
        gates = x @ wx + h_prev @ wh + bias
        i = sigmoid(gates[..., :hidden])
        f = sigmoid(gates[..., hidden : 2 * hidden])
        g = np.tanh(gates[..., 2 * hidden : 3 * hidden])
        o = sigmoid(gates[..., 3 * hidden :])
        c = f * c_prev + i * g
        h = o * np.tanh(c)
        return h, c, (i, f, g, o)

    def forward(self, x, train=False):
        if x.shape[-1] != self.n_in:
            raise ValueError(f"lstm expects input size {self.n_in}, got {x.shape[-1]}")
        n, t, _ = x.shape
        hd = self.hidden
        wx, wh, bias = self.params["wx"], self.params["wh"], self.params["bias"]
        h = np.zeros((n, hd), dtype=x.dtype)
        c = np.zeros((n, hd), dtype=x.dtype)
        steps = []
        for k in range(t):
            h_prev, c_prev = h, c
            h, c, gates = self.cell_step(x[:, k], h_prev, c_prev, wx, wh, bias, hd)
            steps.append((x[:, k], h_prev, c_prev, c, gates))
        self._steps = steps
        return h

    def backward(self, dout):
        wx, wh = self.params["wx"], self.params["wh"]
        hd = self.hidden
        dwx = np.zeros_like(wx)
        dwh = np.zeros_like(wh)
        dbias = np.zeros_like(self.params["bias"])
        dh = dout
        dc = np.zeros_like(dout)
        dx = np.empty((dout.shape[0], len(self._steps), self.n_in), dtype=dout.dtype)
        for k in reversed(range(len(self._steps))):
            xk, h_prev, c_prev, c, (i, f, g, o) = self._steps[k]
            tc = np.tanh(c)
            do = dh * tc
            dc = dc + dh * o * (1 - tc * tc)
            di = dc * g
            df = dc * c_prev
            dg = dc * i
            dc_prev = dc * f
            dgates = np.concatenate(
                [
                    di * i * (1 - i),
                    df * f * (1 - f),
                    dg * (1 - g * g),
                    do * o * (1 - o),
                ],
                axis=-1,
            )
            dwx += xk.T @ dgates
            dwh += h_prev.T @ dgates
            dbias += dgates.sum(axis=0)
            dx[:, k] = dgates @ wx.T
            dh = dgates @ wh.T
            dc = dc_prev
        self.grads = {"wx": dwx, "wh": dwh, "bias": dbias}
        return dx


class CausalConv1D(Layer):
    """3-tap causal 1D convolution (dilation 1) with ReLU.

    Left-pads two zero steps so the output has the input's length and
    out[t] depends only on in[t-2..t].
    """

    def __init__(self, c_in, c_out, dtype=np.float32):
        super().__init__()
        self.c_in = c_in
        self.c_out = c_out
        self.params = {
            "kernel": np.zeros((3, c_in, c_out), dtype=dtype),
            "bias": np.zeros(c_out, dtype=dtype),
        }
        self.quantize_weights = False
        self.weight_qparams = None

    def forward(self, x, train=False):
        if x.ndim != 3 or x.shape[-1] != self.c_in:
            raise ValueError(f"causal conv expects (N, T, {self.c_in}) input")
        if x.shape[1] < 1:
            raise ValueError("causal conv needs at least one time step")
        kernel = self.params["kernel"]
        if self.quantize_weights:
            kernel, self.weight_qparams = _fake_quant_weight(kernel)
        padded = np.pad(x, ((0, 0), (2, 0), (0, 0)))
        windows = np.lib.stride_tricks.sliding_window_view(padded, 3, axis=1)
        # windows: (N, T, Cin, 3); tap axis last, oldest first
        z = np.einsum("ntck,kco->nto", windows, kernel, optimize=True) + self.params["bias"]
        self._x = x
        self._kernel = kernel
        self._mask = z > 0
        return np.where(self._mask, z, 0)

    def backward(self, dout):
        dout = np.where(self._mask, dout, 0)
        x, kernel = self._x, self._kernel
        padded = np.pad(x, ((0, 0), (2, 0), (0, 0)))
        windows = np.lib.stride_tricks.sliding_window_view(padded, 3, axis=1)
        self.grads["kernel"] = np.einsum(
            "ntck,nto->kco", windows, dout, optimize=True
        ).astype(kernel.dtype)
        self.grads["bias"] = dout.sum(axis=(0, 1)).astype(kernel.dtype)
        # dx[t] collects dout[t..t+2] against the corresponding taps
        dpad = np.pad(dout, ((0, 0), (0, 2), (0, 0)))
        dwin = np.lib.stride_tricks.sliding_window_view(dpad, 3, axis=1)
        # dwin[n, t, o, j] = dout[n, t+j, o]; tap for that pair is kernel[2-j]
        return np.einsum("ntoj,jco->ntc", dwin, kernel[::-1], optimize=True).astype(
            x.dtype
        )


class FakeQuantAct(Layer):
    """Activation fake-quantization with a straight-through gradient.

    Holds an EMA min/max observer; in train mode the observer is updated
    from the incoming batch before quantizing.
    """

    def __init__(self, name, momentum=0.99):
        super().__init__()
        self.obs_name = name
        self.momentum = momentum
        self.lo = None
        self.hi = None

    def observe(self, x):
        lo = float(x.min())
        hi = float(x.max())
        if self.lo is None:
            self.lo, self.hi = lo, hi
        else:
            m = self.momentum
            self.lo = m * self.lo + (1 - m) * lo
            self.hi = m * self.hi + (1 - m) * hi

    def qparams(self):
        from .quant import qparams_from_range

        return qparams_from_range(self.lo, self.hi, symmetric=False)

    def forward(self, x, train=False):
        from .quant import fake_quant

        if train:
            self.observe(x)
        qp = self.qparams()
        out, in_range = fake_quant(x, qp, with_mask=True)
        self._mask = in_range
        return out.astype(x.dtype)

    def backward(self, dout):
        return np.where(self._mask, dout, 0)


def _fake_quant_weight(w):
    """Symmetric per-tensor int8 fake quantization of a weight tensor."""
    from .quant import fake_quant, qparams_from_range

    bound = float(np.max(np.abs(w)))
    qp = qparams_from_range(-bound, bound, symmetric=True)
    return fake_quant(w, qp).astype(w.dtype), qp


def weighted_softmax_xent(logits, labels, class_weights):
    """Class-weighted categorical cross-entropy.

    loss_n = w[y_n] * (-log softmax(logits_n)[y_n])
    grad_n = w[y_n] * (softmax(logits_n) - onehot(y_n))

    Accepts a single (K,) logit vector with an integer label, or batched
    (N, K) logits with (N,) labels; returns (per-sample loss, grad) with
    matching leading shape.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    if single:
        logits = logits[None, :]
        labels = np.asarray([labels])
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label outside [0, {k})")
    weights = np.asarray(class_weights, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(logp)
    n = logits.shape[0]
    w = weights[labels]
    loss = -w * logp[np.arange(n), labels]
    grad = p * w[:, None]
    grad[np.arange(n), labels] -= w
    if single:
        return loss[0], grad[0].astype(logits.dtype)
    return loss, grad.astype(logits.dtype)
