"""Dense-tensor layer primitives with exact backward passes.

Every layer is a pair of pure functions: ``*_forward`` returns the output and a
cache, ``*_backward`` consumes the upstream gradient and the cache and returns the
input gradient plus parameter gradients.  Arrays are float64 and batched:

* fully connected: ``(N, I)``
* convolution / pooling: ``(N, L, C)`` (length by channels)
* recurrent: ``(N, T, D)`` (time by features)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericalError, ParameterError

ACTIVATIONS = ("linear", "relu", "sigmoid", "tanh")

BCE_EPS = 1e-7


def sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activate(pre, kind):
    if kind == "linear":
        return pre
    if kind == "relu":
        return np.maximum(pre, 0.0)
    if kind == "sigmoid":
        return sigmoid(pre)
    if kind == "tanh":
        return np.tanh(pre)
    raise ParameterError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activate_backward(dy, pre, out, kind):
    if kind == "linear":
        return dy
    if kind == "relu":
        return dy * (pre > 0)
    if kind == "sigmoid":
        return dy * out * (1.0 - out)
    if kind == "tanh":
        return dy * (1.0 - out * out)
    raise ParameterError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# fully connected


def fc_forward(x, W, b, activation="linear"):
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"fc: input {x.shape} incompatible with weights {W.shape}")
    if b.shape != (W.shape[1],):
        raise DimensionError(f"fc: bias {b.shape} does not match {W.shape[1]} outputs")
    pre = x @ W + b
    out = activate(pre, activation)
    return out, (x, pre, out, activation)


def fc_backward(dy, W, cache, need_dx=True):
    x, pre, out, activation = cache
    dpre = activate_backward(dy, pre, out, activation)
    dW = x.T @ dpre
    db = dpre.sum(axis=0)
    dx = dpre @ W.T if need_dx else None
    return dx, dW, db


# ---------------------------------------------------------------------------
# 1-D convolution (cross-correlation, kernel layout (K, C_in, C_out))


def _same_padding(length, kernel, stride):
    out_len = -(-length // stride)
    total = max((out_len - 1) * stride + kernel - length, 0)
    return total // 2, total - total // 2


def conv1d_forward(x, W, b, stride=1, padding="same", activation="linear"):
    if x.ndim != 3:
        raise DimensionError(f"conv1d expects (N, L, C) input, got {x.shape}")
    if W.ndim != 3 or W.shape[1] != x.shape[2]:
        raise DimensionError(f"conv1d: kernel {W.shape} incompatible with input channels {x.shape[2]}")
    if b.shape != (W.shape[2],):
        raise DimensionError(f"conv1d: bias {b.shape} does not match {W.shape[2]} filters")
    if stride < 1:
        raise ParameterError("conv1d stride must be >= 1")
    n, length, c_in = x.shape
    k, _, c_out = W.shape
    if padding == "same":
        left, right = _same_padding(length, k, stride)
    elif padding == "valid":
        left = right = 0
    else:
        raise ParameterError(f"unknown padding {padding!r}")
    padded = length + left + right
    if k > padded:
        raise DimensionError(f"conv1d: kernel length {k} exceeds padded input length {padded}")
    xp = np.pad(x, ((0, 0), (left, right), (0, 0))) if left or right else x
    out_len = (padded - k) // stride + 1
    idx = (np.arange(out_len) * stride)[:, None] + np.arange(k)[None, :]
    cols = xp[:, idx, :].reshape(n * out_len, k * c_in)
    pre = (cols @ W.reshape(k * c_in, c_out)).reshape(n, out_len, c_out) + b
    out = activate(pre, activation)
    cache = (cols, x.shape, left, stride, out_len, pre, out, activation)
    return out, cache


def conv1d_backward(dy, W, cache, need_dx=True):
    cols, x_shape, left, stride, out_len, pre, out, activation = cache
    n, length, c_in = x_shape
    k, _, c_out = W.shape
    dpre = activate_backward(dy, pre, out, activation).reshape(n * out_len, c_out)
    dW = (cols.T @ dpre).reshape(W.shape)
    db = dpre.sum(axis=0)
    dx = None
    if need_dx:
        dcols = (dpre @ W.reshape(k * c_in, c_out).T).reshape(n, out_len, k, c_in)
        padded = (out_len - 1) * stride + k
        dxp = np.zeros((n, max(padded, length + left), c_in))
        pos = np.arange(out_len) * stride
        for j in range(k):
            # positions within one kernel tap are distinct, so plain += is safe
            dxp[:, pos + j, :] += dcols[:, :, j, :]
        dx = dxp[:, left:left + length, :]
    return dx, dW, db


# ---------------------------------------------------------------------------
# pooling


def maxpool1d_forward(x, window):
    """Non-overlapping max pooling; a short trailing window is kept (ceil semantics)."""
    if window < 1:
        raise ParameterError("pooling window must be >= 1")
    if x.ndim != 3:
        raise DimensionError(f"maxpool1d expects (N, L, C) input, got {x.shape}")
    n, length, c = x.shape
    out_len = -(-length // window)
    pad = out_len * window - length
    xp = np.pad(x, ((0, 0), (0, pad), (0, 0)), constant_values=-np.inf) if pad else x
    blocks = xp.reshape(n, out_len, window, c)
    arg = blocks.argmax(axis=2)
    out = np.take_along_axis(blocks, arg[:, :, None, :], axis=2)[:, :, 0, :]
    return out, (x.shape, window, arg)


def maxpool1d_backward(dy, cache):
    (n, length, c), window, arg = cache
    out_len = dy.shape[1]
    dblocks = np.zeros((n, out_len, window, c))
    np.put_along_axis(dblocks, arg[:, :, None, :], dy[:, :, None, :], axis=2)
    return dblocks.reshape(n, out_len * window, c)[:, :length, :]


def global_maxpool_forward(x):
    if x.ndim != 3 or x.shape[1] < 1:
        raise DimensionError(f"global max pooling needs a non-empty (N, L, C) input, got {x.shape}")
    arg = x.argmax(axis=1)
    out = np.take_along_axis(x, arg[:, None, :], axis=1)[:, 0, :]
    return out, (x.shape, arg)


def global_maxpool_backward(dy, cache):
    shape, arg = cache
    dx = np.zeros(shape)
    np.put_along_axis(dx, arg[:, None, :], dy[:, None, :], axis=1)
    return dx


# ---------------------------------------------------------------------------
# LSTM; gate blocks are laid out [input | forget | output | candidate]


def lstm_cell_step(x, h, c, Wx, Wh, b):
    hidden = Wh.shape[0]
    if Wx.shape != (x.shape[1], 4 * hidden) or Wh.shape != (hidden, 4 * hidden) or b.shape != (4 * hidden,):
        raise DimensionError(
            f"lstm: Wx {Wx.shape}, Wh {Wh.shape}, b {b.shape} inconsistent with input width {x.shape[1]}"
        )
    if h.shape != (x.shape[0], hidden) or c.shape != h.shape:
        raise DimensionError(f"lstm: state shapes {h.shape}/{c.shape} do not match hidden size {hidden}")
    z = x @ Wx + h @ Wh + b
    H = hidden
    i = sigmoid(z[:, :H])
    f = sigmoid(z[:, H:2 * H])
    o = sigmoid(z[:, 2 * H:3 * H])
    g = np.tanh(z[:, 3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (x, h, c, i, f, o, g, tc)


def lstm_cell_backward(dh_new, dc_new, Wx, Wh, cache):
    x, h, c, i, f, o, g, tc = cache
    dc = dc_new + dh_new * o * (1.0 - tc * tc)
    dz = np.concatenate(
        [
            dc * g * i * (1.0 - i),
            dc * c * f * (1.0 - f),
            dh_new * tc * o * (1.0 - o),
            dc * i * (1.0 - g * g),
        ],
        axis=1,
    )
    dWx = x.T @ dz
    dWh = h.T @ dz
    db = dz.sum(axis=0)
    return dz @ Wx.T, dz @ Wh.T, dc * f, dWx, dWh, db


def lstm_forward(seq, Wx, Wh, b, reverse=False):
    """Run one direction over ``seq`` (N, T, D); returns hidden states (N, T, H) in input order."""
    if seq.ndim != 3 or seq.shape[1] < 1:
        raise DimensionError(f"lstm expects a non-empty (N, T, D) sequence, got {seq.shape}")
    n, T, _ = seq.shape
    H = Wh.shape[0]
    h = np.zeros((n, H))
    c = np.zeros((n, H))
    hs = np.empty((n, T, H))
    caches = [None] * T
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        h, c, caches[t] = lstm_cell_step(seq[:, t, :], h, c, Wx, Wh, b)
        hs[:, t, :] = h
    return hs, (caches, reverse)


def lstm_backward(dhs, Wx, Wh, cache):
    caches, reverse = cache
    n, T, H = dhs.shape
    dseq = np.empty((n, T, Wx.shape[0]))
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros(Wx.shape[1])
    dh_next = np.zeros((n, H))
    dc_next = np.zeros((n, H))
    order = range(T) if reverse else range(T - 1, -1, -1)
    for t in order:
        dx, dh_next, dc_next, gx, gh, gb = lstm_cell_backward(
            dhs[:, t, :] + dh_next, dc_next, Wx, Wh, caches[t]
        )
        dseq[:, t, :] = dx
        dWx += gx
        dWh += gh
        db += gb
    return dseq, dWx, dWh, db


def bilstm_forward(seq, fwd, bwd, return_sequences=True):
    """Bidirectional LSTM.  ``fwd``/``bwd`` are ``(Wx, Wh, b)`` triples.

    With ``return_sequences`` the per-step outputs are ``[h_fwd[t] | h_bwd[t]]``;
    otherwise the final state of each direction is returned: the forward pass ends
    at the last step, the backward pass at the first.
    """
    hf, cf = lstm_forward(seq, *fwd, reverse=False)
    hb, cb = lstm_forward(seq, *bwd, reverse=True)
    if return_sequences:
        out = np.concatenate([hf, hb], axis=2)
    else:
        out = np.concatenate([hf[:, -1, :], hb[:, 0, :]], axis=1)
    return out, (cf, cb, hf.shape, return_sequences)


def bilstm_backward(dout, fwd, bwd, cache):
    cf, cb, (n, T, H), return_sequences = cache
    if return_sequences:
        dhf = dout[:, :, :H]
        dhb = dout[:, :, H:]
    else:
        dhf = np.zeros((n, T, H))
        dhb = np.zeros((n, T, H))
        dhf[:, -1, :] = dout[:, :H]
        dhb[:, 0, :] = dout[:, H:]
    dsf, *gf = lstm_backward(dhf, fwd[0], fwd[1], cf)
    dsb, *gb = lstm_backward(dhb, bwd[0], bwd[1], cb)
    return dsf + dsb, tuple(gf), tuple(gb)


# ---------------------------------------------------------------------------
# dropout


def dropout_forward(x, rate, training, rng=None):
    """Inverted dropout; returns ``(y, scale_mask)``.  ``scale_mask`` is None when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ParameterError("training-mode dropout needs an explicit random generator")
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossTerms:
    bce: float
    recon: float
    l2: float
    recon_weight: float
    l2_weight: float

    @property
    def total(self):
        return self.bce + self.recon_weight * self.recon + self.l2_weight * self.l2


def bce_loss(pred, target, eps=BCE_EPS):
    p = np.clip(pred, eps, 1.0 - eps)
    return float(-np.mean(target * np.log(p) + (1.0 - target) * np.log(1.0 - p)))


def mse_loss(recon, original):
    return float(np.mean((recon - original) ** 2))


def composite_loss(pred, target, recon, original, recon_weight, l2_weight, penalized=()):
    """Classification BCE plus weighted reconstruction MSE plus L2 over ``penalized`` arrays."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    if recon is None:
        recon_term = 0.0
    else:
        if recon.shape != original.shape:
            raise DimensionError(f"reconstruction {recon.shape} and original {original.shape} differ")
        recon_term = mse_loss(recon, original)
    l2 = float(sum(np.sum(w * w) for w in penalized))
    return LossTerms(bce_loss(pred, target), recon_term, l2, recon_weight, l2_weight)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class Adam:
    """Adaptive-moment optimizer over a ``name -> array`` parameter dict, updated in place."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params, grads):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        if bad:
            raise NumericalError(f"non-finite gradient in {', '.join(sorted(bad))}; step aborted")
        for k, g in grads.items():
            if params[k].shape != g.shape:
                raise DimensionError(f"gradient for {k} has shape {g.shape}, parameter {params[k].shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[k] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return params
