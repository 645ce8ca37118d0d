"""Differentiable building blocks with exact analytic gradients.

Every forward returns (output, cache); the matching backward consumes the
cache plus the upstream gradient and returns exact input and parameter
gradients. Layers never mutate their inputs, so concurrent evaluation on
distinct sequences is safe.

Shapes follow the conventions: frame batches are [N, D] with one row per
frame, sequences are [T, D] in time order, weight sheets are [out, in].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DEFAULT_DTYPE, Rng, glorot_init, require_finite

ACTIVATIONS = ("relu", "linear")


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form saturates cleanly at both ends, no overflow warnings
    return 0.5 * np.tanh(0.5 * x) + 0.5


# ---------------------------------------------------------------------------
# fully connected
# ---------------------------------------------------------------------------

@dataclass
class FcLayer:
    w: np.ndarray  # [out, in]
    b: np.ndarray  # [out]
    activation: str = "linear"


def fc_init(fan_in: int, fan_out: int, rng: Rng, activation: str = "linear",
            dtype=DEFAULT_DTYPE) -> FcLayer:
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    return FcLayer(w=glorot_init(fan_in, fan_out, rng, dtype),
                   b=np.zeros(fan_out, dtype=dtype),
                   activation=activation)


def fc_forward(layer: FcLayer, x: np.ndarray):
    """act(W x + b) for a single vector [in] or a frame batch [N, in]."""
    if x.shape[-1] != layer.w.shape[1]:
        raise ValueError(f"fc input width {x.shape[-1]} != weight width {layer.w.shape[1]}")
    y = x @ layer.w.T + layer.b
    if layer.activation == "relu":
        y = np.maximum(y, 0)
    return y, (x, y)


def fc_backward(layer: FcLayer, cache, d_out: np.ndarray):
    """Returns (d_x, d_w, d_b). relu'(0) is taken as 0."""
    x, y = cache
    if layer.activation == "relu":
        d_pre = d_out * (y > 0)
    else:
        d_pre = d_out
    if x.ndim == 1:
        d_w = np.outer(d_pre, x)
        d_b = d_pre.copy()
    else:
        d_w = d_pre.T @ x
        d_b = d_pre.sum(axis=0)
    d_x = d_pre @ layer.w
    return d_x, d_w, d_b


# ---------------------------------------------------------------------------
# delta / delta-delta temporal regression
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DeltaWindow:
    """Regression half-window for delta features; boundaries edge-replicate."""

    theta: int = 2

    def __post_init__(self):
        if self.theta < 1:
            raise ValueError(f"delta window must be >= 1, got {self.theta}")


def delta_forward(seq: np.ndarray, win: DeltaWindow) -> np.ndarray:
    """d_t = sum_k k*(c_{t+k} - c_{t-k}) / (2*sum_k k^2), edges replicated.

    A constant sequence maps to exactly zero: every term is a difference of
    identical values.
    """
    t_len = seq.shape[0]
    if t_len < 1:
        raise ValueError("delta_forward needs at least one frame")
    denom = 2.0 * sum(k * k for k in range(1, win.theta + 1))
    idx = np.arange(t_len)
    out = np.zeros_like(seq)
    for k in range(1, win.theta + 1):
        fwd = np.minimum(idx + k, t_len - 1)
        bwd = np.maximum(idx - k, 0)
        out += (k / denom) * (seq[fwd] - seq[bwd])
    return out


def delta_backward(d_out: np.ndarray, win: DeltaWindow) -> np.ndarray:
    """Adjoint of delta_forward (the map is linear)."""
    t_len = d_out.shape[0]
    denom = 2.0 * sum(k * k for k in range(1, win.theta + 1))
    idx = np.arange(t_len)
    d_seq = np.zeros_like(d_out)
    for k in range(1, win.theta + 1):
        coeff = k / denom
        fwd = np.minimum(idx + k, t_len - 1)
        bwd = np.maximum(idx - k, 0)
        np.add.at(d_seq, fwd, coeff * d_out)
        np.add.at(d_seq, bwd, -coeff * d_out)
    return d_seq


def append_deltas(seq: np.ndarray, win: DeltaWindow) -> np.ndarray:
    """[T, D] -> [T, 3D]: the sequence with delta and delta-delta appended."""
    d1 = delta_forward(seq, win)
    d2 = delta_forward(d1, win)
    return np.concatenate([seq, d1, d2], axis=1)


def append_deltas_backward(d_out: np.ndarray, win: DeltaWindow) -> np.ndarray:
    width = d_out.shape[1]
    if width % 3 != 0:
        raise ValueError(f"append_deltas output width {width} not divisible by 3")
    d = width // 3
    d_seq = d_out[:, :d].copy()
    d_seq += delta_backward(d_out[:, d:2 * d], win)
    d_seq += delta_backward(delta_backward(d_out[:, 2 * d:], win), win)
    return d_seq


# ---------------------------------------------------------------------------
# LSTM / BLSTM
# ---------------------------------------------------------------------------

@dataclass
class LstmParams:
    """Gate rows are stacked in the order i, f, g (candidate), o."""

    wx: np.ndarray  # [4H, D]
    wh: np.ndarray  # [4H, H]
    b: np.ndarray   # [4H]

    @property
    def hidden(self) -> int:
        return self.wh.shape[1]


def lstm_init(input_dim: int, hidden: int, rng: Rng, dtype=DEFAULT_DTYPE,
              forget_bias: float = 1.0) -> LstmParams:
    """Glorot per gate block; forget-gate bias starts at forget_bias."""
    wx = np.concatenate([glorot_init(input_dim, hidden, rng, dtype) for _ in range(4)])
    wh = np.concatenate([glorot_init(hidden, hidden, rng, dtype) for _ in range(4)])
    b = np.zeros(4 * hidden, dtype=dtype)
    b[hidden:2 * hidden] = forget_bias
    return LstmParams(wx=wx, wh=wh, b=b)


def lstm_forward(p: LstmParams, seq: np.ndarray, reverse: bool = False):
    """Run the LSTM recurrence over [T, D]; returns ([T, H], cache).

    With reverse=True the recurrence runs over the time-reversed sequence
    and the output is re-reversed, so output row t still describes frame t.
    """
    t_len = seq.shape[0]
    if t_len < 1:
        raise ValueError("lstm_forward needs at least one frame")
    if seq.shape[1] != p.wx.shape[1]:
        raise ValueError(f"lstm input width {seq.shape[1]} != weight width {p.wx.shape[1]}")
    hidden = p.hidden
    x = seq[::-1] if reverse else seq
    xz = x @ p.wx.T  # input contribution for all steps at once
    gates = np.empty((t_len, 4 * hidden), dtype=seq.dtype)
    c_seq = np.empty((t_len, hidden), dtype=seq.dtype)
    tc_seq = np.empty((t_len, hidden), dtype=seq.dtype)
    h_seq = np.empty((t_len, hidden), dtype=seq.dtype)
    h_prev = np.zeros(hidden, dtype=seq.dtype)
    c_prev = np.zeros(hidden, dtype=seq.dtype)
    for t in range(t_len):
        z = xz[t] + p.wh @ h_prev + p.b
        i = sigmoid(z[:hidden])
        f = sigmoid(z[hidden:2 * hidden])
        g = np.tanh(z[2 * hidden:3 * hidden])
        o = sigmoid(z[3 * hidden:])
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        gates[t, :hidden] = i
        gates[t, hidden:2 * hidden] = f
        gates[t, 2 * hidden:3 * hidden] = g
        gates[t, 3 * hidden:] = o
        c_seq[t] = c
        tc_seq[t] = tc
        h_seq[t] = h
        h_prev, c_prev = h, c
    require_finite(h_seq, "lstm activations")
    cache = (x, gates, c_seq, tc_seq, h_seq, reverse)
    return (h_seq[::-1].copy() if reverse else h_seq), cache


def lstm_backward(p: LstmParams, cache, d_h_seq: np.ndarray):
    """Full backpropagation through time.

    Returns (d_seq, grads) with grads = {"wx", "wh", "b"}.
    """
    x, gates, c_seq, tc_seq, h_seq, reverse = cache
    t_len, hidden = h_seq.shape
    d_h_seq = d_h_seq[::-1] if reverse else d_h_seq
    dz_seq = np.empty((t_len, 4 * hidden), dtype=h_seq.dtype)
    dh_next = np.zeros(hidden, dtype=h_seq.dtype)
    dc_next = np.zeros(hidden, dtype=h_seq.dtype)
    wh_t = p.wh.T
    for t in range(t_len - 1, -1, -1):
        i = gates[t, :hidden]
        f = gates[t, hidden:2 * hidden]
        g = gates[t, 2 * hidden:3 * hidden]
        o = gates[t, 3 * hidden:]
        tc = tc_seq[t]
        c_prev = c_seq[t - 1] if t > 0 else 0.0
        dh = d_h_seq[t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = dz_seq[t]
        dz[:hidden] = dc * g * i * (1.0 - i)
        dz[hidden:2 * hidden] = dc * c_prev * f * (1.0 - f)
        dz[2 * hidden:3 * hidden] = dc * i * (1.0 - g * g)
        dz[3 * hidden:] = dh * tc * o * (1.0 - o)
        dh_next = wh_t @ dz
        dc_next = dc * f
    d_wx = dz_seq.T @ x
    # initial h is zero, so step 0 contributes nothing to wh
    d_wh = dz_seq[1:].T @ h_seq[:-1] if t_len > 1 else np.zeros_like(p.wh)
    d_b = dz_seq.sum(axis=0)
    d_x = dz_seq @ p.wx
    if reverse:
        d_x = d_x[::-1].copy()
    return d_x, {"wx": d_wx, "wh": d_wh, "b": d_b}


@dataclass
class Blstm:
    fwd: LstmParams
    bwd: LstmParams

    @property
    def hidden(self) -> int:
        return self.fwd.hidden


def blstm_init(input_dim: int, hidden: int, rng: Rng, dtype=DEFAULT_DTYPE) -> Blstm:
    # forward half is drawn first, then backward: fixed order keeps runs reproducible
    return Blstm(fwd=lstm_init(input_dim, hidden, rng, dtype),
                 bwd=lstm_init(input_dim, hidden, rng, dtype))


def blstm_forward(bl: Blstm, seq: np.ndarray):
    """[T, D] -> [T, 2H]: forward-time and reverse-time states concatenated."""
    h_f, cache_f = lstm_forward(bl.fwd, seq)
    h_b, cache_b = lstm_forward(bl.bwd, seq, reverse=True)
    return np.concatenate([h_f, h_b], axis=1), (cache_f, cache_b)


def blstm_backward(bl: Blstm, cache, d_out: np.ndarray):
    cache_f, cache_b = cache
    hidden = bl.hidden
    d_seq_f, grads_f = lstm_backward(bl.fwd, cache_f, d_out[:, :hidden])
    d_seq_b, grads_b = lstm_backward(bl.bwd, cache_b, d_out[:, hidden:])
    return d_seq_f + d_seq_b, {"fwd": grads_f, "bwd": grads_b}


# ---------------------------------------------------------------------------
# softmax cross-entropy
# ---------------------------------------------------------------------------

def softmax_xent(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray):
    """Mean masked cross-entropy over frames; returns (loss, d_logits).

    loss = mean over masked-in frames of -log softmax(logits_t)[label_t],
    computed with the log-sum-exp max shift. Masked-out frames contribute
    zero loss and zero gradient.
    """
    n, k = logits.shape
    if n == 0:
        raise ValueError("softmax_xent needs at least one frame")
    labels = np.asarray(labels)
    if labels.shape != (n,) or np.asarray(mask).shape != (n,):
        raise ValueError("labels and mask must be one entry per frame")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    maskf = np.asarray(mask, dtype=logits.dtype)
    n_valid = float(maskf.sum())
    if n_valid == 0:
        raise ValueError("softmax_xent needs at least one masked-in frame")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(n)
    loss = -float((logp[rows, labels] * maskf).sum()) / n_valid
    d_logits = np.exp(logp)
    d_logits[rows, labels] -= 1.0
    d_logits *= maskf[:, None] / n_valid
    return loss, d_logits


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with the max shift."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
