"""Pure-numpy LSTM recurrence kernels (fallback for the compiled ``_ckernels``).

Gate layout along the last axis is ``[input | forget | output | candidate]``.
"""

import numpy as np


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def lstm_forward(gates_x, w_h):
    """Run the recurrence from zero state.

    Returns ``(hs, cache)`` where ``hs`` is ``[B, T, h]`` and ``cache`` holds
    the cell states, their tanh, and the activated gates ``[B, T, 4h]``.
    """
    b, t_len, four_h = gates_x.shape
    h = four_h // 4
    dtype = gates_x.dtype
    hs = np.empty((b, t_len, h), dtype=dtype)
    cs = np.empty((b, t_len, h), dtype=dtype)
    tcs = np.empty((b, t_len, h), dtype=dtype)
    acts = np.empty((b, t_len, four_h), dtype=dtype)
    h_prev = np.zeros((b, h), dtype=dtype)
    c_prev = np.zeros((b, h), dtype=dtype)
    for t in range(t_len):
        z = gates_x[:, t, :] + h_prev @ w_h
        a = acts[:, t, :]
        a[:, : 3 * h] = sigmoid(z[:, : 3 * h])
        a[:, 3 * h:] = np.tanh(z[:, 3 * h:])
        c = a[:, h: 2 * h] * c_prev + a[:, :h] * a[:, 3 * h:]
        tc = np.tanh(c)
        cs[:, t, :] = c
        tcs[:, t, :] = tc
        hs[:, t, :] = a[:, 2 * h: 3 * h] * tc
        h_prev, c_prev = hs[:, t, :], c
    return hs, (cs, tcs, acts)


def lstm_backward(d_hs, hs, cache, w_h):
    """Backpropagate ``d_hs`` (gradient w.r.t. every hidden state) through time.

    Returns ``(d_gates_x, d_w_h)``.
    """
    cs, tcs, acts = cache
    b, t_len, h = hs.shape
    dtype = hs.dtype
    d_gates = np.empty((b, t_len, 4 * h), dtype=dtype)
    dh_next = np.zeros((b, h), dtype=dtype)
    dc_next = np.zeros((b, h), dtype=dtype)
    zeros = np.zeros((b, h), dtype=dtype)
    w_h_t = np.ascontiguousarray(w_h.T)
    for t in range(t_len - 1, -1, -1):
        a = acts[:, t, :]
        i, f, o, g = a[:, :h], a[:, h: 2 * h], a[:, 2 * h: 3 * h], a[:, 3 * h:]
        tc = tcs[:, t, :]
        c_prev = cs[:, t - 1, :] if t > 0 else zeros
        dh = d_hs[:, t, :] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = d_gates[:, t, :]
        dz[:, :h] = dc * g * i * (1.0 - i)
        dz[:, h: 2 * h] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * h: 3 * h] = dh * tc * o * (1.0 - o)
        dz[:, 3 * h:] = dc * i * (1.0 - g * g)
        dh_next = dz @ w_h_t
        dc_next = dc * f
    d_w_h = np.tensordot(hs[:, :-1, :], d_gates[:, 1:, :], axes=([0, 1], [0, 1]))
    return d_gates, d_w_h
