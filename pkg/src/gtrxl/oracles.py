"""Slow reference implementations written with explicit Python loops.

They share no code with the vectorized ops and exist only to check them.
All inputs are plain numpy arrays for a single (unbatched) sequence.
"""

from __future__ import annotations

import math

import numpy as np


def _sig(a: float) -> float:
    return 1.0 / (1.0 + math.exp(-a)) if a >= 0 else math.exp(a) / (1.0 + math.exp(a))


def loop_layer_norm(x, gain, bias, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for t in range(x.shape[0]):
        mu = sum(x[t]) / x.shape[1]
        var = sum((a - mu) ** 2 for a in x[t]) / x.shape[1]
        for j in range(x.shape[1]):
            out[t, j] = (x[t, j] - mu) / math.sqrt(var + eps) * gain[j] + bias[j]
    return out


def _project(x, w):
    rows, cols = x.shape[0], w.shape[1]
    out = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            out[i, j] = sum(x[i, k] * w[k, j] for k in range(x.shape[1]))
    return out


def _sinusoid(p: int, width: int) -> np.ndarray:
    row = np.zeros(width)
    for i in range(width // 2):
        angle = p / 10000.0 ** (2 * i / width)
        row[2 * i] = math.sin(angle)
        row[2 * i + 1] = math.cos(angle)
    return row


def _finish(E, heads_out, w_o, b_o, norm):
    """heads_out[h][t] -> concat over heads -> linear -> optional residual + layer norm."""
    T = E.shape[0]
    H = len(heads_out)
    concat = np.array([[heads_out[h][t][c] for h in range(H) for c in range(len(heads_out[h][t]))] for t in range(T)])
    out = _project(concat, w_o) + b_o
    if norm is not None:
        out = loop_layer_norm(E + out, norm[0], norm[1])
    return out


def _attend(scores_fn, values, T, n_keys, n_mem, d):
    """Softmax over allowed keys (key m allowed for query t iff m <= n_mem + t)."""
    result = []
    for t in range(T):
        allowed = list(range(n_mem + t + 1))
        s = [scores_fn(t, m) for m in allowed]
        top = max(s)
        e = [math.exp(a - top) for a in s]
        z = sum(e)
        row = [0.0] * d
        for w, m in zip(e, allowed):
            for c in range(d):
                row[c] += w / z * values[m][c]
        result.append(row)
    return result


def loop_attention(E, w_q, w_k, w_v, w_o, b_o, n_heads, norm=None):
    """Causal multi-head attention; ``norm=(gain, bias)`` adds residual + layer norm."""
    E = np.asarray(E, dtype=np.float64)
    T = E.shape[0]
    d = w_q.shape[1] // n_heads
    Q, K, V = _project(E, w_q), _project(E, w_k), _project(E, w_v)
    heads = []
    for h in range(n_heads):
        cols = slice(h * d, (h + 1) * d)
        q, k, v = Q[:, cols], K[:, cols], V[:, cols]

        def score(t, m, q=q, k=k):
            return sum(q[t, c] * k[m, c] for c in range(d))

        heads.append(_attend(score, v, T, T, 0, d))
    return _finish(E, heads, w_o, b_o, norm)


def loop_relative_attention(M, E, w_q, w_k, w_v, w_r, u, v, w_o, b_o, n_heads, norm=None):
    """Relative attention with each score term materialized separately:

    ``q.k + q.r + u.k + v.r`` where ``r`` projects the sinusoid row of the
    query-key distance.
    """
    M = np.asarray(M, dtype=np.float64).reshape(-1, E.shape[1])
    E = np.asarray(E, dtype=np.float64)
    S, T, width = M.shape[0], E.shape[0], E.shape[1]
    d = w_q.shape[1] // n_heads
    ext = np.concatenate([M, E], axis=0)
    Q, K, V = _project(E, w_q), _project(ext, w_k), _project(ext, w_v)
    heads = []
    for h in range(n_heads):
        cols = slice(h * d, (h + 1) * d)
        q, k, val = Q[:, cols], K[:, cols], V[:, cols]

        def score(t, m, q=q, k=k, h=h, cols=cols):
            dist = S + t - m
            r = _project(_sinusoid(dist, width)[None, :], w_r)[0, cols]
            content = sum(q[t, c] * k[m, c] for c in range(d))
            content_pos = sum(q[t, c] * r[c] for c in range(d))
            global_content = sum(u[h, c] * k[m, c] for c in range(d))
            global_pos = sum(v[h, c] * r[c] for c in range(d))
            return content + content_pos + global_content + global_pos

        heads.append(_attend(score, val, T, S + T, S, d))
    return _finish(E, heads, w_o, b_o, norm)


def loop_gate(kind: str, x, y, p: dict) -> np.ndarray:
    """Gating formulas evaluated one scalar at a time.  ``p`` maps field names to arrays."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    T, D = x.shape

    def lin(w, a, t, j):
        return sum(a[t, k] * w[k, j] for k in range(D))

    out = np.zeros_like(x)
    b = float(p["b_g"]) if p.get("b_g") is not None else 0.0
    for t in range(T):
        if kind == "gru":
            r = [_sig(lin(p["w_r"], y, t, j) + lin(p["u_r"], x, t, j)) for j in range(D)]
            rx = np.zeros((1, D))
            rx[0] = [r[j] * x[t, j] for j in range(D)]
        for j in range(D):
            if kind == "residual":
                out[t, j] = x[t, j] + y[t, j]
            elif kind == "input":
                out[t, j] = _sig(lin(p["w_g"], x, t, j)) * x[t, j] + y[t, j]
            elif kind == "output":
                out[t, j] = x[t, j] + _sig(lin(p["w_g"], x, t, j) - b) * y[t, j]
            elif kind == "highway":
                s = _sig(lin(p["w_g"], x, t, j) + b)
                out[t, j] = s * x[t, j] + (1.0 - s) * y[t, j]
            elif kind == "sigtanh":
                out[t, j] = x[t, j] + _sig(lin(p["w_g"], y, t, j) - b) * math.tanh(lin(p["u_g"], y, t, j))
            elif kind == "gru":
                z = _sig(lin(p["w_z"], y, t, j) + lin(p["u_z"], x, t, j) - b)
                hh = math.tanh(lin(p["w_g"], y, t, j) + sum(rx[0, k] * p["u_g"][k, j] for k in range(D)))
                out[t, j] = (1.0 - z) * x[t, j] + z * hh
            else:
                raise ValueError(f"unknown gate kind {kind!r}")
    return out


def loop_contract_qk(q, k):
    H, T, d = q.shape
    M = k.shape[1]
    out = np.zeros((H, T, M))
    for h in range(H):
        for t in range(T):
            for m in range(M):
                out[h, t, m] = sum(q[h, t, c] * k[h, m, c] for c in range(d))
    return out


def loop_contract_av(w, v):
    H, T, M = w.shape
    d = v.shape[2]
    out = np.zeros((H, T, d))
    for h in range(H):
        for t in range(T):
            for c in range(d):
                out[h, t, c] = sum(w[h, t, m] * v[h, m, c] for m in range(M))
    return out
