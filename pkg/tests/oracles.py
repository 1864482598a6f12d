"""Independent reference implementations used to verify the fast paths.

Everything here is deliberately written as plain scalar loops in double
precision, straight from the recurrence definitions, and shares no code with
the package internals.
"""

import math

import numpy as np


def softplus_scalar(z: float) -> float:
    return max(z, 0.0) + math.log1p(math.exp(-abs(z)))


def scalar_scan(tokens, frame_lengths, h0, params, apply_interaction=True):
    """Token-by-token scalar-loop recurrence.

    tokens: (L, D); h0: (D, N); params is a ScanParams-like object with
    arrays a, w_b, w_c, w_ds, w_dc, d_bias, inter_down, inter_up and a
    delta_mode string.  Returns (y, h_last, per_frame_states) as float64.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    length, d_ch = tokens.shape
    n_st = params.a.shape[1]
    a = np.asarray(params.a, dtype=np.float64)
    w_b = np.asarray(params.w_b, dtype=np.float64)
    w_c = np.asarray(params.w_c, dtype=np.float64)
    w_ds = np.asarray(params.w_ds, dtype=np.float64)
    w_dc = np.asarray(params.w_dc, dtype=np.float64)
    d_bias = np.asarray(params.d_bias, dtype=np.float64)
    down = np.asarray(params.inter_down, dtype=np.float64)
    up = np.asarray(params.inter_up, dtype=np.float64)

    h = [[float(h0[d][n]) for n in range(n_st)] for d in range(d_ch)]
    y = np.zeros((length, d_ch))
    per_frame = []
    t = 0
    for lf in frame_lengths:
        for _ in range(lf):
            x = tokens[t]
            b_t = [sum(w_b[n][d] * x[d] for d in range(d_ch)) for n in range(n_st)]
            c_t = [sum(w_c[n][d] * x[d] for d in range(d_ch)) for n in range(n_st)]
            dc = [sum(w_dc[d][e] * x[e] for e in range(d_ch)) + d_bias[d]
                  for d in range(d_ch)]
            ds = [sum(w_ds[n][d] * x[d] for d in range(d_ch)) for n in range(n_st)]
            for d in range(d_ch):
                acc = 0.0
                for n in range(n_st):
                    z = dc[d] if params.delta_mode == "channel_only" else dc[d] + ds[n]
                    delta = softplus_scalar(z)
                    abar = math.exp(delta * a[d][n])
                    bbar = delta * b_t[n]
                    h[d][n] = abar * h[d][n] + bbar * x[d]
                    acc += c_t[n] * h[d][n]
                y[t][d] = acc
            t += 1
        if apply_interaction:
            new_h = [[0.0] * n_st for _ in range(d_ch)]
            for d in range(d_ch):
                mid = [sum(down[j][n] * h[d][n] for n in range(n_st))
                       for j in range(n_st // 4)]
                for n in range(n_st):
                    new_h[d][n] = sum(up[n][j] * mid[j] for j in range(n_st // 4))
            h = new_h
        per_frame.append(np.array(h, dtype=np.float64))
    return y, np.array(h, dtype=np.float64), per_frame


def fd_grad(f, arr, eps=1e-4):
    """Central finite differences of a scalar function w.r.t. every entry."""
    arr = np.asarray(arr)
    g = np.zeros(arr.shape, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + eps
        f_plus = f()
        arr[idx] = orig - eps
        f_minus = f()
        arr[idx] = orig
        g[idx] = (f_plus - f_minus) / (2 * eps)
    return g


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def global_rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(b))), 1e-30)
    return float(np.max(np.abs(a - b))) / scale


def iou_corner(box_a, box_b):
    """IoU of two corner-format boxes (x0, y0, x1, y1), plain arithmetic."""
    ax0, ay0, ax1, ay1 = box_a
    bx0, by0, bx1, by1 = box_b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0
