# Scatter loops for the edge-level attention aggregation.  The tanh values are
# computed vectorised by the caller; these loops only do the per-edge
# accumulation that would otherwise need several E x d temporaries.

import numba


@numba.njit(cache=True, nogil=True)
def attn_logits(q, k, tgt, nbr, out):
    E, d = out.shape
    for e in range(E):
        i = tgt[e]
        j = nbr[e]
        for c in range(d):
            out[e, c] = 0.5 * (q[i, c] * k[j, c] + q[j, c] * k[i, c])


@numba.njit(cache=True, nogil=True)
def attn_mean_forward(t, h, tgt, nbr, inv_count, mask, keep_scale, out):
    E, d = t.shape
    use_mask = mask.shape[0] == E
    for e in range(E):
        i = tgt[e]
        j = nbr[e]
        w = inv_count[i]
        for c in range(d):
            a = t[e, c]
            if use_mask:
                a = a * mask[e, c] * keep_scale
            out[i, c] += w * a * h[j, c]


@numba.njit(cache=True, nogil=True)
def attn_mean_backward(t, q, k, h, tgt, nbr, inv_count, mask, keep_scale, g, dq, dk, dh):
    E, d = t.shape
    use_mask = mask.shape[0] == E
    for e in range(E):
        i = tgt[e]
        j = nbr[e]
        w = inv_count[i]
        for c in range(d):
            a = t[e, c]
            m = mask[e, c] * keep_scale if use_mask else 1.0
            gi = g[i, c] * w
            dh[j, c] += gi * a * m
            dpre = gi * h[j, c] * m * (1.0 - a * a) * 0.5
            dq[i, c] += dpre * k[j, c]
            dk[j, c] += dpre * q[i, c]
            dq[j, c] += dpre * k[i, c]
            dk[i, c] += dpre * q[j, c]
