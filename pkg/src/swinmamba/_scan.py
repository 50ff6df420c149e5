"""Numba kernels for the selective state-space recurrence.

Shapes: x, delta (B, T, D); decay = exp(delta * A) laid out (B, T, N, D);
Bm, Cm (B, T, N); At = A transposed to (N, D). The innermost loops run over the contiguous channel axis.
The decay factors are precomputed by numpy (vectorized exp), so the kernels
only do the multiply-add recurrence. The forward stores every hidden state so
the reverse scan can read h_{t-1}.
"""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def scan_forward(x, delta, decay, Bm, Cm):
    nb, nt, nd = x.shape
    nn = decay.shape[2]
    y = np.zeros((nb, nt, nd), dtype=x.dtype)
    hs = np.zeros((nb, nt, nn, nd), dtype=x.dtype)
    for b in range(nb):
        h = np.zeros((nn, nd), dtype=x.dtype)
        for t in range(nt):
            dt = delta[b, t]
            xv = x[b, t]
            yt = y[b, t]
            for n in range(nn):
                bn = Bm[b, t, n]
                cn = Cm[b, t, n]
                an = decay[b, t, n]
                hn = h[n]
                for d in range(nd):
                    hv = an[d] * hn[d] + dt[d] * bn * xv[d]
                    hn[d] = hv
                    yt[d] += cn * hv
            hs[b, t] = h
    return y, hs


@njit(cache=True, fastmath=True)
def scan_backward(gy, x, delta, decay, At, Bm, Cm, hs):
    """Reverse scan. Returns gx, gdelta, gA (laid out (N, D)), gB, gC.

    The decay gradient is folded into gdelta and gA on the fly:
    d decay / d delta = decay * A and d decay / d A = decay * delta.
    """
    nb, nt, nd = x.shape
    nn = decay.shape[2]
    gx = np.zeros_like(x)
    gdelta = np.zeros_like(delta)
    gA = np.zeros((nn, nd), dtype=x.dtype)
    gB = np.zeros_like(Bm)
    gC = np.zeros_like(Cm)
    for b in range(nb):
        gh = np.zeros((nn, nd), dtype=x.dtype)
        for t in range(nt - 1, -1, -1):
            dt = delta[b, t]
            xv = x[b, t]
            gyt = gy[b, t]
            h = hs[b, t]
            gdt = gdelta[b, t]
            gxt = gx[b, t]
            for n in range(nn):
                bn = Bm[b, t, n]
                cn = Cm[b, t, n]
                an = decay[b, t, n]
                a_n = At[n]
                ga_n = gA[n]
                ghn = gh[n]
                acc_c = 0.0
                acc_b = 0.0
                for d in range(nd):
                    g = ghn[d] + cn * gyt[d]
                    acc_c += gyt[d] * h[n, d]
                    if t > 0:
                        gz = g * hs[b, t - 1, n, d] * an[d]  # d/d(delta * A)
                        gdt[d] += gz * a_n[d]
                        ga_n[d] += gz * dt[d]
                    gdt[d] += g * bn * xv[d]
                    acc_b += g * dt[d] * xv[d]
                    gxt[d] += g * dt[d] * bn
                    ghn[d] = g * an[d]
                gC[b, t, n] = acc_c
                gB[b, t, n] = acc_b
    return gx, gdelta, gA, gB, gC
