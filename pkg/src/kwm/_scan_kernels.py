"""Compiled inner loops of the selective scan.

Loops run batch, time, channel, state so every array is read sequentially.
``a_bar[b, t, e, n] = exp(delta[b, t, e] * A[e, n])`` is precomputed by the caller.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def scan_forward(delta, a_bar, Bm, C, x, D, hs, y):
    """Fill ``hs[b, t, e, :]`` with the states and ``y[b, t, e]`` with the outputs."""
    nb, length, ne = x.shape
    n_state = a_bar.shape[3]
    for b in range(nb):
        for t in range(length):
            for e in range(ne):
                xv = x[b, t, e]
                dx = delta[b, t, e] * xv
                acc = 0.0
                for n in range(n_state):
                    prev = hs[b, t - 1, e, n] if t > 0 else 0.0
                    hn = a_bar[b, t, e, n] * prev + dx * Bm[b, t, n]
                    hs[b, t, e, n] = hn
                    acc += C[b, t, n] * hn
                y[b, t, e] = acc + D[e] * xv


@njit(cache=True)
def scan_backward(gy, delta, A, a_bar, Bm, C, x, D, hs, g_delta, g_A, g_B, g_C, g_x, g_D):
    """Reverse sweep; ``g_B``/``g_C`` must arrive zeroed, ``g_A``/``g_D`` are float64 accumulators."""
    nb, length, ne = x.shape
    n_state = A.shape[1]
    carry = np.zeros((ne, n_state), dtype=hs.dtype)
    for b in range(nb):
        carry[:] = 0
        for t in range(length - 1, -1, -1):
            for e in range(ne):
                dt = delta[b, t, e]
                xv = x[b, t, e]
                g = gy[b, t, e]
                gdt = 0.0
                gxv = g * D[e]
                for n in range(n_state):
                    ghn = g * C[b, t, n] + carry[e, n]
                    g_C[b, t, n] += g * hs[b, t, e, n]
                    a = a_bar[b, t, e, n]
                    if t > 0:
                        gda = ghn * hs[b, t - 1, e, n] * a
                        gdt += gda * A[e, n]
                        g_A[e, n] += gda * dt
                    bn = Bm[b, t, n]
                    gdt += ghn * bn * xv
                    g_B[b, t, n] += ghn * dt * xv
                    gxv += ghn * dt * bn
                    carry[e, n] = a * ghn
                g_delta[b, t, e] = gdt
                g_x[b, t, e] = gxv
                g_D[e] += g * xv
