"""LSTM recurrences with compiled inner loops.

Both kernels operate on the stacked two-direction layout used by
:mod:`countkit.model`: arrays carry a leading direction axis of size 2 and a
time axis in processing order. Gate layout is ``(input, forget, output, cell)``.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _gate_update(u, c, cs_t):
    """Turn tanh'd pre-activations into gates and advance the cell state.

    ``u`` holds tanh(pre / 2) for the three sigmoid gates and tanh(pre) for
    the cell candidate; the sigmoid gates are recovered as 0.5 + 0.5 * u.
    """
    n_dir, B, G = u.shape
    H = G // 4
    for z in range(n_dir):
        for b in range(B):
            for j in range(3 * H):
                u[z, b, j] = 0.5 + 0.5 * u[z, b, j]
            for j in range(H):
                cc = u[z, b, H + j] * c[z, b, j] + u[z, b, j] * u[z, b, 3 * H + j]
                c[z, b, j] = cc
                cs_t[z, b, j] = cc


@njit(cache=True)
def _hidden_update(u, tc, h):
    n_dir, B, G = u.shape
    H = G // 4
    for z in range(n_dir):
        for b in range(B):
            for j in range(H):
                h[z, b, j] = u[z, b, 2 * H + j] * tc[z, b, j]


def lstm_forward(xproj, Wh, acts, cs, tcs, hs):
    """Run the recurrence given input projections ``xproj`` (2, D, B, 4H).

    Fills ``acts`` (gate activations), ``cs``, ``tcs`` (tanh of cell) and
    ``hs`` in place. ``xproj`` is overwritten.

    The transcendental work goes through numpy's vectorised tanh (sigmoid is
    evaluated as 0.5 + 0.5 tanh(x / 2)); the compiled helpers do the rest.
    """
    D = xproj.shape[1]
    H = Wh.shape[1]
    xproj[..., : 3 * H] *= 0.5
    Wh_half = Wh.copy()
    Wh_half[..., : 3 * H] *= 0.5
    c = np.zeros(cs.shape[:1] + cs.shape[2:], dtype=cs.dtype)
    h = np.zeros_like(c)
    for t in range(D):
        a = acts[:, t]
        np.add(xproj[:, t], np.matmul(h, Wh_half), out=a)
        np.tanh(a, out=a)
        _gate_update(a, c, cs[:, t])
        tc = np.tanh(c, out=tcs[:, t])
        h = hs[:, t]
        _hidden_update(a, tc, h)


@njit(cache=True)
def lstm_backward(dH, acts, cs, tcs, Wh, dG):
    """Backpropagate ``dH`` (2, D, B, H) through time.

    Writes gate pre-activation gradients into ``dG`` (2, D, B, 4H).
    """
    n_dir, D, B, H = dH.shape
    dh_next = np.zeros((B, H), dtype=dH.dtype)
    dc_next = np.zeros((B, H), dtype=dH.dtype)
    g = np.empty((B, 4 * H), dtype=dH.dtype)
    for z in range(n_dir):
        WT = np.ascontiguousarray(Wh[z].T)
        dh_next[:] = 0.0
        dc_next[:] = 0.0
        for t in range(D - 1, -1, -1):
            for b in range(B):
                for j in range(H):
                    i_g = acts[z, t, b, j]
                    f_g = acts[z, t, b, H + j]
                    o_g = acts[z, t, b, 2 * H + j]
                    g_g = acts[z, t, b, 3 * H + j]
                    tc = tcs[z, t, b, j]
                    c_prev = cs[z, t - 1, b, j] if t > 0 else 0.0
                    dh = dH[z, t, b, j] + dh_next[b, j]
                    dc = dc_next[b, j] + dh * o_g * (1.0 - tc * tc)
                    g[b, j] = dc * g_g * i_g * (1.0 - i_g)
                    g[b, H + j] = dc * c_prev * f_g * (1.0 - f_g)
                    g[b, 2 * H + j] = dh * tc * o_g * (1.0 - o_g)
                    g[b, 3 * H + j] = dc * i_g * (1.0 - g_g * g_g)
                    dc_next[b, j] = dc * f_g
            dG[z, t] = g
            dh_next = np.dot(g, WT)
