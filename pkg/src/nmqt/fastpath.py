"""Compiled register kernels for the two-level atom.

Specialised to ``dim == 2`` with ``sigma = |g><e|``: an emission moves the
excited amplitude of the source label into the ground amplitude of the target
label, and reabsorption moves the ground amplitude back up. The numpy
primitives in :mod:`nmqt.engine` are the reference these are tested against.

``types`` arrays encode outcomes as 1 = detected, 0 = not detected.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _free(old, step_op):
    n = old.shape[0]
    new = np.empty((n, 2), dtype=np.complex128)
    e00 = step_op[0, 0]
    e01 = step_op[0, 1]
    e10 = step_op[1, 0]
    e11 = step_op[1, 1]
    for l in range(n):
        g = old[l, 0]
        e = old[l, 1]
        new[l, 0] = e00 * g + e01 * e
        new[l, 1] = e10 * g + e11 * e
    return new


@njit(cache=True)
def _emit(new, old, n_bits, weights):
    # label l with bit j set receives w_j * sigma * old[l ^ 2^j]
    n = old.shape[0]
    for j in range(n_bits):
        bit = 1 << j
        span = bit << 1
        w = weights[j]
        for base in range(0, n, span):
            for lo in range(bit):
                new[base + bit + lo, 0] += w * old[base + lo, 1]


@njit(cache=True)
def _increment(old, n_slots, step_op, weights):
    new = _free(old, step_op)
    _emit(new, old, n_slots, weights)
    return new


@njit(cache=True)
def _retire(kets, detected):
    half = kets.shape[0] // 2
    out = np.empty((half, 2), dtype=np.complex128)
    for m in range(half):
        if detected:
            out[m, 0] = kets[2 * m + 1, 0]
            out[m, 1] = kets[2 * m + 1, 1]
        else:
            out[m, 0] = kets[2 * m, 0]
            out[m, 1] = kets[2 * m, 1] + kets[2 * m + 1, 0]
    return out


@njit(cache=True)
def _norm_sq(v):
    s = 0.0
    for x in v.ravel():
        s += x.real * x.real + x.imag * x.imag
    return s


@njit(cache=True)
def hypothesis_pass(kets, types, step_op, click_w, loop_w):
    """Propagate the committed register to the next measurement time.

    Returns ``(norm_before, click_ket, noclick_ket)``: the squared norm one
    step earlier and the final kets under the click and no-click hypotheses.

    The pending slot is the highest label bit. Kets with that bit clear are
    the same under both hypotheses, so ``a`` carries the full click-hypothesis
    register and ``b`` only the upper (pending bit set) half of the no-click
    one.
    """
    n = types.shape[0]
    half = kets.shape[0]
    a = np.zeros((2 * half, 2), dtype=np.complex128)
    a[:half, :] = kets
    b = np.zeros((half, 2), dtype=np.complex128)
    w = np.empty(n + 1, dtype=np.complex128)
    norm_before = 0.0
    for step in range(n + 1):
        m = n + 1 - step  # live slots, pending included
        for i in range(m - 1):
            w[i] = click_w[i] if types[step + i] == 1 else loop_w[i]
        w[m - 1] = click_w[m - 1]
        if step == n:
            norm_before = _norm_sq(a[0])
        h = a.shape[0] // 2
        new_a = _free(a, step_op)
        _emit(new_a, a, m, w)
        new_b = _free(b, step_op)
        _emit(new_b, b, m - 1, w)
        wp = loop_w[m - 1]
        for l in range(h):
            new_b[l, 0] += wp * a[l, 1]
        a = new_a
        b = new_b
        if step < n:
            det = types[step] == 1
            a = _retire(a, det)
            b = _retire(b, det)
    click = a[1].copy()
    noclick = np.empty(2, dtype=np.complex128)
    noclick[0] = a[0, 0]
    noclick[1] = a[0, 1] + b[0, 0]
    return norm_before, click, noclick


@njit(cache=True)
def commit_increment(kets, types, step_op, click_w, loop_w):
    """One increment from the base time followed by retirement of the oldest slot."""
    n = types.shape[0]
    w = np.empty(n, dtype=np.complex128)
    for i in range(n):
        w[i] = click_w[i] if types[i] == 1 else loop_w[i]
    new = _increment(kets, n, step_op, w)
    return _retire(new, types[0] == 1)


@njit(cache=True)
def probabilities(kets, types, step_op, click_w, loop_w, dt):
    """``(norm_before, p_click, p_noclick)`` without materialising the hypothesis kets."""
    norm_before, click, noclick = hypothesis_pass(kets, types, step_op, click_w, loop_w)
    return norm_before, dt * _norm_sq(click) / norm_before, _norm_sq(noclick) / norm_before


@njit(cache=True)
def commit_full(kets, types, step_op, click_w, loop_w):
    """Extend by the newest slot, increment, retire the oldest and renormalize.

    ``kets`` holds ``2^(N-1)`` rows and ``types`` the ``N`` outcomes in the
    window. Returns ``(kets, squared_norm_before_renormalization, sigma_z)``.
    """
    half = kets.shape[0]
    ext = np.zeros((2 * half, 2), dtype=np.complex128)
    ext[:half, :] = kets
    new = commit_increment(ext, types, step_op, click_w, loop_w)
    total, sz = _normalize(new)
    return new, total, sz


@njit(cache=True)
def grow(kets):
    """Warm-up commit: extend only, then renormalize."""
    half = kets.shape[0]
    ext = np.zeros((2 * half, 2), dtype=np.complex128)
    ext[:half, :] = kets
    total, sz = _normalize(ext)
    return ext, total, sz


@njit(cache=True)
def _normalize(kets):
    pg = 0.0
    pe = 0.0
    for l in range(kets.shape[0]):
        g = kets[l, 0]
        e = kets[l, 1]
        pg += g.real * g.real + g.imag * g.imag
        pe += e.real * e.real + e.imag * e.imag
    total = pg + pe
    if total > 0.0:
        scale = 1.0 / np.sqrt(total)
        for l in range(kets.shape[0]):
            kets[l, 0] *= scale
            kets[l, 1] *= scale
        return total, (pe - pg) / total
    return total, 0.0
