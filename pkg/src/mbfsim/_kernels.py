"""Compiled inner loops.

The kernels never draw random numbers themselves: callers feed blocks of
uniforms from a numpy ``Generator`` so that the stream is fully determined by
the seed and independent of block size.
"""
import math

import numpy as np
from numba import njit


@njit(nogil=True, cache=True)
def dtmc_block(u, down, up, f, start_good, state, t, limit, flipped, flip_time,
               stop_on_flip, occ, record, ev_t, ev_s):
    """Consume uniforms one per step until ``t == limit`` or the block ends.

    Returns ``(state, t, flipped, flip_time, n_events, done, n_used)``.
    """
    n_ev = 0
    used = 0
    done = False
    for k in range(u.shape[0]):
        if t >= limit:
            done = True
            break
        occ[state] += 1.0
        x = u[k]
        used += 1
        t += 1
        d = down[state]
        if x < d:
            state -= 1
        elif x < d + up[state]:
            state += 1
        else:
            continue
        if record:
            ev_t[n_ev] = t
            ev_s[n_ev] = state
            n_ev += 1
        if not flipped:
            if (start_good and state > f) or ((not start_good) and state <= f):
                flipped = True
                flip_time = float(t)
                if stop_on_flip:
                    done = True
                    break
    if t >= limit:
        done = True
    return state, t, flipped, flip_time, n_ev, done, used


@njit(nogil=True, cache=True)
def ctmc_block(u, down, up, f, start_good, state, t, limit, flipped, flip_time,
               stop_on_flip, occ, record, ev_t, ev_s):
    """Event-driven loop: two uniforms per event (holding time, direction).

    Holding times use the inverse CDF ``-log(1 - U) / R``.  An absorbing
    state (``R == 0``) or a holding time crossing ``limit`` credits the
    residual time to the current state and finishes the run.
    """
    n_ev = 0
    used = 0
    done = False
    m = u.shape[0] // 2
    for k in range(m):
        if t >= limit:
            done = True
            break
        d = down[state]
        rate = d + up[state]
        if rate <= 0.0:
            occ[state] += limit - t
            t = limit
            done = True
            break
        used += 2
        h = -math.log1p(-u[2 * k]) / rate
        if t + h >= limit:
            occ[state] += limit - t
            t = limit
            done = True
            break
        occ[state] += h
        t += h
        if u[2 * k + 1] * rate < d:
            state -= 1
        else:
            state += 1
        if record:
            ev_t[n_ev] = t
            ev_s[n_ev] = state
            n_ev += 1
        if not flipped:
            if (start_good and state > f) or ((not start_good) and state <= f):
                flipped = True
                flip_time = t
                if stop_on_flip:
                    done = True
                    break
    return state, t, flipped, flip_time, n_ev, done, used


@njit(nogil=True, cache=True)
def absorption_first_exceed(down, up, stay, target, start, eps, max_steps):
    """Forward-iterate the chain with ``target`` absorbing.

    Returns ``(k, mass)`` where ``k`` is the first step at which the absorbed
    mass exceeds ``eps``, or ``max_steps`` (with the mass reached) if it never
    does.  Only states ``0..target`` matter for a start below the target.
    """
    m = target + 1
    v = np.zeros(m)
    w = np.zeros(m)
    v[start] = 1.0
    mass = 0.0
    for k in range(1, max_steps + 1):
        for i in range(m):
            w[i] = 0.0
        w[target] = v[target]
        for i in range(target):
            pi = v[i]
            if pi == 0.0:
                continue
            w[i] += pi * stay[i]
            if i > 0:
                w[i - 1] += pi * down[i]
            w[i + 1] += pi * up[i]
        mass = w[target]
        for i in range(m):
            v[i] = w[i]
        if mass > eps:
            return k, mass
    return max_steps, mass


@njit(nogil=True, cache=True)
def absorption_column(down, up, stay, target, start, n_steps):
    """Absorbed mass after ``k`` steps, for ``k = 0..n_steps``."""
    m = target + 1
    v = np.zeros(m)
    w = np.zeros(m)
    out = np.zeros(n_steps + 1)
    v[start] = 1.0
    out[0] = v[target]
    for k in range(1, n_steps + 1):
        for i in range(m):
            w[i] = 0.0
        w[target] = v[target]
        for i in range(target):
            pi = v[i]
            if pi == 0.0:
                continue
            w[i] += pi * stay[i]
            if i > 0:
                w[i - 1] += pi * down[i]
            w[i + 1] += pi * up[i]
        for i in range(m):
            v[i] = w[i]
        out[k] = v[target]
    return out
