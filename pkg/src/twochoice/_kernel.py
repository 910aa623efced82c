"""Compiled event loop for the M-server choice-of-d CTMC.

State lives in exact integer tail counts (tail[k] = servers with at
least k jobs).  Time integrals of tail[k] and tail[k]^2 accrue lazily:
a level is settled only when it changes or a segment boundary passes,
keeping each event O(queue depth) instead of O(capacity).  Uniform
variates arrive in caller-owned blocks so the caller controls the RNG
stream; the loop exits when the horizon is flushed, when the block runs
dry, or when a queue outgrows the tail array.

Ranks: picturing the servers sorted by queue length, nonincreasing, the
server of rank r has queue length = the number of levels k with
tail[k] > r.  A uniform rank in [0, M) therefore samples a uniform
server, and a uniform rank in [0, tail[1]) a uniform busy server, with
the length read off by a short forward walk.
"""
from __future__ import annotations

import numba
import numpy as np

DONE = 0
NEED_BLOCK = 1
CAPACITY_EXCEEDED = 2

# istate slots
I_BOUND = 0  # index of the next unflushed segment boundary
I_INSP = 1   # index of the next inspection time
I_UPOS = 2   # cursor into the uniform block
I_EVENTS = 3  # events applied so far
I_DEEP = 4   # deepest level ever occupied
ISTATE_LEN = 5


@numba.njit(cache=True, nogil=True)
def run_events(
    tail,  # int64[cap+1], tail[0] = M
    last,  # float64[cap+1], per-level last-accrual time
    t_state,  # float64[1], current event time
    acc1,  # float64[n_seg, cap+1], per-segment integral of tail[k] dt
    acc2,  # float64[n_seg, cap+1], per-segment integral of tail[k]^2 dt
    bounds,  # float64[n_seg], right edges: warmup, batch edges .., horizon
    insp_times,  # float64[n_insp], sorted, all < horizon
    snaps,  # int64[n_insp, cap+1], snapshot output
    uniforms,  # float64[block]
    istate,  # int64[ISTATE_LEN]
    lam,  # float64
    big_m,  # int64
    d,  # int64
):
    cap = tail.size - 1
    n_seg = bounds.size
    lam_m = lam * big_m
    t = t_state[0]
    b = istate[I_BOUND]
    ins = istate[I_INSP]
    u = istate[I_UPOS]

    while True:
        if b >= n_seg:
            break
        if u + 3 + d > uniforms.size:
            t_state[0] = t
            istate[I_BOUND] = b
            istate[I_INSP] = ins
            istate[I_UPOS] = u
            return NEED_BLOCK

        busy = tail[1]
        total_rate = lam_m + busy
        dt = -np.log1p(-uniforms[u]) / total_rate
        u += 1
        t_next = t + dt

        while b < n_seg and bounds[b] <= t_next:
            edge = bounds[b]
            for k in range(1, cap + 1):
                width = edge - last[k]
                if width > 0.0:
                    acc1[b, k] += tail[k] * width
                    acc2[b, k] += tail[k] * tail[k] * width
                last[k] = edge
            b += 1
        while ins < insp_times.size and insp_times[ins] <= t_next:
            for k in range(cap + 1):
                snaps[ins, k] = tail[k]
            ins += 1
        if b >= n_seg:
            t = t_next
            break

        is_arrival = uniforms[u] * total_rate < lam_m
        u += 1
        if is_arrival:
            shortest = cap + 1
            for _ in range(d):
                r = np.int64(uniforms[u] * big_m)
                u += 1
                if r >= big_m:
                    r = big_m - 1
                length = 0
                while length < cap and tail[length + 1] > r:
                    length += 1
                if length < shortest:
                    shortest = length
            level = shortest + 1
            if level > cap:
                t_state[0] = t
                istate[I_BOUND] = b
                istate[I_INSP] = ins
                istate[I_UPOS] = u
                return CAPACITY_EXCEEDED
            width = t_next - last[level]
            acc1[b, level] += tail[level] * width
            acc2[b, level] += tail[level] * tail[level] * width
            last[level] = t_next
            tail[level] += 1
            if level > istate[I_DEEP]:
                istate[I_DEEP] = level
        else:
            r = np.int64(uniforms[u] * busy)
            u += 1
            if r >= busy:
                r = busy - 1
            level = 1
            while level < cap and tail[level + 1] > r:
                level += 1
            width = t_next - last[level]
            acc1[b, level] += tail[level] * width
            acc2[b, level] += tail[level] * tail[level] * width
            last[level] = t_next
            tail[level] -= 1

        istate[I_EVENTS] += 1
        t = t_next

    t_state[0] = t
    istate[I_BOUND] = b
    istate[I_INSP] = ins
    istate[I_UPOS] = u
    return DONE
