"""Pure-Python event loop.  Must stay step-for-step identical to ``_core.pyx``."""

import heapq
import math
from bisect import bisect_left

import numpy as np

from .rng import CHILD_SALT, GOLDEN, INV53, MASK

BIRTH, DEATH, MUTATION = 0, 1, 2
OK, EXTINCT, EXPLOSION = 0, 1, 2


def _mix(z):
    z &= MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


def _horner(c, x):
    v = c[-1]
    for k in range(len(c) - 2, -1, -1):
        v = v * x + c[k]
    return v


def _sup(c, crit, lo, hi):
    v = _horner(c, lo)
    w = _horner(c, hi)
    if w > v:
        v = w
    for z in crit:
        if lo < z < hi:
            w = _horner(c, z)
            if w > v:
                v = w
    return v


def run(init_traits, init_keys, mkey, T, rho, gamma, b_coef, b_crit, d_coef, d_crit,
        kernel_kind, kernel_param, tab_x0, tab_dx, tab_cdf, frozen, lam, K,
        comp_bound, window, cap):
    b_coef = [float(v) for v in b_coef]
    d_coef = [float(v) for v in d_coef]
    b_crit = [float(v) for v in b_crit]
    d_crit = [float(v) for v in d_crit]
    cdf_rows = [list(map(float, r)) for r in np.asarray(tab_cdf)] if kernel_kind == 2 else None
    n_tab = len(cdf_rows) if cdf_rows else 0
    mkey = int(mkey)
    T = float(T)
    rho = float(rho)
    gamma = float(gamma)
    lam = float(lam)
    Kf = float(K)
    cb = float(comp_bound)
    window = float(window)
    two_pi = 2.0 * math.pi

    # per-individual tables (grow by append)
    anchor, key, counter, nchild = [], [], [], []
    bound, wend, version, alive_pos = [], [], [], []
    parent, rank, btime, dtime, btrait = [], [], [], [], []
    ev_time, ev_kind, ev_id, ev_trait = [], [], [], []
    alive = []
    heap = []
    stats = {"candidates": 0, "phantoms": 0, "renewals": 0, "aux": 0}

    def u_of(i):
        c = counter[i]
        counter[i] = c + 1
        z = _mix(key[i] + (c + 1) * GOLDEN)
        return ((z >> 11) + 0.5) * INV53

    def set_bound(i, s):
        x0 = anchor[i] + rho * s
        if rho == 0.0:
            lo = hi = x0
            wend[i] = math.inf
        else:
            x1 = anchor[i] + rho * (s + window)
            lo, hi = (x0, x1) if x0 <= x1 else (x1, x0)
            wend[i] = s + window
        bound[i] = gamma + _sup(b_coef, b_crit, lo, hi) + _sup(d_coef, d_crit, lo, hi) + cb

    def schedule(i, s):
        version[i] += 1
        B = bound[i]
        if B <= 0.0:
            return
        u = u_of(i)
        tc = s - math.log(u) / B
        if tc >= wend[i]:
            heapq.heappush(heap, (wend[i], i, version[i], 1))
        else:
            heapq.heappush(heap, (tc, i, version[i], 0))

    def add(par, rk, k, a, t, trait):
        i = len(anchor)
        anchor.append(a)
        key.append(k)
        counter.append(0)
        nchild.append(0)
        bound.append(0.0)
        wend.append(0.0)
        version.append(0)
        alive_pos.append(len(alive))
        alive.append(i)
        parent.append(par)
        rank.append(rk)
        btime.append(t)
        dtime.append(math.inf)
        btrait.append(trait)
        return i

    def kill(i, t):
        p = alive_pos[i]
        last = alive[-1]
        alive[p] = last
        alive_pos[last] = p
        alive.pop()
        alive_pos[i] = -1
        dtime[i] = t
        version[i] += 1

    def jump_target(i, x):
        if kernel_kind == 0:
            u1 = u_of(i)
            u2 = u_of(i)
            return x + kernel_param * math.sqrt(-2.0 * math.log(u1)) * math.cos(two_pi * u2)
        if kernel_kind == 1:
            return x + kernel_param * (2.0 * u_of(i) - 1.0)
        fx = (x - tab_x0) / tab_dx
        if fx < 0.0:
            fx = 0.0
        elif fx > n_tab - 1:
            fx = float(n_tab - 1)
        r = int(fx)
        if r > n_tab - 2:
            r = n_tab - 2
        if u_of(i) < fx - r:
            r += 1
        j = bisect_left(cdf_rows[r], u_of(i))
        if j > n_tab - 1:
            j = n_tab - 1
        return tab_x0 + j * tab_dx + (u_of(i) - 0.5) * tab_dx

    for r0 in range(len(init_traits)):
        x = float(init_traits[r0])
        add(-1, r0 + 1, int(init_keys[r0]), x, 0.0, x)
    for i in range(len(anchor)):
        set_bound(i, 0.0)
        schedule(i, 0.0)

    status = OK
    t = 0.0
    mc = 0
    N = len(alive)
    if N == 0:
        status = EXTINCT
    while N > 0:
        while heap and heap[0][2] != version[heap[0][1]]:
            heapq.heappop(heap)
        t_ind = heap[0][0] if heap else math.inf
        if frozen:
            comp = lam
        else:
            comp = N / Kf
            excess = comp - cb
            if excess > 0.0:
                comp = cb
                z = _mix(mkey + (mc + 1) * GOLDEN)
                mc += 1
                u = ((z >> 11) + 0.5) * INV53
                t_aux = t - math.log(u) / (N * excess)
                if t_aux < t_ind and t_aux <= T:
                    t = t_aux
                    z = _mix(mkey + (mc + 1) * GOLDEN)
                    mc += 1
                    u = ((z >> 11) + 0.5) * INV53
                    k = int(u * N)
                    if k >= N:
                        k = N - 1
                    i = alive[k]
                    kill(i, t)
                    N -= 1
                    ev_time.append(t)
                    ev_kind.append(DEATH)
                    ev_id.append(i)
                    ev_trait.append(anchor[i] + rho * t)
                    stats["aux"] += 1
                    if N == 0:
                        status = EXTINCT
                    continue
        if t_ind > T:
            break
        t, i, _, kind = heapq.heappop(heap)
        if kind == 1:
            stats["renewals"] += 1
            set_bound(i, t)
            schedule(i, t)
            continue
        stats["candidates"] += 1
        x = anchor[i] + rho * t
        theta = u_of(i) * bound[i]
        if theta < gamma:
            y = jump_target(i, x)
            anchor[i] = y - rho * t
            ev_time.append(t)
            ev_kind.append(MUTATION)
            ev_id.append(i)
            ev_trait.append(y)
            set_bound(i, t)
            schedule(i, t)
            continue
        theta -= gamma
        bx = _horner(b_coef, x)
        if theta < bx:
            nchild[i] += 1
            rk = nchild[i]
            ck = _mix(key[i] ^ _mix((rk + CHILD_SALT) * GOLDEN))
            c = add(i, rk, ck, anchor[i], t, x)
            N += 1
            ev_time.append(t)
            ev_kind.append(BIRTH)
            ev_id.append(c)
            ev_trait.append(x)
            set_bound(c, t)
            schedule(c, t)
            schedule(i, t)
            if N > cap:
                status = EXPLOSION
                break
            continue
        theta -= bx
        if theta < _horner(d_coef, x) + comp:
            kill(i, t)
            N -= 1
            ev_time.append(t)
            ev_kind.append(DEATH)
            ev_id.append(i)
            ev_trait.append(x)
            if N == 0:
                status = EXTINCT
            continue
        stats["phantoms"] += 1
        schedule(i, t)

    return {
        "parent": np.array(parent, dtype=np.int64),
        "rank": np.array(rank, dtype=np.int64),
        "birth_time": np.array(btime, dtype=float),
        "death_time": np.array(dtime, dtype=float),
        "birth_trait": np.array(btrait, dtype=float),
        "keys": np.array(key, dtype=np.uint64),
        "ev_time": np.array(ev_time, dtype=float),
        "ev_kind": np.array(ev_kind, dtype=np.int8),
        "ev_id": np.array(ev_id, dtype=np.int64),
        "ev_trait": np.array(ev_trait, dtype=float),
        "status": status,
        "stats": stats,
    }
