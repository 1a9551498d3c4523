# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled event loop.  Mirrors ``_fallback.run`` operation for operation."""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, sqrt, cos, INFINITY, M_PI
from libc.stdlib cimport malloc, realloc, free
from libc.stdint cimport uint64_t, int64_t, int8_t

cnp.import_array()

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef uint64_t CHILD_SALT = 0x14057B7EF767814FULL
cdef double INV53 = 1.0 / 9007199254740992.0

cdef enum:
    BIRTH = 0
    DEATH = 1
    MUTATION = 2


cdef inline uint64_t mix(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline double horner(double* c, int m, double x) nogil:
    cdef double v = c[m - 1]
    cdef int k
    for k in range(m - 2, -1, -1):
        v = v * x + c[k]
    return v


cdef inline double psup(double* c, int m, double* crit, int nc, double lo, double hi) nogil:
    cdef double v = horner(c, m, lo)
    cdef double w = horner(c, m, hi)
    cdef int k
    if w > v:
        v = w
    for k in range(nc):
        if lo < crit[k] and crit[k] < hi:
            w = horner(c, m, crit[k])
            if w > v:
                v = w
    return v


cdef class _Buf:
    """Growable per-individual and per-event tables."""
    cdef Py_ssize_t cap, n, ecap, ne
    cdef double* anchor
    cdef uint64_t* key
    cdef int64_t* counter
    cdef int64_t* nchild
    cdef double* bound
    cdef double* wend
    cdef int64_t* alive_pos
    cdef int64_t* parent
    cdef int64_t* rank
    cdef double* btime
    cdef double* dtime
    cdef double* btrait
    cdef int64_t* hpos
    cdef int8_t* hkind
    cdef double* htime
    cdef double* ev_time
    cdef int8_t* ev_kind
    cdef int64_t* ev_id
    cdef double* ev_trait

    def __cinit__(self, Py_ssize_t cap):
        self.cap = 0
        self.n = 0
        self.ecap = 0
        self.ne = 0
        self.grow(cap if cap > 16 else 16)
        self.grow_events(4 * self.cap)

    cdef void grow(self, Py_ssize_t cap):
        self.anchor = <double*> realloc(self.anchor, cap * sizeof(double))
        self.key = <uint64_t*> realloc(self.key, cap * sizeof(uint64_t))
        self.counter = <int64_t*> realloc(self.counter, cap * sizeof(int64_t))
        self.nchild = <int64_t*> realloc(self.nchild, cap * sizeof(int64_t))
        self.bound = <double*> realloc(self.bound, cap * sizeof(double))
        self.wend = <double*> realloc(self.wend, cap * sizeof(double))
        self.alive_pos = <int64_t*> realloc(self.alive_pos, cap * sizeof(int64_t))
        self.parent = <int64_t*> realloc(self.parent, cap * sizeof(int64_t))
        self.rank = <int64_t*> realloc(self.rank, cap * sizeof(int64_t))
        self.btime = <double*> realloc(self.btime, cap * sizeof(double))
        self.dtime = <double*> realloc(self.dtime, cap * sizeof(double))
        self.btrait = <double*> realloc(self.btrait, cap * sizeof(double))
        self.hpos = <int64_t*> realloc(self.hpos, cap * sizeof(int64_t))
        self.hkind = <int8_t*> realloc(self.hkind, cap * sizeof(int8_t))
        self.htime = <double*> realloc(self.htime, cap * sizeof(double))
        if (self.anchor == NULL or self.key == NULL or self.counter == NULL
                or self.nchild == NULL or self.bound == NULL or self.wend == NULL
                or self.alive_pos == NULL or self.parent == NULL or self.rank == NULL
                or self.btime == NULL or self.dtime == NULL or self.btrait == NULL
                or self.hpos == NULL or self.hkind == NULL or self.htime == NULL):
            raise MemoryError()
        self.cap = cap

    cdef void grow_events(self, Py_ssize_t cap):
        self.ev_time = <double*> realloc(self.ev_time, cap * sizeof(double))
        self.ev_kind = <int8_t*> realloc(self.ev_kind, cap * sizeof(int8_t))
        self.ev_id = <int64_t*> realloc(self.ev_id, cap * sizeof(int64_t))
        self.ev_trait = <double*> realloc(self.ev_trait, cap * sizeof(double))
        if self.ev_time == NULL or self.ev_kind == NULL or self.ev_id == NULL or self.ev_trait == NULL:
            raise MemoryError()
        self.ecap = cap

    cdef inline void event(self, double t, int8_t kind, int64_t i, double x):
        if self.ne == self.ecap:
            self.grow_events(2 * self.ecap)
        self.ev_time[self.ne] = t
        self.ev_kind[self.ne] = kind
        self.ev_id[self.ne] = i
        self.ev_trait[self.ne] = x
        self.ne += 1

    def __dealloc__(self):
        free(self.anchor); free(self.key); free(self.counter); free(self.nchild)
        free(self.bound); free(self.wend); free(self.alive_pos); free(self.parent)
        free(self.rank); free(self.btime); free(self.dtime); free(self.btrait)
        free(self.hpos); free(self.hkind); free(self.htime)
        free(self.ev_time); free(self.ev_kind); free(self.ev_id); free(self.ev_trait)


cdef class _Heap:
    """Indexed binary min-heap ordered by (time, individual)."""
    cdef int64_t* idx
    cdef Py_ssize_t size, cap
    cdef _Buf buf

    def __cinit__(self, _Buf buf):
        self.buf = buf
        self.cap = buf.cap
        self.size = 0
        self.idx = <int64_t*> malloc(self.cap * sizeof(int64_t))
        if self.idx == NULL:
            raise MemoryError()

    def __dealloc__(self):
        free(self.idx)

    cdef inline bint less(self, int64_t a, int64_t b):
        cdef double ta = self.buf.htime[a]
        cdef double tb = self.buf.htime[b]
        return ta < tb or (ta == tb and a < b)

    cdef void swap_at(self, Py_ssize_t p, Py_ssize_t q):
        cdef int64_t a = self.idx[p]
        cdef int64_t b = self.idx[q]
        self.idx[p] = b
        self.idx[q] = a
        self.buf.hpos[b] = p
        self.buf.hpos[a] = q

    cdef void up(self, Py_ssize_t p):
        cdef Py_ssize_t q
        while p > 0:
            q = (p - 1) >> 1
            if self.less(self.idx[p], self.idx[q]):
                self.swap_at(p, q)
                p = q
            else:
                break

    cdef void down(self, Py_ssize_t p):
        cdef Py_ssize_t l, r, m
        while True:
            l = 2 * p + 1
            r = l + 1
            m = p
            if l < self.size and self.less(self.idx[l], self.idx[m]):
                m = l
            if r < self.size and self.less(self.idx[r], self.idx[m]):
                m = r
            if m == p:
                break
            self.swap_at(p, m)
            p = m

    cdef void put(self, int64_t i, double t, int8_t kind):
        cdef Py_ssize_t p = self.buf.hpos[i]
        cdef double old
        self.buf.hkind[i] = kind
        if p < 0:
            if self.size == self.cap:
                self.cap *= 2
                self.idx = <int64_t*> realloc(self.idx, self.cap * sizeof(int64_t))
                if self.idx == NULL:
                    raise MemoryError()
            self.buf.htime[i] = t
            self.idx[self.size] = i
            self.buf.hpos[i] = self.size
            self.size += 1
            self.up(self.size - 1)
        else:
            old = self.buf.htime[i]
            self.buf.htime[i] = t
            if t < old:
                self.up(p)
            else:
                self.down(p)

    cdef void remove(self, int64_t i):
        cdef Py_ssize_t p = self.buf.hpos[i]
        cdef int64_t last
        if p < 0:
            return
        self.size -= 1
        self.buf.hpos[i] = -1
        if p == self.size:
            return
        last = self.idx[self.size]
        self.idx[p] = last
        self.buf.hpos[last] = p
        self.down(p)
        self.up(self.buf.hpos[last])


cdef class _Sim:
    cdef _Buf buf
    cdef _Heap heap
    cdef int64_t* alive
    cdef Py_ssize_t nalive, acap
    cdef double rho, gamma, window, cb, lam, Kf, kparam, tab_x0, tab_dx
    cdef double* bc
    cdef double* dc
    cdef double* bcrit
    cdef double* dcrit
    cdef int nb, nd, nbc, ndc, kind, ntab
    cdef double* cdf
    cdef object keep

    cdef inline double u_of(self, int64_t i):
        cdef int64_t c = self.buf.counter[i]
        self.buf.counter[i] = c + 1
        cdef uint64_t z = mix(self.buf.key[i] + <uint64_t>(c + 1) * GOLDEN)
        return (<double>(z >> 11) + 0.5) * INV53

    cdef void set_bound(self, int64_t i, double s):
        cdef double x0 = self.buf.anchor[i] + self.rho * s
        cdef double x1, lo, hi
        if self.rho == 0.0:
            lo = x0
            hi = x0
            self.buf.wend[i] = INFINITY
        else:
            x1 = self.buf.anchor[i] + self.rho * (s + self.window)
            if x0 <= x1:
                lo = x0
                hi = x1
            else:
                lo = x1
                hi = x0
            self.buf.wend[i] = s + self.window
        self.buf.bound[i] = (self.gamma + psup(self.bc, self.nb, self.bcrit, self.nbc, lo, hi)
                             + psup(self.dc, self.nd, self.dcrit, self.ndc, lo, hi) + self.cb)

    cdef void schedule(self, int64_t i, double s):
        cdef double B = self.buf.bound[i]
        cdef double u, tc
        if B <= 0.0:
            self.heap.remove(i)
            return
        u = self.u_of(i)
        tc = s - log(u) / B
        if tc >= self.buf.wend[i]:
            self.heap.put(i, self.buf.wend[i], 1)
        else:
            self.heap.put(i, tc, 0)

    cdef int64_t add(self, int64_t par, int64_t rk, uint64_t k, double a, double t, double trait):
        cdef _Buf b = self.buf
        cdef int64_t i = b.n
        if b.n == b.cap:
            b.grow(2 * b.cap)
        if self.nalive == self.acap:
            self.acap *= 2
            self.alive = <int64_t*> realloc(self.alive, self.acap * sizeof(int64_t))
            if self.alive == NULL:
                raise MemoryError()
        b.anchor[i] = a
        b.key[i] = k
        b.counter[i] = 0
        b.nchild[i] = 0
        b.bound[i] = 0.0
        b.wend[i] = 0.0
        b.hpos[i] = -1
        b.alive_pos[i] = self.nalive
        self.alive[self.nalive] = i
        self.nalive += 1
        b.parent[i] = par
        b.rank[i] = rk
        b.btime[i] = t
        b.dtime[i] = INFINITY
        b.btrait[i] = trait
        b.n += 1
        return i

    cdef void kill(self, int64_t i, double t):
        cdef int64_t p = self.buf.alive_pos[i]
        cdef int64_t last = self.alive[self.nalive - 1]
        self.alive[p] = last
        self.buf.alive_pos[last] = p
        self.nalive -= 1
        self.buf.alive_pos[i] = -1
        self.buf.dtime[i] = t
        self.heap.remove(i)

    cdef double jump_target(self, int64_t i, double x):
        cdef double u1, u2, fx
        cdef int64_t r, lo, hi, mid, n
        cdef double* row
        if self.kind == 0:
            u1 = self.u_of(i)
            u2 = self.u_of(i)
            return x + self.kparam * sqrt(-2.0 * log(u1)) * cos(2.0 * M_PI * u2)
        if self.kind == 1:
            return x + self.kparam * (2.0 * self.u_of(i) - 1.0)
        n = self.ntab
        fx = (x - self.tab_x0) / self.tab_dx
        if fx < 0.0:
            fx = 0.0
        elif fx > n - 1:
            fx = <double>(n - 1)
        r = <int64_t> fx
        if r > n - 2:
            r = n - 2
        if self.u_of(i) < fx - r:
            r += 1
        u1 = self.u_of(i)
        row = self.cdf + r * n
        lo = 0
        hi = n
        while lo < hi:
            mid = (lo + hi) >> 1
            if row[mid] < u1:
                lo = mid + 1
            else:
                hi = mid
        if lo > n - 1:
            lo = n - 1
        return self.tab_x0 + lo * self.tab_dx + (self.u_of(i) - 0.5) * self.tab_dx

    def __dealloc__(self):
        free(self.alive)


def run(init_traits, init_keys, mkey, T, rho, gamma, b_coef, b_crit, d_coef, d_crit,
        kernel_kind, kernel_param, tab_x0, tab_dx, tab_cdf, frozen, lam, K,
        comp_bound, window, cap):
    cdef cnp.ndarray[double, ndim=1] traits0 = np.ascontiguousarray(init_traits, dtype=np.float64)
    cdef cnp.ndarray[uint64_t, ndim=1] keys0 = np.ascontiguousarray(init_keys, dtype=np.uint64)
    cdef cnp.ndarray[double, ndim=1] bc = np.ascontiguousarray(b_coef, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] dc = np.ascontiguousarray(d_coef, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] bcr = np.ascontiguousarray(b_crit, dtype=np.float64).reshape(-1)
    cdef cnp.ndarray[double, ndim=1] dcr = np.ascontiguousarray(d_crit, dtype=np.float64).reshape(-1)
    cdef cnp.ndarray[double, ndim=2] cdf = np.ascontiguousarray(
        tab_cdf if kernel_kind == 2 else np.zeros((1, 1)), dtype=np.float64)
    # keep empty arrays addressable
    if bcr.shape[0] == 0:
        bcr = np.zeros(1)
    if dcr.shape[0] == 0:
        dcr = np.zeros(1)

    cdef Py_ssize_t n0 = traits0.shape[0]
    cdef _Buf buf = _Buf(n0 * 2 + 16)
    cdef _Sim sim = _Sim.__new__(_Sim)
    sim.buf = buf
    sim.heap = _Heap(buf)
    sim.acap = buf.cap
    sim.alive = <int64_t*> malloc(sim.acap * sizeof(int64_t))
    sim.nalive = 0
    sim.rho = rho
    sim.gamma = gamma
    sim.window = window
    sim.cb = comp_bound
    sim.lam = lam
    sim.Kf = <double> K
    sim.kparam = kernel_param
    sim.tab_x0 = tab_x0
    sim.tab_dx = tab_dx
    sim.bc = &bc[0]
    sim.dc = &dc[0]
    sim.nb = bc.shape[0]
    sim.nd = dc.shape[0]
    sim.bcrit = &bcr[0]
    sim.dcrit = &dcr[0]
    sim.nbc = len(b_crit)
    sim.ndc = len(d_crit)
    sim.kind = kernel_kind
    sim.ntab = cdf.shape[0]
    sim.cdf = &cdf[0, 0]
    sim.keep = (bc, dc, bcr, dcr, cdf)

    cdef uint64_t mk = <uint64_t> int(mkey)
    cdef double Tf = T
    cdef bint is_frozen = bool(frozen)
    cdef Py_ssize_t capn = int(min(cap, 2 ** 62))
    cdef Py_ssize_t i, r0, k, c
    cdef int64_t N, mc = 0, rk
    cdef double t = 0.0, t_ind, comp, excess, u, t_aux, x, y, theta, bx
    cdef uint64_t z, ck
    cdef int status = 0
    cdef int8_t kind
    cdef long n_cand = 0, n_ph = 0, n_ren = 0, n_aux = 0

    for r0 in range(n0):
        x = traits0[r0]
        sim.add(-1, r0 + 1, keys0[r0], x, 0.0, x)
    for i in range(buf.n):
        sim.set_bound(i, 0.0)
        sim.schedule(i, 0.0)

    N = sim.nalive
    if N == 0:
        status = 1
    while N > 0:
        t_ind = buf.htime[sim.heap.idx[0]] if sim.heap.size > 0 else INFINITY
        if is_frozen:
            comp = sim.lam
        else:
            comp = N / sim.Kf
            excess = comp - sim.cb
            if excess > 0.0:
                comp = sim.cb
                z = mix(mk + <uint64_t>(mc + 1) * GOLDEN)
                mc += 1
                u = (<double>(z >> 11) + 0.5) * INV53
                t_aux = t - log(u) / (N * excess)
                if t_aux < t_ind and t_aux <= Tf:
                    t = t_aux
                    z = mix(mk + <uint64_t>(mc + 1) * GOLDEN)
                    mc += 1
                    u = (<double>(z >> 11) + 0.5) * INV53
                    k = <Py_ssize_t>(u * N)
                    if k >= N:
                        k = N - 1
                    i = sim.alive[k]
                    sim.kill(i, t)
                    N -= 1
                    buf.event(t, DEATH, i, buf.anchor[i] + sim.rho * t)
                    n_aux += 1
                    if N == 0:
                        status = 1
                    continue
        if t_ind > Tf:
            break
        i = sim.heap.idx[0]
        t = t_ind
        kind = buf.hkind[i]
        if kind == 1:
            n_ren += 1
            sim.set_bound(i, t)
            sim.schedule(i, t)
            continue
        n_cand += 1
        x = buf.anchor[i] + sim.rho * t
        theta = sim.u_of(i) * buf.bound[i]
        if theta < sim.gamma:
            y = sim.jump_target(i, x)
            buf.anchor[i] = y - sim.rho * t
            buf.event(t, MUTATION, i, y)
            sim.set_bound(i, t)
            sim.schedule(i, t)
            continue
        theta -= sim.gamma
        bx = horner(sim.bc, sim.nb, x)
        if theta < bx:
            buf.nchild[i] += 1
            rk = buf.nchild[i]
            ck = mix(buf.key[i] ^ mix(<uint64_t>(rk + CHILD_SALT) * GOLDEN))
            c = sim.add(i, rk, ck, buf.anchor[i], t, x)
            N += 1
            buf.event(t, BIRTH, c, x)
            sim.set_bound(c, t)
            sim.schedule(c, t)
            sim.schedule(i, t)
            if N > capn:
                status = 2
                break
            continue
        theta -= bx
        if theta < horner(sim.dc, sim.nd, x) + comp:
            sim.kill(i, t)
            N -= 1
            buf.event(t, DEATH, i, x)
            if N == 0:
                status = 1
            continue
        n_ph += 1
        sim.schedule(i, t)

    cdef Py_ssize_t n = buf.n, ne = buf.ne
    parent = np.empty(n, dtype=np.int64)
    rank = np.empty(n, dtype=np.int64)
    btime = np.empty(n, dtype=np.float64)
    dtime = np.empty(n, dtype=np.float64)
    btrait = np.empty(n, dtype=np.float64)
    keys = np.empty(n, dtype=np.uint64)
    cdef int64_t[:] pv = parent
    cdef int64_t[:] rv = rank
    cdef double[:] btv = btime
    cdef double[:] dtv = dtime
    cdef double[:] brv = btrait
    cdef uint64_t[:] kv = keys
    for i in range(n):
        pv[i] = buf.parent[i]
        rv[i] = buf.rank[i]
        btv[i] = buf.btime[i]
        dtv[i] = buf.dtime[i]
        brv[i] = buf.btrait[i]
        kv[i] = buf.key[i]
    ev_time = np.empty(ne, dtype=np.float64)
    ev_kind = np.empty(ne, dtype=np.int8)
    ev_id = np.empty(ne, dtype=np.int64)
    ev_trait = np.empty(ne, dtype=np.float64)
    cdef double[:] etv = ev_time
    cdef int8_t[:] ekv = ev_kind
    cdef int64_t[:] eiv = ev_id
    cdef double[:] erv = ev_trait
    for i in range(ne):
        etv[i] = buf.ev_time[i]
        ekv[i] = buf.ev_kind[i]
        eiv[i] = buf.ev_id[i]
        erv[i] = buf.ev_trait[i]
    return {
        "parent": parent, "rank": rank, "birth_time": btime, "death_time": dtime,
        "birth_trait": btrait, "keys": keys, "ev_time": ev_time, "ev_kind": ev_kind,
        "ev_id": ev_id, "ev_trait": ev_trait, "status": status,
        "stats": {"candidates": n_cand, "phantoms": n_ph, "renewals": n_ren, "aux": n_aux},
    }
