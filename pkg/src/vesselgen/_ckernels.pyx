# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, log, fabs, floor, ceil, hypot, copysign, INFINITY

from vesselgen._pykernels import ADJ26 as _ADJ26, ADJ6 as _ADJ6, N18 as _N18, FACE6 as _FACE6

cnp.import_array()

cdef int ADJ26[27][26]
cdef int NADJ26[27]
cdef int ADJ6[27][6]
cdef int NADJ6[27]
cdef int IN_N18[27]
cdef int FACE6[6]


def _init_tables():
    cdef int i, j
    for i in range(27):
        NADJ26[i] = len(_ADJ26[i])
        for j in range(NADJ26[i]):
            ADJ26[i][j] = _ADJ26[i][j]
        NADJ6[i] = len(_ADJ6[i])
        for j in range(NADJ6[i]):
            ADJ6[i][j] = _ADJ6[i][j]
        IN_N18[i] = 1 if i in _N18 else 0
    for i in range(6):
        FACE6[i] = _FACE6[i]


_init_tables()


cdef bint _simple(const unsigned char* cube) noexcept nogil:
    cdef int seen[27]
    cdef int stack[27]
    cdef int sp, s, u, v, k, ncomp
    for k in range(27):
        seen[k] = 0
    ncomp = 0
    for s in range(27):
        if s == 13 or cube[s] == 0 or seen[s]:
            continue
        ncomp += 1
        if ncomp > 1:
            return False
        sp = 0
        stack[sp] = s
        sp += 1
        seen[s] = 1
        while sp > 0:
            sp -= 1
            u = stack[sp]
            for k in range(NADJ26[u]):
                v = ADJ26[u][k]
                if cube[v] != 0 and not seen[v]:
                    seen[v] = 1
                    stack[sp] = v
                    sp += 1
    if ncomp != 1:
        return False
    for k in range(27):
        seen[k] = 0
    ncomp = 0
    for k in range(6):
        s = FACE6[k]
        if cube[s] != 0 or seen[s]:
            continue
        ncomp += 1
        if ncomp > 1:
            return False
        sp = 0
        stack[sp] = s
        sp += 1
        seen[s] = 1
        while sp > 0:
            sp -= 1
            u = stack[sp]
            for k2 in range(NADJ6[u]):
                v = ADJ6[u][k2]
                if IN_N18[v] and cube[v] == 0 and not seen[v]:
                    seen[v] = 1
                    stack[sp] = v
                    sp += 1
    return ncomp == 1


def is_simple_point(cube):
    cdef unsigned char buf[27]
    cdef int i
    for i in range(27):
        buf[i] = 1 if cube[i] else 0
    return bool(_simple(buf))


def thin_subiteration(cnp.uint8_t[:, :, ::1] vol, int dx, int dy, int dz):
    cdef Py_ssize_t nx = vol.shape[0], ny = vol.shape[1], nz = vol.shape[2]
    cdef Py_ssize_t x, y, z, n = 0, c, ncand
    cdef int i, j, k, cnt, removed = 0
    cdef unsigned char cube[27]
    cand = np.empty((nx * ny * nz, 3), dtype=np.intp)
    cdef Py_ssize_t[:, ::1] cv = cand
    for x in range(1, nx - 1):
        for y in range(1, ny - 1):
            for z in range(1, nz - 1):
                if vol[x, y, z] != 0 and vol[x + dx, y + dy, z + dz] == 0:
                    cv[n, 0] = x
                    cv[n, 1] = y
                    cv[n, 2] = z
                    n += 1
    ncand = n
    with nogil:
        for c in range(ncand):
            x = cv[c, 0]
            y = cv[c, 1]
            z = cv[c, 2]
            cnt = 0
            for i in range(3):
                for j in range(3):
                    for k in range(3):
                        cube[i * 9 + j * 3 + k] = vol[x - 1 + i, y - 1 + j, z - 1 + k]
                        cnt += cube[i * 9 + j * 3 + k]
            if cnt - 1 <= 1:
                continue
            if _simple(cube):
                vol[x, y, z] = 0
                removed += 1
    return removed


def capsule_field(origin, double voxel, shape, a, b, ra, rb, double margin):
    cdef int sx = int(shape[0]), sy = int(shape[1]), sz = int(shape[2])
    cdef double[::1] o = np.ascontiguousarray(origin, dtype=np.float64)
    cdef double[:, ::1] A = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, ::1] B = np.ascontiguousarray(b, dtype=np.float64)
    cdef double[::1] RA = np.ascontiguousarray(ra, dtype=np.float64)
    cdef double[::1] RB = np.ascontiguousarray(rb, dtype=np.float64)
    fill = voxel * float(sx + sy + sz) + 1.0
    field = np.full((sx, sy, sz), fill)
    cdef double[:, :, ::1] F = field
    cdef Py_ssize_t e, i, j, k
    cdef int lo[3]
    cdef int hi[3]
    cdef int dims[3]
    cdef double abv[3]
    cdef double r, denom, px, py, pz, t, qx, qy, qz, d, mn, mx
    dims[0] = sx
    dims[1] = sy
    dims[2] = sz
    with nogil:
        for e in range(A.shape[0]):
            r = (RA[e] if RA[e] > RB[e] else RB[e]) + margin
            for k in range(3):
                mn = A[e, k] if A[e, k] < B[e, k] else B[e, k]
                mx = A[e, k] if A[e, k] > B[e, k] else B[e, k]
                lo[k] = <int>floor((mn - r - o[k]) / voxel)
                hi[k] = <int>ceil((mx + r - o[k]) / voxel) + 1
                if lo[k] < 0:
                    lo[k] = 0
                if hi[k] > dims[k]:
                    hi[k] = dims[k]
                abv[k] = B[e, k] - A[e, k]
            denom = abv[0] * abv[0] + abv[1] * abv[1] + abv[2] * abv[2]
            for i in range(lo[0], hi[0]):
                px = o[0] + voxel * i - A[e, 0]
                for j in range(lo[1], hi[1]):
                    py = o[1] + voxel * j - A[e, 1]
                    for k in range(lo[2], hi[2]):
                        pz = o[2] + voxel * k - A[e, 2]
                        if denom > 0.0:
                            t = (px * abv[0] + py * abv[1] + pz * abv[2]) / denom
                            if t < 0.0:
                                t = 0.0
                            elif t > 1.0:
                                t = 1.0
                        else:
                            t = 0.0
                        qx = px - t * abv[0]
                        qy = py - t * abv[1]
                        qz = pz - t * abv[2]
                        d = sqrt(qx * qx + qy * qy + qz * qz) - (RA[e] + t * (RB[e] - RA[e]))
                        if d < F[i, j, k]:
                            F[i, j, k] = d
    return field


def min_sqdist(a, b):
    cdef double[:, ::1] A = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, ::1] B = np.ascontiguousarray(b, dtype=np.float64)
    out = np.empty(A.shape[0])
    cdef double[::1] O = out
    cdef Py_ssize_t i, j
    cdef double best, dx, dy, dz, d
    with nogil:
        for i in range(A.shape[0]):
            best = INFINITY
            for j in range(B.shape[0]):
                dx = A[i, 0] - B[j, 0]
                dy = A[i, 1] - B[j, 1]
                dz = A[i, 2] - B[j, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < best:
                    best = d
            O[i] = best
    return out


def sinkhorn_log(cost, log_a, log_b, double eps, int max_iter, double tol, g_init=None):
    cdef double[:, ::1] C = np.ascontiguousarray(cost, dtype=np.float64)
    cdef double[::1] la = np.ascontiguousarray(log_a, dtype=np.float64)
    cdef double[::1] lb = np.ascontiguousarray(log_b, dtype=np.float64)
    cdef Py_ssize_t n = C.shape[0], m = C.shape[1], i, j
    f_arr = np.zeros(n)
    g_arr = np.zeros(m) if g_init is None else np.array(g_init, dtype=np.float64)
    cdef double[::1] f = f_arr
    cdef double[::1] g = g_arr
    tmp_arr = np.empty(max(n, m))
    cdef double[::1] tmp = tmp_arr
    cdef double mx, s, v, err = INFINITY, row
    cdef int it = 0
    with nogil:
        while it < max_iter:
            it += 1
            for i in range(n):
                mx = -INFINITY
                for j in range(m):
                    v = (g[j] - C[i, j]) / eps + lb[j]
                    tmp[j] = v
                    if v > mx:
                        mx = v
                s = 0.0
                for j in range(m):
                    s += exp(tmp[j] - mx)
                f[i] = -eps * (mx + log(s))
            for j in range(m):
                mx = -INFINITY
                for i in range(n):
                    v = (f[i] - C[i, j]) / eps + la[i]
                    tmp[i] = v
                    if v > mx:
                        mx = v
                s = 0.0
                for i in range(n):
                    s += exp(tmp[i] - mx)
                g[j] = -eps * (mx + log(s))
            err = 0.0
            for i in range(n):
                row = 0.0
                for j in range(m):
                    row += exp((f[i] + g[j] - C[i, j]) / eps + la[i] + lb[j])
                err += fabs(row - exp(la[i]))
            if err < tol:
                break
    return f_arr, g_arr, it, err


def tql_eigenvalues(d_in, e_in, int max_sweeps=60):
    cdef Py_ssize_t n = len(d_in)
    d_arr = np.array(d_in, dtype=np.float64)
    e_arr = np.zeros(n + 1)
    if n > 1:
        e_arr[:n - 1] = np.asarray(e_in, dtype=np.float64)
    cdef double[::1] d = d_arr
    cdef double[::1] e = e_arr
    cdef Py_ssize_t l, m, i
    cdef int it
    cdef double dd, g, r, s, c, p, f, b
    cdef bint underflow
    for l in range(n):
        it = 0
        while True:
            m = l
            while m < n - 1:
                dd = fabs(d[m]) + fabs(d[m + 1])
                if fabs(e[m]) <= 1e-15 * dd:
                    break
                m += 1
            if m == l:
                break
            it += 1
            if it > max_sweeps:
                raise ArithmeticError(f"QL iteration did not converge for eigenvalue {l}")
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + copysign(r, g))
            s = 1.0
            c = 1.0
            p = 0.0
            i = m - 1
            underflow = False
            while i >= l:
                f = s * e[i]
                b = c * e[i]
                r = hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    underflow = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                i -= 1
            if underflow:
                continue
            d[l] -= p
            e[l] = g
            e[m] = 0.0
    return np.sort(d_arr)
