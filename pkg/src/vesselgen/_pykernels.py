"""Pure-Python/numpy implementations of the hot kernels.

Every function here has a twin with the same signature and semantics in
``_ckernels.pyx``. ``vesselgen.kernels`` picks one at import time.
"""
from __future__ import annotations

import math

import numpy as np

# 3x3x3 neighbourhood, flat index (dx+1)*9 + (dy+1)*3 + (dz+1); centre = 13
_OFFSETS = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
CENTER = 13


def _build_tables():
    adj26 = []
    adj6 = []
    for i, a in enumerate(_OFFSETS):
        n26 = []
        n6 = []
        for j, b in enumerate(_OFFSETS):
            if i == j or j == CENTER:
                continue
            d = [abs(a[k] - b[k]) for k in range(3)]
            if max(d) == 1:
                n26.append(j)
                if sum(d) == 1:
                    n6.append(j)
        adj26.append(n26)
        adj6.append(n6)
    n18 = [i for i, o in enumerate(_OFFSETS) if i != CENTER and sum(map(abs, o)) <= 2]
    face6 = [i for i, o in enumerate(_OFFSETS) if sum(map(abs, o)) == 1]
    return adj26, adj6, n18, face6


ADJ26, ADJ6, N18, FACE6 = _build_tables()
_IN_N18 = [i in N18 for i in range(27)]


def is_simple_point(cube) -> bool:
    """Topological simplicity of the centre voxel of a 27-element 0/1 cube.

    Simple means: the foreground neighbours form exactly one 26-component and
    the 18-neighbourhood background touching a face of the centre forms
    exactly one 6-component.
    """
    fg = [bool(cube[i]) and i != CENTER for i in range(27)]
    seen = [False] * 27
    n_fg = 0
    for s in range(27):
        if fg[s] and not seen[s]:
            n_fg += 1
            if n_fg > 1:
                return False
            stack = [s]
            seen[s] = True
            while stack:
                u = stack.pop()
                for v in ADJ26[u]:
                    if fg[v] and not seen[v]:
                        seen[v] = True
                        stack.append(v)
    if n_fg != 1:
        return False

    bg = [(not cube[i]) and _IN_N18[i] for i in range(27)]
    seen = [False] * 27
    n_bg = 0
    for s in FACE6:
        if bg[s] and not seen[s]:
            n_bg += 1
            if n_bg > 1:
                return False
            stack = [s]
            seen[s] = True
            while stack:
                u = stack.pop()
                for v in ADJ6[u]:
                    if bg[v] and not seen[v]:
                        seen[v] = True
                        stack.append(v)
    return n_bg == 1


def thin_subiteration(vol: np.ndarray, dx: int, dy: int, dz: int) -> int:
    """One directional peeling pass over a zero-padded uint8 volume, in place.

    Border voxels (background at offset (dx, dy, dz)) are collected first and
    then deleted sequentially in raster order when still simple and not a
    curve end point. Returns the number of deleted voxels.
    """
    nx, ny, nz = vol.shape
    inner = vol[1:-1, 1:-1, 1:-1]
    shifted = vol[1 + dx:nx - 1 + dx, 1 + dy:ny - 1 + dy, 1 + dz:nz - 1 + dz]
    cand = np.argwhere((inner != 0) & (shifted == 0)) + 1
    removed = 0
    for x, y, z in cand:
        cube = vol[x - 1:x + 2, y - 1:y + 2, z - 1:z + 2].ravel()
        if int(cube.sum()) - 1 <= 1:
            continue
        if is_simple_point(cube):
            vol[x, y, z] = 0
            removed += 1
    return removed


def capsule_field(origin, voxel: float, shape, a, b, ra, rb, margin: float) -> np.ndarray:
    """Union of tapered capsules sampled on a regular grid.

    Grid point (i, j, k) sits at origin + voxel*(i, j, k). Each capsule only
    touches grid points inside its bounding box grown by ``margin``; other
    points keep a large positive fill value.
    """
    shape = tuple(int(s) for s in shape)
    origin = np.asarray(origin, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    fill = voxel * float(sum(shape)) + 1.0
    field = np.full(shape, fill)
    for e in range(a.shape[0]):
        r = max(ra[e], rb[e]) + margin
        lo = np.minimum(a[e], b[e]) - r
        hi = np.maximum(a[e], b[e]) + r
        i0 = np.maximum(np.floor((lo - origin) / voxel).astype(int), 0)
        i1 = np.minimum(np.ceil((hi - origin) / voxel).astype(int) + 1, shape)
        if np.any(i1 <= i0):
            continue
        xs = origin[0] + voxel * np.arange(i0[0], i1[0])
        ys = origin[1] + voxel * np.arange(i0[1], i1[1])
        zs = origin[2] + voxel * np.arange(i0[2], i1[2])
        px = xs[:, None, None] - a[e, 0]
        py = ys[None, :, None] - a[e, 1]
        pz = zs[None, None, :] - a[e, 2]
        ab = b[e] - a[e]
        denom = float(ab @ ab)
        if denom > 0.0:
            t = np.clip((px * ab[0] + py * ab[1] + pz * ab[2]) / denom, 0.0, 1.0)
        else:
            t = np.zeros(np.broadcast_shapes(px.shape, py.shape, pz.shape))
        qx = px - t * ab[0]
        qy = py - t * ab[1]
        qz = pz - t * ab[2]
        d = np.sqrt(qx * qx + qy * qy + qz * qz) - (ra[e] + t * (rb[e] - ra[e]))
        view = field[i0[0]:i1[0], i0[1]:i1[1], i0[2]:i1[2]]
        np.minimum(view, d, out=view)
    return field


def min_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each row of ``a`` the squared distance to its nearest row of ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty(a.shape[0])
    step = max(1, 4_000_000 // max(1, b.shape[0]))
    for s in range(0, a.shape[0], step):
        diff = a[s:s + step, None, :] - b[None, :, :]
        out[s:s + step] = np.einsum("ijk,ijk->ij", diff, diff).min(axis=1)
    return out


def _lse_rows(m: np.ndarray) -> np.ndarray:
    mx = m.max(axis=1)
    return mx + np.log(np.exp(m - mx[:, None]).sum(axis=1))


def sinkhorn_log(cost, log_a, log_b, eps: float, max_iter: int, tol: float, g_init=None):
    """Log-domain Sinkhorn iterations, optionally warm-started from ``g_init``.

    Returns dual potentials (f, g), the number of iterations run, and the L1
    violation of the row marginal at exit (column marginals are exact after
    each g update).
    """
    cost = np.asarray(cost, dtype=np.float64)
    log_a = np.asarray(log_a, dtype=np.float64)
    log_b = np.asarray(log_b, dtype=np.float64)
    a = np.exp(log_a)
    f = np.zeros(cost.shape[0])
    g = np.zeros(cost.shape[1]) if g_init is None else np.array(g_init, dtype=np.float64)
    err = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        f = -eps * _lse_rows((g[None, :] - cost) / eps + log_b[None, :])
        g = -eps * _lse_rows(((f[:, None] - cost) / eps + log_a[:, None]).T)
        logp = (f[:, None] + g[None, :] - cost) / eps + log_a[:, None] + log_b[None, :]
        err = float(np.abs(np.exp(logp).sum(axis=1) - a).sum())
        if err < tol:
            break
    return f, g, it, err


def tql_eigenvalues(d, e, max_sweeps: int = 60) -> np.ndarray:
    """Eigenvalues of a symmetric tridiagonal matrix by implicit QL.

    ``d`` is the diagonal, ``e`` the sub-diagonal (length n-1). Raises
    ArithmeticError when an eigenvalue needs more than ``max_sweeps`` sweeps.
    """
    d = [float(x) for x in d]
    n = len(d)
    e = [float(x) for x in e] + [0.0]
    for l in range(n):
        it = 0
        while True:
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) <= 1e-15 * dd:
                    break
                m += 1
            if m == l:
                break
            it += 1
            if it > max_sweeps:
                raise ArithmeticError(f"QL iteration did not converge for eigenvalue {l}")
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = math.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + math.copysign(r, g))
            s = c = 1.0
            p = 0.0
            i = m - 1
            underflow = False
            while i >= l:
                f = s * e[i]
                b = c * e[i]
                r = math.hypot(f, g)
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
    return np.sort(np.array(d))
