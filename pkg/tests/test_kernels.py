import numpy as np
import pytest
from scipy import ndimage

from vesselgen import kernels


def simple_oracle(cube):
    c = np.asarray(cube, bool).reshape(3, 3, 3).copy()
    fg = c.copy()
    fg[1, 1, 1] = False
    _, n_fg = ndimage.label(fg, structure=np.ones((3, 3, 3)))
    offs = np.indices((3, 3, 3)) - 1
    manhattan = np.abs(offs).sum(axis=0)
    bg = ~c & (manhattan >= 1) & (manhattan <= 2)
    lab, _ = ndimage.label(bg, structure=ndimage.generate_binary_structure(3, 1))
    faces = lab[manhattan == 1]
    n_bg = len(set(faces[faces > 0].tolist()))
    return n_fg == 1 and n_bg == 1


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")
    assert "python" in kernels.backends()


def test_is_simple_point_matches_oracle(kernel_impl):
    rng = np.random.default_rng(0)
    for _ in range(400):
        cube = (rng.random(27) < rng.uniform(0.2, 0.8)).astype(np.uint8)
        cube[13] = 1
        assert kernel_impl.is_simple_point(cube) == simple_oracle(cube)


def test_is_simple_point_examples(kernel_impl):
    line = np.zeros((3, 3, 3), np.uint8)
    line[:, 1, 1] = 1
    assert not kernel_impl.is_simple_point(line.ravel())  # removing it cuts the line
    end = np.zeros((3, 3, 3), np.uint8)
    end[1:, 1, 1] = 1
    assert kernel_impl.is_simple_point(end.ravel())
    full = np.ones(27, np.uint8)
    assert not kernel_impl.is_simple_point(full)  # interior point would open a cavity


def test_thinning_backends_agree():
    impls = kernels.backends()
    x, y, z = np.mgrid[:24, :24, :24]
    vol = (((y - 12) ** 2 + (z - 12) ** 2 <= 16) | ((x - 12) ** 2 + (z - 12) ** 2 <= 9)).astype(np.uint8)
    vol = np.ascontiguousarray(np.pad(vol, 1))
    outs = {}
    for name, k in impls.items():
        w = vol.copy()
        while sum(k.thin_subiteration(w, *d) for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                                        (0, -1, 0), (0, 0, 1), (0, 0, -1))):
            pass
        outs[name] = w
    ref = outs["python"]
    assert 0 < ref.sum() < vol.sum()
    for w in outs.values():
        assert np.array_equal(w, ref)


def test_capsule_field_matches_brute_force(kernel_impl):
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 3))
    b = a + rng.normal(size=(3, 3))
    ra = rng.uniform(0.3, 0.6, 3)
    rb = rng.uniform(0.3, 0.6, 3)
    origin = np.array([-3.0, -3.0, -3.0])
    voxel = 0.25
    shape = (25, 25, 25)
    f = kernel_impl.capsule_field(origin, voxel, shape, a, b, ra, rb, 10.0)
    g = origin + voxel * np.stack(np.meshgrid(*[np.arange(s) for s in shape], indexing="ij"), -1)
    best = np.full(shape, np.inf)
    for e in range(3):
        ab = b[e] - a[e]
        t = np.clip(((g - a[e]) @ ab) / (ab @ ab), 0, 1)
        d = np.linalg.norm(g - a[e] - t[..., None] * ab, axis=-1) - (ra[e] + t * (rb[e] - ra[e]))
        best = np.minimum(best, d)
    assert np.abs(f - best).max() < 1e-12


def test_min_sqdist_brute_force(kernel_impl):
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(37, 3)), rng.normal(size=(23, 3))
    brute = np.array([min(((p - q) ** 2).sum() for q in b) for p in a])
    assert np.abs(kernel_impl.min_sqdist(a, b) - brute).max() < 1e-14


def test_sinkhorn_marginals(kernel_impl):
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(12, 3)), rng.normal(size=(9, 3))
    cost = np.linalg.norm(x[:, None] - y[None], axis=-1)
    la, lb = np.full(12, -np.log(12)), np.full(9, -np.log(9))
    f, g, it, err = kernel_impl.sinkhorn_log(cost, la, lb, 0.1, 2000, 1e-12)
    plan = np.exp((f[:, None] + g[None] - cost) / 0.1 + la[:, None] + lb[None])
    assert err < 1e-12
    assert np.allclose(plan.sum(1), 1 / 12, atol=1e-12)
    assert np.allclose(plan.sum(0), 1 / 9, atol=1e-12)


def test_sinkhorn_backends_agree():
    rng = np.random.default_rng(4)
    cost = rng.random((15, 15))
    lw = np.full(15, -np.log(15))
    res = [k.sinkhorn_log(cost, lw, lw, 0.05, 300, 1e-10) for k in kernels.backends().values()]
    for r in res[1:]:
        assert np.allclose(r[0], res[0][0], atol=1e-12) and r[2] == res[0][2]


@pytest.mark.parametrize("n", [1, 2, 5, 40])
def test_tql_matches_dense_solver(kernel_impl, n):
    rng = np.random.default_rng(n)
    d, e = rng.normal(size=n), rng.normal(size=max(n - 1, 0))
    m = np.diag(d) + np.diag(e, 1) + np.diag(e, -1)
    got = np.sort(kernel_impl.tql_eigenvalues(d, e))
    assert np.abs(got - np.linalg.eigvalsh(m)).max() < 1e-10
