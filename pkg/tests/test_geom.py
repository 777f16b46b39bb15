import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from casfusion import geom

coords = st.floats(-10, 10, allow_nan=False, width=32)


def clouds(min_n=1, max_n=40):
    return hnp.arrays(np.float64, st.tuples(st.integers(min_n, max_n), st.just(3)), elements=coords)


def fps_greedy_ok(p, idx):
    """Each pick maximises the min distance to earlier picks, lowest index on ties."""
    for j in range(1, len(idx)):
        d = np.min([[np.sum((a - b) ** 2) for b in p[idx[:j]]] for a in p], axis=1)
        best = d.max()
        if d[idx[j]] != best or idx[j] != np.flatnonzero(d == best)[0]:
            return False
    return True


def knn_oracle(q, r, n):
    out = []
    for a in q:
        d = [(float(np.sum((a - b) ** 2)), j) for j, b in enumerate(r)]
        out.append([j for _, j in sorted(d)[:n]])
    return np.array(out)


def chamfer_oracle(a, b, mode):
    def directed(x, y):
        total = 0.0
        for u in x:
            best = min(float(np.sum((u - v) ** 2)) for v in y)
            total += np.sqrt(best) if mode == "L1" else best
        return total / len(x)

    return directed(a, b) + directed(b, a)


# -- farthest point sampling ----------------------------------------------------

def test_fps_full_is_permutation():
    p = np.random.default_rng(0).random((25, 3))
    assert sorted(geom.farthest_point_sample(p, 25)) == list(range(25))


def test_fps_picks_far_endpoint():
    p = np.array([[0.0, 0, 0], [1, 0, 0], [10, 0, 0]])
    assert sorted(geom.farthest_point_sample(p, 2, seed=0)) == [0, 2]


def test_fps_greedy_property_200_points():
    p = np.random.default_rng(1).random((200, 3))
    idx = geom.farthest_point_sample(p, 50, seed=7)
    assert len(set(idx.tolist())) == 50
    assert fps_greedy_ok(p, idx)


def test_fps_rejects_oversized_request():
    with pytest.raises(ValueError):
        geom.farthest_point_sample(np.zeros((3, 3)), 4)


@settings(max_examples=30, deadline=None)
@given(clouds(3, 20), st.integers(0, 1000), st.data())
def test_fps_ignores_duplicates(p, seed, data):
    p = np.unique(p, axis=0)
    assume(len(p) >= 2)
    start = seed % len(p)
    dup = data.draw(st.lists(st.integers(0, len(p) - 1).filter(lambda i: i != start), max_size=5))
    q = np.vstack([p, p[dup]]) if dup else p
    m = data.draw(st.integers(1, len(p)))
    a = geom.farthest_point_sample(p, m, seed=seed)
    b = geom.farthest_point_sample(q, m, seed=start)
    assert np.array_equal(p[a], q[b])


# -- knn and grouping ----------------------------------------------------------

def test_knn_self_query():
    p = np.random.default_rng(2).random((12, 3))
    assert geom.knn(p, p, 1)[:, 0].tolist() == list(range(12))


def test_knn_line_example():
    ref = np.array([[1.0, 0, 0], [2, 0, 0], [3, 0, 0]])
    assert geom.knn(np.zeros((1, 3)), ref, 2).tolist() == [[0, 1]]


def test_knn_matches_exhaustive_sort():
    rng = np.random.default_rng(3)
    q, r = rng.random((15, 3)), rng.random((30, 3))
    assert np.array_equal(geom.knn(q, r, 5), knn_oracle(q, r, 5))


def test_knn_ties_prefer_lower_index():
    ref = np.array([[1.0, 0, 0], [-1, 0, 0], [0, 1, 0], [0, 0, 2]])
    assert geom.knn(np.zeros((1, 3)), ref, 3).tolist() == [[0, 1, 2]]


@settings(max_examples=40, deadline=None)
@given(clouds(1, 15), clouds(1, 30), st.integers(1, 8))
def test_knn_rows_nondecreasing(q, r, n):
    n = min(n, len(r))
    idx = geom.knn(q, r, n)
    d = np.sum((q[:, None, :] - r[idx]) ** 2, axis=2)
    assert np.all(np.diff(d, axis=1) >= 0)
    assert np.array_equal(idx, knn_oracle(q, r, n))


def test_group_local_first_entry_is_origin():
    p = np.random.default_rng(4).random((20, 3))
    g = geom.group_local(p, [0, 5, 9], 4)
    assert g.shape == (3, 4, 3)
    assert np.all(g[:, 0] == 0)


def test_group_local_translation_invariant():
    p = np.random.default_rng(5).random((20, 3))
    a = geom.group_local(p, [1, 2], 5)
    b = geom.group_local(p + np.array([0.25, -0.5, 2.0]), [1, 2], 5)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_group_local_matches_subtraction():
    p = np.random.default_rng(6).random((10, 3))
    g = geom.group_local(p, [3, 7], 3)
    nbr = knn_oracle(p[[3, 7]], p, 3)
    assert np.array_equal(g, p[nbr] - p[[3, 7]][:, None, :])


# -- chamfer ------------------------------------------------------------------------

def test_chamfer_self_is_zero_with_identity_map():
    p = np.random.default_rng(7).random((30, 3))
    value, corr = geom.chamfer(p, p)
    assert value == 0.0
    assert corr.a_to_b.tolist() == list(range(30)) == corr.b_to_a.tolist()


def test_chamfer_singletons():
    a, b = np.zeros((1, 3)), np.array([[2.0, 0, 0]])
    assert geom.chamfer(a, b, "L1")[0] == 4.0
    assert geom.chamfer(a, b, "L2")[0] == 8.0


@pytest.mark.parametrize("mode", ["L1", "L2"])
def test_chamfer_matches_double_loop(mode):
    rng = np.random.default_rng(8)
    a, b = rng.random((30, 3)), rng.random((40, 3))
    assert abs(geom.chamfer(a, b, mode)[0] - chamfer_oracle(a, b, mode)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(clouds(), clouds(), st.sampled_from(["L1", "L2"]),
       hnp.arrays(np.float64, 3, elements=st.integers(-8, 8).map(float)))
def test_chamfer_symmetric_and_translation_invariant(a, b, mode, shift):
    v = geom.chamfer(a, b, mode)[0]
    assert v == pytest.approx(geom.chamfer(b, a, mode)[0], abs=1e-12)
    assert geom.chamfer(a + shift, b + shift, mode)[0] == pytest.approx(v, rel=1e-9, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(clouds(1, 20), st.data())
def test_chamfer_zero_iff_same_set(a, data):
    order = data.draw(st.permutations(range(len(a))))
    extra = data.draw(st.lists(st.integers(0, len(a) - 1), max_size=4))
    b = np.vstack([a[list(order)], a[extra]]) if extra else a[list(order)]
    assert geom.chamfer(a, b)[0] == 0.0
    c = b.copy()
    c[0, 0] += 0.5
    assert geom.chamfer(a, c)[0] > 0.0


def test_correspondence_lowest_index_on_ties():
    a = np.zeros((1, 3))
    b = np.array([[1.0, 0, 0], [-1, 0, 0]])
    corr = geom.correspondence(a, b)
    assert corr.a_to_b.tolist() == [0]
    corr = geom.correspondence(b, np.vstack([a, a]))
    assert corr.b_to_a.tolist() == [0, 0]


# -- visibility -----------------------------------------------------------------------

def raycast_visible(p, view, radius):
    out = []
    for i, x in enumerate(p):
        seg = x - view
        ok = True
        for j, y in enumerate(p):
            if j == i:
                continue
            t = np.clip(np.dot(y - view, seg) / np.dot(seg, seg), 0, 1)
            if t < 1 and np.linalg.norm(view + t * seg - y) < radius:
                ok = False
                break
        out.append(ok)
    return np.flatnonzero(out)


def test_hpr_cube_top_face():
    corners = np.array([[x, y, z] for x in (0.0, 1.0) for y in (0.0, 1.0) for z in (0.0, 1.0)])
    view = np.array([0.5, 0.5, 5.0])
    vis = set(geom.hpr_visible(corners, view).indices.tolist())
    top = {i for i, c in enumerate(corners) if c[2] == 1.0}
    assert top <= set(raycast_visible(corners, view, 0.01).tolist())
    assert top <= vis


def test_hpr_single_point():
    assert geom.hpr_visible(np.array([[1.0, 2, 3]]), np.zeros(3)).indices.tolist() == [0]


def test_hpr_sphere_hemisphere():
    rng = np.random.default_rng(9)
    p = rng.standard_normal((400, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    view = np.array([0.0, 0.0, 100.0])
    vis = set(geom.hpr_visible(p, view, radius_factor=1e5).indices.tolist())
    facing = np.flatnonzero(p @ (view / 100.0) > 0.05)
    assert set(facing.tolist()) <= vis


def test_hpr_moderate_radius_hides_back_side():
    rng = np.random.default_rng(9)
    p = rng.standard_normal((400, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    vis = geom.hpr_visible(p, np.array([0.0, 0.0, 10.0]), radius_factor=10).indices
    assert np.all(p[vis, 2] > -0.1)
    assert np.all(np.isin(np.flatnonzero(p[:, 2] > 0.15), vis))


def test_hpr_degenerate_plane_falls_back():
    p = np.random.default_rng(10).random((20, 3))
    p[:, 2] = 0.0
    with pytest.warns(UserWarning):
        v = geom.hpr_visible(p, np.array([0.5, 0.5, 0.0]))
    assert v.degenerate and len(v.indices) == 20


# -- downsampling ---------------------------------------------------------------------

def test_uniform_downsample_full_is_permutation():
    p = np.random.default_rng(11).random((30, 3))
    labels = np.arange(30)
    q, l = geom.uniform_downsample(p, labels, 30, seed=1)
    assert sorted(l.tolist()) == list(range(30))
    assert np.array_equal(q, p[l])


def test_uniform_downsample_seeded():
    p = np.random.default_rng(12).random((50, 3))
    a = geom.uniform_downsample(p, np.arange(50), 20, seed=5)
    b = geom.uniform_downsample(p, np.arange(50), 20, seed=5)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_uniform_downsample_preserves_class_mix():
    rng = np.random.default_rng(13)
    labels = rng.choice(4, size=10_000, p=[0.4, 0.3, 0.2, 0.1])
    _, l = geom.uniform_downsample(rng.random((10_000, 3)), labels, 5_000, seed=2)
    src = np.bincount(labels, minlength=4) / len(labels)
    got = np.bincount(l, minlength=4) / len(l)
    assert np.all(np.abs(got - src) / src < 0.05)


def test_uniform_downsample_padding():
    p = np.random.default_rng(14).random((10, 3))
    with pytest.raises(ValueError):
        geom.uniform_downsample(p, np.arange(10), 15, seed=0)
    q, l = geom.uniform_downsample(p, np.arange(10), 15, seed=0, replace_excess=True)
    assert len(q) == 15 and set(l.tolist()) == set(range(10))
