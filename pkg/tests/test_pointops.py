import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rangevit import _kernels
from rangevit.autodiff import Tensor
from rangevit.gradcheck import check_gradients
from rangevit.autodiff import ops
from rangevit.pointops import (
    KernelDisposition,
    kpconv,
    knn_postprocess,
    radius_neighbors,
)
from rangevit.projection import PointCloud, SensorFov, spherical_project


def brute_neighbors(coords, queries, radius, cap):
    """O(N*Q) scan, nearest first, ties by index."""
    out = []
    for q in queries:
        d2 = ((coords - q) ** 2).sum(axis=1)
        hits = [(d2[i], i) for i in range(len(coords)) if d2[i] <= radius * radius]
        hits.sort()
        out.append(np.array([i for _, i in hits[:cap]], dtype=np.int64))
    return out


def test_self_inclusion_and_separation():
    pts = np.array([[0.0, 0, 0], [3.0, 0, 0]])
    nb = radius_neighbors(pts, pts, 1.0)
    assert [list(x) for x in nb.lists()] == [[0], [1]]
    nb = radius_neighbors(pts, pts[:1], 1e-9)
    assert 0 in nb.lists()[0]


def test_radius_neighbors_rejects_bad_input():
    with pytest.raises(ValueError):
        radius_neighbors(np.zeros((2, 3)), np.zeros((1, 3)), 0.0)
    with pytest.raises(ValueError, match="not finite"):
        radius_neighbors(np.array([[np.inf, 0, 0]]), np.zeros((1, 3)), 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_radius_neighbors_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(-5, 5, (500, 3))
    queries = np.vstack([coords[:100], rng.uniform(-6, 6, (50, 3))])
    nb = radius_neighbors(coords, queries, 1.2, 32)
    expect = brute_neighbors(coords, queries, 1.2, 32)
    for got, exp in zip(nb.lists(), expect):
        assert np.array_equal(got, exp)


def test_truncation_keeps_nearest():
    rng = np.random.default_rng(9)
    coords = rng.uniform(-0.3, 0.3, (200, 3))
    nb = radius_neighbors(coords, np.zeros((1, 3)), 1.0, 8)
    d = np.linalg.norm(coords, axis=1)
    assert np.array_equal(nb.lists()[0], np.argsort(d, kind="stable")[:8])


def dense_kpconv_oracle(feats, coords, weights, kernel, neighbors):
    n, d_in = feats.shape
    k, _, d_out = weights.shape
    out = np.zeros((n, d_out))
    for q in range(n):
        for nidx in neighbors.lists()[q]:
            y = coords[nidx] - coords[q]
            for kk in range(k):
                h = max(0.0, 1.0 - math.dist(y, kernel.kernel_points[kk]) / kernel.sigma)
                if h:
                    out[q] += h * (feats[nidx] @ weights[kk])
    return out


def random_kp_problem(rng, n=50, d_in=4, d_out=3, spread=2.0):
    coords = rng.uniform(-spread, spread, (n, 3))
    feats = rng.standard_normal((n, d_in))
    kernel = KernelDisposition.default()
    weights = rng.standard_normal((kernel.size, d_in, d_out))
    nb = radius_neighbors(coords, coords, kernel.sigma, 32)
    return coords, feats, weights, kernel, nb


def run_kpconv(coords, feats, weights, kernel, nb):
    h = kernel.influences(coords, nb)
    return kpconv(Tensor(feats), Tensor(weights), nb, h).data


def test_kernel_disposition_invariants():
    k = KernelDisposition.default()
    assert k.size == 15
    assert np.all(k.kernel_points[0] == 0)
    assert np.all(np.linalg.norm(k.kernel_points, axis=1) <= k.sigma)
    assert np.array_equal(k.kernel_points, KernelDisposition.default().kernel_points)


def test_kpconv_single_point_center_weight():
    rng = np.random.default_rng(10)
    f = rng.standard_normal((1, 4))
    w = rng.standard_normal((15, 4, 4))
    coords = np.zeros((1, 3))
    # disposition with every non-center point at distance sigma: only W_0 contributes
    far = KernelDisposition.default()
    pts = far.kernel_points.copy()
    pts[1:] *= far.sigma / np.linalg.norm(pts[1:], axis=1, keepdims=True)
    far = KernelDisposition(pts, far.sigma)
    nb = radius_neighbors(coords, coords, far.sigma)
    out = kpconv(Tensor(f), Tensor(w), nb, far.influences(coords, nb)).data
    np.testing.assert_allclose(out, f @ w[0], atol=1e-12)
    # default disposition: shell points sit at 0.6 sigma, so each weighs 0.4
    k = KernelDisposition.default()
    out = kpconv(Tensor(f), Tensor(w), nb, k.influences(coords, nb)).data
    np.testing.assert_allclose(out, f @ w[0] + 0.4 * f @ w[1:].sum(axis=0), atol=1e-12)


def test_kpconv_zero_features_and_linearity_and_translation():
    rng = np.random.default_rng(11)
    coords, feats, weights, kernel, nb = random_kp_problem(rng)
    assert np.all(run_kpconv(coords, np.zeros_like(feats), weights, kernel, nb) == 0)
    base = run_kpconv(coords, feats, weights, kernel, nb)
    np.testing.assert_allclose(run_kpconv(coords, 2.5 * feats, weights, kernel, nb), 2.5 * base, atol=1e-6)
    shift = coords + np.array([3.0, -7.0, 1.5])
    nb2 = radius_neighbors(shift, shift, kernel.sigma, 32)
    np.testing.assert_allclose(run_kpconv(shift, feats, weights, kernel, nb2), base, atol=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_kpconv_matches_dense_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    coords, feats, weights, kernel, nb = random_kp_problem(rng)
    np.testing.assert_allclose(
        run_kpconv(coords, feats, weights, kernel, nb),
        dense_kpconv_oracle(feats, coords, weights, kernel, nb),
        atol=1e-5,
    )


def test_kpconv_gradient():
    rng = np.random.default_rng(12)
    coords, feats, weights, kernel, nb = random_kp_problem(rng, n=20)
    f = Tensor(feats, requires_grad=True, dtype=np.float64)
    w = Tensor(weights, requires_grad=True, dtype=np.float64)
    h = kernel.influences(coords, nb)
    probe = Tensor(rng.standard_normal((20, 3)))
    rep = check_gradients(lambda: ops.sum(ops.mul(kpconv(f, w, nb, h), probe)), {"f": f, "w": w})
    assert rep.passed(1e-4), rep


# -- K-NN post-processing ---------------------------------------------------


def knn_scene(rng, n=200, h=8, w=32, num_classes=4):
    xyz = rng.uniform(-20, 20, (n, 3))
    xyz[:, 2] = rng.uniform(-3, 1, n)
    cloud = PointCloud(np.column_stack([xyz, np.zeros(n)]).astype(np.float32))
    img = spherical_project(cloud, SensorFov(10, -30), h, w)
    labels = rng.integers(1, num_classes + 1, (h, w))
    return cloud, img, labels


def brute_knn(pixel_labels, img, point_range, k, window, sigma):
    """Full sort over the window, no early exit."""
    h, w = pixel_labels.shape
    half = window // 2
    out = np.empty(len(point_range), dtype=np.int64)
    rc = img.integer_pixels()
    for i, (r, c) in enumerate(rc):
        cands = []
        pos = 0
        for a in range(-half, half + 1):
            for b in range(-half, half + 1):
                rr, cc = r + a, c + b
                if 0 <= rr < h and 0 <= cc < w and img.occupancy[rr, cc]:
                    d = abs(point_range[i] - float(img.features[0, rr, cc]))
                    cands.append((d, pos, int(pixel_labels[rr, cc])))
                pos += 1
        if not cands:
            out[i] = pixel_labels[r, c]
            continue
        cands.sort()
        votes = {}
        for d, _, lab in cands[:k]:
            votes[lab] = votes.get(lab, 0.0) + math.exp(-d * d / (2 * sigma * sigma))
        top = max(votes.values())
        out[i] = min(lab for lab, v in votes.items() if v >= top * (1 - 1e-9))
    return out


def test_knn_unanimous_and_k1():
    rng = np.random.default_rng(13)
    cloud, img, labels = knn_scene(rng)
    r = cloud.ranges()
    assert np.all(knn_postprocess(np.full_like(labels, 3), img, r) == 3)
    got = knn_postprocess(labels, img, r, k=1)
    np.testing.assert_array_equal(got, brute_knn(labels, img, r, 1, 5, 1.0))


@pytest.mark.parametrize("seed", range(4))
def test_knn_matches_brute_force(seed):
    rng = np.random.default_rng(200 + seed)
    cloud, img, labels = knn_scene(rng)
    r = cloud.ranges()
    got = knn_postprocess(labels, img, r, k=5, window=5, sigma=1.0)
    np.testing.assert_array_equal(got, brute_knn(labels, img, r, 5, 5, 1.0))


def test_knn_labels_come_from_window():
    rng = np.random.default_rng(14)
    cloud, img, labels = knn_scene(rng, num_classes=9)
    got = knn_postprocess(labels, img, cloud.ranges(), k=3, window=3)
    rc = img.integer_pixels()
    for i, (r, c) in enumerate(rc):
        win = labels[max(r - 1, 0): r + 2, max(c - 1, 0): c + 2]
        assert got[i] in win or got[i] == labels[r, c]


def test_knn_argument_validation():
    rng = np.random.default_rng(15)
    cloud, img, labels = knn_scene(rng)
    with pytest.raises(ValueError):
        knn_postprocess(labels, img, cloud.ranges(), k=0)
    with pytest.raises(ValueError):
        knn_postprocess(labels, img, cloud.ranges(), window=4)


# -- both kernel paths agree ----------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(0, 300), cap=st.integers(1, 40))
def test_radius_kernels_agree(seed, n, cap):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(-3, 3, (n, 3))
    queries = rng.uniform(-3.5, 3.5, (30, 3))
    a = _kernels.radius_search_numpy(coords, queries, 0.9, cap)
    b = _kernels.radius_search_numba(coords, queries, 0.9, cap)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_knn_and_collision_kernels_agree(seed):
    rng = np.random.default_rng(seed)
    cloud, img, labels = knn_scene(rng, n=150)
    rc = img.integer_pixels()
    args = (rc[:, 0].copy(), rc[:, 1].copy(), cloud.ranges(), img.features[0].astype(np.float64),
            img.occupancy, labels, 4, 5, 1.0, int(labels.max()) + 1)
    assert np.array_equal(_kernels.knn_vote_numpy(*args), _kernels.knn_vote_numba(*args))
    pix = rng.integers(-1, 20, 300)
    rng_vals = rng.integers(1, 5, 300).astype(np.float64)  # many exact ties
    assert np.array_equal(
        _kernels.resolve_collisions_numpy(pix, rng_vals, 20),
        _kernels.resolve_collisions_numba(pix, rng_vals, 20),
    )


def test_knn_kernels_agree_on_flat_ground():
    """Ground pixels at near-equal ranges give votes equal up to exp rounding."""
    from rangevit.data_io import SceneSpec, generate_scene

    spec = SceneSpec(seed=1, beams=64, width=1875, fov=SensorFov(3.0, -25.0))
    cloud = generate_scene(spec)
    img = spherical_project(cloud, spec.fov, 64, 2048)
    for seed in range(3):
        labels = np.random.default_rng(seed).integers(1, 5, (64, 2048))
        rc = img.integer_pixels()
        args = (rc[:, 0].copy(), rc[:, 1].copy(), cloud.ranges(), img.features[0].astype(np.float64),
                img.occupancy, labels, 5, 5, 1.0, 5)
        assert np.array_equal(_kernels.knn_vote_numpy(*args), _kernels.knn_vote_numba(*args))


def test_scatter_kernels_agree():
    rng = np.random.default_rng(16)
    idx = rng.integers(-1, 10, 500)
    vals = rng.standard_normal((500, 3))
    a = _kernels.scatter_add_rows_numpy(np.zeros((10, 3)), idx, vals)
    b = _kernels.scatter_add_rows_numba(np.zeros((10, 3)), idx, vals)
    np.testing.assert_allclose(a, b, atol=1e-12)
