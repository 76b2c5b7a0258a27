import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from densepcr import oracles
from densepcr import tensor as T
from densepcr.data import TriangleMesh, generate_shape
from densepcr.pointset import (EMDConvergenceError, auction_assign, ball_query, ball_query_all, chamfer,
                               coverage_radius, denormalize, emd_approx, emd_exact,
                               farthest_point_sample, normalize_unit_bbox, sample_mesh_surface)

clouds = arrays(np.float64, st.tuples(st.integers(1, 20), st.just(3)),
                elements=st.floats(-5, 5, allow_nan=False, width=32))


def test_chamfer_examples(rng):
    a = rng.normal(size=(10, 3))
    assert chamfer(a, a).item() == 0.0
    assert chamfer([[0, 0, 0]], [[1, 0, 0]]).item() == 2.0
    assert chamfer([[0, 0, 0], [2, 0, 0]], [[1, 0, 0]]).item() == 3.0
    a, b = rng.normal(size=(64, 3)), rng.normal(size=(64, 3))
    ref = oracles.chamfer_bruteforce(a, b)
    assert abs(chamfer(a, b).item() - ref) <= 1e-12 * ref


def test_chamfer_rejects_empty():
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), np.zeros((2, 3)))


def test_chamfer_large_uses_same_values(rng):
    # above the k-d tree threshold the value must still match the brute-force oracle
    a, b = rng.normal(size=(300, 3)), rng.normal(size=(400, 3))
    ref = oracles.chamfer_bruteforce(a, b)
    assert abs(chamfer(a, b).item() - ref) <= 1e-12 * ref


@settings(max_examples=60, deadline=None)
@given(clouds, clouds, st.randoms(use_true_random=False))
def test_chamfer_symmetric_and_permutation_invariant(a, b, r):
    base = chamfer(a, b).item()
    assert chamfer(b, a).item() == base
    pa = a[r.sample(range(len(a)), len(a))]
    pb = b[r.sample(range(len(b)), len(b))]
    assert chamfer(pa, pb).item() == base


def test_chamfer_gradient_single_point(rng):
    a, b = rng.normal(size=(8, 3)), rng.normal(size=(11, 3))
    ta = T.Tensor(a, requires_grad=True)
    with T.tape():
        T.backward(chamfer(ta, b))
    for i in range(3):
        num = oracles.numeric_grad(lambda: chamfer(ta.data, b).item(), ta.data, (2, i))
        assert abs(num - ta.grad[2, i]) < 1e-6 * max(1, abs(num))


def test_emd_exact_examples(rng):
    a = rng.normal(size=(7, 3))
    cost, asg = emd_exact(a, a)
    assert cost == 0.0 and asg.mapping.tolist() == list(range(7))
    assert emd_exact(a, a[rng.permutation(7)])[0] == 0.0
    cost, asg = emd_exact([[0, 0, 0], [0, 1, 0]], [[0, 0, 0], [1, 0, 0]])
    assert cost == pytest.approx(math.sqrt(2), abs=1e-12) and asg.mapping.tolist() == [0, 1]
    for n in range(1, 9):
        a, b = rng.random((n, 3)), rng.random((n, 3))
        assert abs(emd_exact(a, b)[0] - oracles.emd_enumerate(a, b)) < 1e-12


def test_emd_exact_errors():
    with pytest.raises(ValueError, match="cardinal|equal|size"):
        emd_exact(np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError, match="emd_approx"):
        emd_exact(np.zeros((513, 3)), np.zeros((513, 3)))


def test_assignment_invariants(rng):
    a, b = rng.random((40, 3)), rng.random((40, 3))
    for cost, asg in (emd_exact(a, b), (emd_approx(a, b)[0].item(), emd_approx(a, b)[1])):
        assert sorted(asg.mapping.tolist()) == list(range(40))
        assert asg.cost == pytest.approx(math.fsum(np.linalg.norm(a - b[asg.mapping], axis=1)), rel=1e-12)
        assert cost == pytest.approx(asg.cost, rel=1e-12)


@pytest.mark.parametrize("n", [1, 2, 16, 64, 256])
def test_emd_approx_bracketed_by_exact(n, rng):
    a, b = rng.random((n, 3)), rng.random((n, 3))
    exact, _ = emd_exact(a, b)
    approx = emd_approx(a, b, eps=0.01)[0].item()
    assert exact - 1e-9 <= approx <= 1.01 * exact + 1e-12


def test_emd_approx_identity_and_symmetry(rng):
    a, b = rng.random((50, 3)), rng.random((50, 3))
    assert emd_approx(a, a)[0].item() == 0.0
    ab, ba, ex = emd_approx(a, b)[0].item(), emd_approx(b, a)[0].item(), emd_exact(a, b)[0]
    assert abs(ab - ba) <= 0.01 * ex
    assert abs(emd_exact(a, b)[0] - emd_exact(b, a)[0]) < 1e-9


def test_emd_approx_errors(rng):
    with pytest.raises(ValueError):
        emd_approx(np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        emd_approx(np.zeros((2, 3)), np.zeros((2, 3)), eps=0.0)
    a, b = rng.random((64, 3)), rng.random((64, 3))
    with pytest.raises(EMDConvergenceError) as info:
        emd_approx(a, b, max_bids=10)
    assert info.value.best_cost >= emd_exact(a, b)[0] - 1e-9


def test_auction_on_cost_matrix(rng):
    cost = rng.random((30, 30))
    mapping = auction_assign(cost, eps=1e-6)
    from scipy.optimize import linear_sum_assignment

    r, c = linear_sum_assignment(cost)
    assert cost[np.arange(30), mapping].sum() == pytest.approx(cost[r, c].sum(), rel=1e-5)


def test_fps_examples(rng):
    line = np.stack([np.arange(10.0), np.zeros(10), np.zeros(10)], axis=1)
    assert farthest_point_sample(line, 2).tolist() == [0, 9]
    assert farthest_point_sample(line, 3).tolist() == [0, 9, 4]
    assert oracles.fps_bruteforce(line, 3) == [0, 9, 4]
    pts = rng.random((12, 3))
    assert sorted(farthest_point_sample(pts, 12).tolist()) == list(range(12))
    assert farthest_point_sample(pts, 5, start=3)[0] == 3
    with pytest.raises(ValueError):
        farthest_point_sample(pts, 13)


def test_fps_handles_duplicates():
    pts = np.array([[0.0, 0, 0]] * 3 + [[1.0, 0, 0]])
    assert sorted(farthest_point_sample(pts, 4).tolist()) == [0, 1, 2, 3]


def test_fps_coverage_is_monotone(rng):
    pts = rng.random((200, 3))
    order = farthest_point_sample(pts, 200)
    radii = [coverage_radius(pts, order[:k]) for k in range(1, 200, 7)]
    assert all(x >= y for x, y in zip(radii, radii[1:]))


def test_ball_query_examples(rng):
    pts = rng.random((20, 3))
    assert sorted(ball_query(pts, 4, radius=10.0, cap=32).tolist()) == list(range(20))
    iso = np.vstack([pts, [[50.0, 50, 50]]])
    assert ball_query(iso, 20, radius=0.5).tolist() == [20]
    grid = np.array([[x, y, z] for x in range(3) for y in range(3) for z in range(3)], dtype=float)
    got = ball_query(grid, 0, radius=1.0, cap=4)
    assert got[0] == 0 and sorted(got[1:].tolist()) == [1, 3, 9]
    d = np.linalg.norm(grid[got] - grid[0], axis=1)
    assert np.all(np.diff(d) >= 0)


def test_ball_query_cap_keeps_nearest_lowest_index_ties():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [0.5, 0, 0]])
    assert ball_query(pts, 0, radius=1.0, cap=3).tolist() == [0, 4, 1]


def test_ball_query_all_matches_single(rng):
    pts = np.round(rng.random((120, 3)) * 8) / 8  # many exact ties
    table, counts = ball_query_all(pts, 0.25, cap=6)
    for i in range(len(pts)):
        single = ball_query(pts, i, 0.25, cap=6)
        assert counts[i] == len(single)
        assert table[i, :counts[i]].tolist() == single.tolist()
        assert np.all(table[i, counts[i]:] == i)


def test_normalize_unit_bbox(rng):
    pc = np.array([[0.0, 0, 0], [2, 1, 1]])
    out, scale, _ = normalize_unit_bbox(pc)
    assert scale == 0.5 and (out.max(0) - out.min(0)).max() == 1.0
    out, scale, offset = normalize_unit_bbox(np.array([[-0.5, -0.2, -0.3], [0.5, 0.2, 0.3]]))
    assert scale == 1.0 and np.all(offset == 0)
    pc = rng.normal(size=(30, 3)) * 3 + 7
    out, scale, offset = normalize_unit_bbox(pc)
    np.testing.assert_allclose(denormalize(out, scale, offset), pc, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        normalize_unit_bbox(np.ones((4, 3)))


def test_sample_single_triangle_is_inside():
    tri = TriangleMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))
    pts = sample_mesh_surface(tri, 500, seed=3)
    assert np.all(pts[:, 0] >= 0) and np.all(pts[:, 1] >= 0)
    assert np.all(pts[:, 0] + pts[:, 1] <= 1 + 1e-12) and np.all(pts[:, 2] == 0)


def test_sample_cube_faces_are_area_uniform():
    cube = generate_shape("box", dict(sx=1.0, sy=1.0, sz=1.0))
    pts = sample_mesh_surface(cube, 60_000, seed=0, oversample=1)
    face = np.argmax(np.abs(pts), axis=1) * 2 + (pts[np.arange(len(pts)), np.argmax(np.abs(pts), axis=1)] > 0)
    frac = np.bincount(face, minlength=6) / len(pts)
    assert np.all(np.abs(frac - 1 / 6) <= 0.01)


def test_sample_is_deterministic_and_validates():
    cube = generate_shape("box", dict(sx=1.0, sy=1.0, sz=1.0))
    assert np.array_equal(sample_mesh_surface(cube, 64, seed=9), sample_mesh_surface(cube, 64, seed=9))
    flat = TriangleMesh.__new__(TriangleMesh)
    flat.vertices, flat.triangles = np.zeros((3, 3)), np.array([[0, 1, 2]])
    with pytest.raises(ValueError):
        sample_mesh_surface(flat, 10)
