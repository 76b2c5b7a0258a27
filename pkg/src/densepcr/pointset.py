"""Point-set distances and geometric utilities.

Clouds are ``[n x 3]`` float arrays (or :class:`~densepcr.tensor.Tensor` for
the differentiable distances).  Chamfer uses squared Euclidean terms, EMD
unsquared ones, and both sum rather than average over points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .tensor import Tensor, record

EMD_EXACT_CAP = 512
BALL_CAP = 16
# pair count above which nearest-neighbour search goes through a k-d tree
_KDTREE_PAIRS = 1 << 16
_CHUNK_PAIRS = 1 << 22


class EMDConvergenceError(RuntimeError):
    """The auction solver hit its round cap; ``best_cost`` is a feasible upper bound."""

    def __init__(self, message: str, best_cost: float, mapping: np.ndarray):
        super().__init__(message)
        self.best_cost = best_cost
        self.mapping = mapping


@dataclass
class Assignment:
    mapping: np.ndarray  # mapping[i] = index in target matched to source point i
    cost: float


def _points(pc, name: str) -> np.ndarray:
    arr = pc.data if isinstance(pc, Tensor) else np.asarray(pc, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must be an [n x 3] cloud, got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError(f"{name} is empty")
    return arr


def _as_leaf(pc) -> Tensor:
    return pc if isinstance(pc, Tensor) else Tensor(pc)


def _nan_loss(ta: Tensor, tb: Tensor) -> Tensor:
    """A non-finite cloud gives a NaN loss (so training can flag divergence) instead of a solver error."""
    return record(np.array(np.nan), (ta, tb),
                  lambda g: (np.full(ta.shape, np.nan), np.full(tb.shape, np.nan)))


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared distances, summed per axis in x, y, z order."""
    out = None
    for k in range(3):
        d = a[:, k, None] - b[None, :, k]
        d *= d
        out = d if out is None else out + d
    return out


def _sq_rows(d: np.ndarray) -> np.ndarray:
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]


def nearest(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For each row of ``a``: index of the nearest row of ``b`` and the squared distance."""
    n, m = len(a), len(b)
    if n * m > _KDTREE_PAIRS:
        _, idx = cKDTree(b).query(a, k=1)
        idx = np.asarray(idx, dtype=np.intp)
        return idx, _sq_rows(a - b[idx])
    idx = np.empty(n, dtype=np.intp)
    step = max(1, _CHUNK_PAIRS // m)
    for s in range(0, n, step):
        idx[s:s + step] = np.argmin(sq_dists(a[s:s + step], b), axis=1)
    return idx, _sq_rows(a - b[idx])


def chamfer(a, b) -> Tensor:
    """Bidirectional sum of squared nearest-neighbour distances.

    Differentiable in both clouds with the correspondences fixed at forward
    time.  The two directed sums use ``math.fsum``, so the value does not depend
    on row order.
    """
    A, B = _points(a, "a"), _points(b, "b")
    ta, tb = _as_leaf(a), _as_leaf(b)
    if not (np.isfinite(A).all() and np.isfinite(B).all()):
        return _nan_loss(ta, tb)
    nn_ab, d_ab = nearest(A, B)
    nn_ba, d_ba = nearest(B, A)
    value = math.fsum(d_ab) + math.fsum(d_ba)

    def bw(g):
        g = float(g)
        r_ab = A - B[nn_ab]  # a_i - b_nn(i)
        r_ba = B - A[nn_ba]  # b_j - a_nn(j)
        ga = 2.0 * r_ab
        np.add.at(ga, nn_ba, -2.0 * r_ba)
        gb = 2.0 * r_ba
        np.add.at(gb, nn_ab, -2.0 * r_ab)
        return ga * g, gb * g

    return record(np.array(value), (ta, tb), bw)


def _check_pair(A: np.ndarray, B: np.ndarray) -> None:
    if len(A) != len(B):
        raise ValueError(f"EMD needs a bijection: cardinalities differ ({len(A)} vs {len(B)})")


def _euclid(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.sqrt(sq_dists(A, B))


def _matched_cost(A: np.ndarray, B: np.ndarray, mapping: np.ndarray) -> float:
    return math.fsum(np.sqrt(_sq_rows(A - B[mapping])))


def emd_exact(a, b, cap: int = EMD_EXACT_CAP) -> tuple[float, Assignment]:
    """Optimal bijection under Euclidean costs (Hungarian-type solver)."""
    A, B = _points(a, "a"), _points(b, "b")
    _check_pair(A, B)
    if len(A) > cap:
        raise ValueError(f"emd_exact is capped at {cap} points (got {len(A)}); use emd_approx")
    rows, cols = linear_sum_assignment(_euclid(A, B))
    mapping = np.empty(len(A), dtype=np.intp)
    mapping[rows] = cols
    cost = _matched_cost(A, B, mapping)
    return cost, Assignment(mapping, cost)


@numba.njit(cache=True)
def _auction(cost, eps_start, eps_final, scale_step, max_bids):
    # Gauss-Seidel forward auction on benefit = -cost; FIFO queue of free people.
    n = cost.shape[0]
    prices = np.zeros(n)
    person_obj = np.full(n, -1, np.int64)
    obj_person = np.full(n, -1, np.int64)
    queue = np.empty(n, np.int64)
    eps = eps_start
    bids = 0
    while True:
        for i in range(n):
            person_obj[i] = -1
            obj_person[i] = -1
            queue[i] = i
        head = 0
        size = n
        while size > 0:
            p = queue[head % n]
            head += 1
            size -= 1
            best = -1
            v1 = -np.inf
            v2 = -np.inf
            for j in range(n):
                v = -cost[p, j] - prices[j]
                if v > v1:
                    v2 = v1
                    v1 = v
                    best = j
                elif v > v2:
                    v2 = v
            prices[best] += v1 - v2 + eps
            prev = obj_person[best]
            obj_person[best] = p
            person_obj[p] = best
            if prev >= 0:
                person_obj[prev] = -1
                queue[(head + size) % n] = prev
                size += 1
            bids += 1
            if bids > max_bids:
                return person_obj, obj_person, False
        if eps <= eps_final:
            return person_obj, obj_person, True
        eps = max(eps / scale_step, eps_final)


def auction_assign(cost: np.ndarray, eps: float = 0.01, max_bids: int = 2_000_000_000,
                   scale_step: float = 5.0) -> np.ndarray:
    """Min-cost perfect matching by forward auction with epsilon scaling.

    The last phase runs at ``eps * LB / n`` slackness, LB being a lower bound on
    the optimum, so the matching costs at most ``(1 + eps)`` times optimal.
    Raises :class:`EMDConvergenceError` once ``max_bids`` bids are spent.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if n == 1:
        return np.zeros(1, dtype=np.intp)
    top = float(cost.max())
    if top == 0.0:
        return np.arange(n)
    lower = max(cost.min(axis=1).sum(), cost.min(axis=0).sum())
    eps_final = eps * lower / n
    if eps_final <= 0.0:
        eps_final = 1e-12 * top
    person_obj, obj_person, ok = _auction(cost, max(top / scale_step, eps_final), eps_final,
                                          scale_step, max_bids)
    if not ok:
        mapping = _complete(person_obj, obj_person)
        raise EMDConvergenceError(f"auction did not converge within {max_bids} bids",
                                  float("nan"), mapping)
    return person_obj.astype(np.intp)


def _complete(person_obj: np.ndarray, obj_person: np.ndarray) -> np.ndarray:
    mapping = person_obj.astype(np.intp)
    mapping[mapping < 0] = np.flatnonzero(obj_person < 0)
    return mapping


def emd_approx(a, b, eps: float = 0.01, max_bids: int = 2_000_000_000) -> tuple[Tensor, Assignment]:
    """Auction-based EMD with cost at most ``(1 + eps)`` times the optimum.

    Differentiable in both clouds with the assignment frozen at forward time.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    A, B = _points(a, "a"), _points(b, "b")
    _check_pair(A, B)
    ta, tb = _as_leaf(a), _as_leaf(b)
    if not (np.isfinite(A).all() and np.isfinite(B).all()):
        mapping = np.arange(len(A))
        return _nan_loss(ta, tb), Assignment(mapping, float("nan"))
    try:
        mapping = auction_assign(_euclid(A, B), eps=eps, max_bids=max_bids)
    except EMDConvergenceError as exc:
        exc.best_cost = _matched_cost(A, B, exc.mapping)
        raise
    cost = _matched_cost(A, B, mapping)

    def bw(g):
        diff = A - B[mapping]
        norm = np.sqrt(_sq_rows(diff))
        safe = np.where(norm > 0, norm, 1.0)
        unit = np.where(norm[:, None] > 0, diff / safe[:, None], 0.0) * float(g)
        gb = np.zeros_like(B)
        gb[mapping] = -unit
        return unit, gb

    return record(np.array(cost), (ta, tb), bw), Assignment(mapping, cost)


def farthest_point_sample(pc, k: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subset of ``k`` indices, beginning at ``start``."""
    P = _points(pc, "pc")
    n = len(P)
    if not 1 <= k <= n:
        raise ValueError(f"cannot pick {k} points from a cloud of {n}")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range for {n} points")
    picked = np.empty(k, dtype=np.intp)
    picked[0] = start
    mind = _sq_rows(P - P[start])
    mind[start] = -1.0
    for i in range(1, k):
        nxt = int(np.argmax(mind))
        picked[i] = nxt
        np.minimum(mind, _sq_rows(P - P[nxt]), out=mind)
        mind[nxt] = -1.0
    return picked


def coverage_radius(pc, subset: np.ndarray) -> float:
    """Largest distance from any point of ``pc`` to its nearest point in ``subset``."""
    P = _points(pc, "pc")
    _, d = nearest(P, P[np.asarray(subset)])
    return float(np.sqrt(d.max()))


def ball_query(pc, center_idx: int, radius: float, cap: int = BALL_CAP) -> np.ndarray:
    """Indices within ``radius`` of a point, nearest first, self always first."""
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if cap < 1:
        raise ValueError(f"cap must be >= 1, got {cap}")
    P = _points(pc, "pc")
    d = _sq_rows(P - P[center_idx])
    d[center_idx] = -1.0
    inside = np.flatnonzero(d <= radius * radius)
    order = inside[np.argsort(d[inside], kind="stable")]
    return order[:cap]


def ball_query_all(pc, radius: float, cap: int = BALL_CAP) -> tuple[np.ndarray, np.ndarray]:
    """:func:`ball_query` for every point at once.

    Returns an ``[n x cap]`` index table whose unused slots repeat the centre
    index, plus the number of genuine neighbours per row.  Candidates come from
    a k-d tree; membership and order use the same distance formula as
    :func:`ball_query`.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if cap < 1:
        raise ValueError(f"cap must be >= 1, got {cap}")
    P = _points(pc, "pc")
    n = len(P)
    lists = cKDTree(P).query_ball_point(P, radius * (1.0 + 1e-9) + 1e-300)
    lens = np.fromiter((len(c) for c in lists), dtype=np.intp, count=n)
    rows = np.repeat(np.arange(n), lens)
    cols = np.concatenate(lists).astype(np.intp) if n else np.empty(0, np.intp)
    d = _sq_rows(P[rows] - P[cols])
    d[rows == cols] = -1.0
    keep = d <= radius * radius
    rows, cols, d = rows[keep], cols[keep], d[keep]
    order = np.lexsort((cols, d, rows))
    rows, cols = rows[order], cols[order]
    starts = np.searchsorted(rows, np.arange(n))
    rank = np.arange(len(rows)) - starts[rows]
    sel = rank < cap
    table = np.repeat(np.arange(n)[:, None], cap, axis=1)
    table[rows[sel], rank[sel]] = cols[sel]
    counts = np.minimum(np.bincount(rows, minlength=n), cap)
    return table, counts


def normalize_unit_bbox(pc) -> tuple[np.ndarray, float, np.ndarray]:
    """Centre the bounding box at the origin and scale its longest edge to 1.

    Returns ``(normalized, scale, offset)`` with
    ``normalized = (pc - offset) * scale``.
    """
    P = _points(pc, "pc")
    lo, hi = P.min(axis=0), P.max(axis=0)
    extent = float((hi - lo).max())
    if not extent > 0:
        raise ValueError("cannot normalize a cloud with zero extent")
    offset = (lo + hi) / 2.0
    scale = 1.0 / extent
    return (P - offset) * scale, scale, offset


def denormalize(pc: np.ndarray, scale: float, offset: np.ndarray) -> np.ndarray:
    return np.asarray(pc) / scale + offset


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    v = vertices[triangles]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def sample_mesh_surface(mesh, count: int, seed=0, oversample: int = 4) -> np.ndarray:
    """Area-uniform surface samples, thinned to ``count`` by farthest-point sampling.

    ``oversample * count`` raw samples are drawn first; ``oversample=1`` skips
    the FPS pass and returns the raw draw.
    """
    vertices = np.asarray(mesh.vertices, dtype=np.float64)
    triangles = np.asarray(mesh.triangles, dtype=np.intp)
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if len(triangles) == 0:
        raise ValueError("mesh has no triangles")
    areas = triangle_areas(vertices, triangles)
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    pool = count * oversample
    tri = rng.choice(len(triangles), size=pool, p=areas / total)
    r1 = np.sqrt(rng.random(pool))
    r2 = rng.random(pool)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    v = vertices[triangles[tri]]
    pts = np.einsum("pk,pkd->pd", bary, v)
    if oversample == 1:
        return pts
    return pts[farthest_point_sample(pts, count)]
