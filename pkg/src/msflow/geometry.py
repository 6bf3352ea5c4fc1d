"""Geometry-aware downsampling and upsampling of point clouds.

A cloud is an ``(N, 3)`` float array. Downsampling merges the points into
``N / D`` clusters of exactly ``D`` members each (equal-size K-means seeded
by farthest point sampling); the coarse cloud holds the cluster centers and
the fine cloud is the input reordered so that rows ``D*m .. D*(m+1)-1`` are
the members of cluster ``m``. Upsampling replicates each coarse point ``D``
times, which is the exact right inverse of that layout.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from ._validation import as_generator, check_cloud, check_positive_int

__all__ = [
    "HierarchyPair",
    "Hierarchy",
    "lexicographic_start",
    "farthest_point_sample",
    "balanced_assign",
    "clustering_objective",
    "downsample",
    "random_pair_downsample",
    "upsample_replicate",
    "build_hierarchy",
    "check_pair",
]


@dataclass
class HierarchyPair:
    """Aligned coarse/fine clouds.

    ``coarse[m]`` is the mean of ``fine[ratio*m : ratio*(m+1)]`` and
    ``fine == source[order]`` for the cloud that was downsampled.
    """

    coarse: np.ndarray
    fine: np.ndarray
    ratio: int
    order: np.ndarray = None
    history: list = field(default_factory=list)


@dataclass
class Hierarchy:
    """``levels[k]`` holds the cloud at resolution ``N / ratio**k``.

    ``source_index`` maps rows of ``levels[0]`` back to the input cloud.
    """

    levels: list
    ratio: int
    source_index: np.ndarray = None

    @property
    def n_stages(self):
        return len(self.levels) - 1

    def pair(self, k):
        if not 0 <= k < self.n_stages:
            raise ValueError(f"stage {k} out of range for {self.n_stages} stages")
        return HierarchyPair(self.levels[k + 1], self.levels[k], self.ratio)


def lexicographic_start(cloud):
    """Index of the lexicographically smallest (x, y, z) row, lowest index on ties."""
    cloud = np.asarray(cloud)
    # lexsort uses the last key as primary and is stable
    return int(np.lexsort(cloud.T[::-1])[0])


def farthest_point_sample(cloud, m, start=None):
    """Select ``m`` indices by iterative max-min Euclidean distance.

    The first index is ``start`` (default: :func:`lexicographic_start`).
    Ties are broken by the lowest index.
    """
    cloud = check_cloud(cloud)
    n = len(cloud)
    m = check_positive_int(m, "m")
    if m > n:
        raise ValueError(f"cannot sample {m} points from a cloud of {n}")
    if start is None:
        start = lexicographic_start(cloud)
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range for {n} points")

    selected = np.empty(m, dtype=np.intp)
    selected[0] = start
    min_d2 = np.sum((cloud - cloud[start]) ** 2, axis=1)
    for i in range(1, m):
        # argmax returns the first maximum, which is the lowest-index tie-break
        nxt = int(np.argmax(min_d2))
        selected[i] = nxt
        np.minimum(min_d2, np.sum((cloud - cloud[nxt]) ** 2, axis=1), out=min_d2)
    return selected


def _sq_dists(points, centers):
    d2 = (
        np.sum(points**2, axis=1)[:, None]
        + np.sum(centers**2, axis=1)[None, :]
        - 2.0 * points @ centers.T
    )
    return np.maximum(d2, 0.0)


def _assign_greedy(d2, ratio):
    n, m = d2.shape
    order = np.argsort(d2, axis=None, kind="stable").tolist()
    labels = [-1] * n
    capacity = [ratio] * m
    remaining = n
    for flat in order:
        p, c = divmod(flat, m)
        if labels[p] < 0 and capacity[c] > 0:
            labels[p] = c
            capacity[c] -= 1
            remaining -= 1
            if remaining == 0:
                break
    return np.asarray(labels, dtype=np.intp)


def _assign_exact(d2, ratio):
    cost = np.repeat(d2, ratio, axis=1)
    rows, cols = linear_sum_assignment(cost)
    labels = np.empty(d2.shape[0], dtype=np.intp)
    labels[rows] = cols // ratio
    return labels


def balanced_assign(points, centers, ratio, method="exact"):
    """Assign every point to a center so that each center receives ``ratio`` points.

    ``method="exact"`` solves the min-cost assignment of points to
    ``ratio`` replicated copies of each center. ``method="greedy"`` scans
    all (point, center) pairs by ascending squared distance and takes a pair
    whenever the point is free and the center still has capacity.
    """
    points = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if len(points) != len(centers) * ratio:
        raise ValueError(
            f"{len(points)} points cannot fill {len(centers)} clusters of size {ratio}"
        )
    d2 = _sq_dists(points, centers)
    if method == "exact":
        return _assign_exact(d2, ratio)
    if method == "greedy":
        return _assign_greedy(d2, ratio)
    raise ValueError(f"unknown assignment method {method!r}")


def _cluster_means(points, labels, n_clusters, ratio):
    sums = np.zeros((n_clusters, points.shape[1]))
    np.add.at(sums, labels, points)
    return sums / ratio


def clustering_objective(points, labels, centers):
    """Sum of squared distances of points to their assigned centers."""
    return float(np.sum((points - centers[labels]) ** 2))


def _swap_refine(points, labels, ratio, n_clusters, max_passes):
    # Swap two points in different clusters when that lowers the SSE. The
    # gain accounts for both centers moving. Within a pass only swaps on
    # pairwise disjoint clusters are applied, so each gain stays exact.
    n = len(points)
    centers = _cluster_means(points, labels, n_clusters, ratio)
    pair_d2 = _sq_dists(points, points)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    history = []
    for _ in range(max_passes):
        a = _sq_dists(points, centers)[:, labels]
        diag = np.diag(a)
        delta = a + a.T - diag[:, None] - diag[None, :] - 2.0 * pair_d2 / ratio
        tol = 1e-12 * (1.0 + float(diag.sum()))
        candidates = upper & (delta < -tol) & (labels[:, None] != labels[None, :])
        flat = np.flatnonzero(candidates)
        if flat.size == 0:
            break
        flat = flat[np.argsort(delta.ravel()[flat], kind="stable")]
        touched = np.zeros(n_clusters, dtype=bool)
        for f in flat.tolist():
            i, j = divmod(f, n)
            ci, cj = labels[i], labels[j]
            if touched[ci] or touched[cj]:
                continue
            touched[ci] = touched[cj] = True
            labels[i], labels[j] = cj, ci
        centers = _cluster_means(points, labels, n_clusters, ratio)
        history.append(clustering_objective(points, labels, centers))
    return labels, centers, history


def _lloyd(points, ratio, start, max_iter, method, refine):
    n_clusters = len(points) // ratio
    centers = points[farthest_point_sample(points, n_clusters, start)]
    labels = balanced_assign(points, centers, ratio, method)
    centers = _cluster_means(points, labels, n_clusters, ratio)
    history = [clustering_objective(points, labels, centers)]
    for _ in range(max_iter - 1):
        new = balanced_assign(points, centers, ratio, method)
        if np.array_equal(new, labels):
            break
        # greedy assignment is not optimal for fixed centers; keep the
        # objective monotone by refusing a worse assignment
        if clustering_objective(points, new, centers) >= clustering_objective(points, labels, centers):
            break
        labels = new
        centers = _cluster_means(points, labels, n_clusters, ratio)
        history.append(clustering_objective(points, labels, centers))
    if refine:
        labels, centers, extra = _swap_refine(points, labels, ratio, n_clusters, max_passes=max(4 * max_iter, 50))
        history.extend(extra)
    return labels, centers, history


def downsample(cloud, ratio, max_iter=25, *, n_init=4, method="exact", refine=True):
    """Equal-size K-means downsampling.

    Parameters
    ----------
    cloud : array of shape (N, 3)
    ratio : int
        Cluster size ``D``; ``N`` must be divisible by it.
    max_iter : int
        Maximum number of assignment/update rounds per initialization.
    n_init : int
        Number of deterministic restarts. Restart ``i`` seeds farthest point
        sampling at the ``i``-th lexicographically smallest point, so the
        result does not depend on the row order of ``cloud``.
    method : {"exact", "greedy"}
        Balanced assignment step, see :func:`balanced_assign`.
    refine : bool
        Finish with pairwise swap moves between clusters.

    Returns
    -------
    HierarchyPair
        ``coarse`` holds the ``N / D`` cluster means in farthest-point
        order, ``fine`` the input rows grouped by cluster (members in input
        order), ``history`` the objective after each round of the best run.
    """
    cloud = check_cloud(cloud)
    ratio = check_positive_int(ratio, "ratio", minimum=2)
    max_iter = check_positive_int(max_iter, "max_iter")
    n_init = check_positive_int(n_init, "n_init")
    n = len(cloud)
    if n % ratio:
        raise ValueError(f"number of points {n} is not divisible by ratio {ratio}")

    starts = np.lexsort(cloud.T[::-1])[: min(n_init, n)]
    best = None
    for start in starts:
        labels, centers, history = _lloyd(cloud, ratio, int(start), max_iter, method, refine)
        if best is None or history[-1] < best[2][-1]:
            best = (labels, centers, history)
    labels, centers, history = best

    # stable sort keeps members in input order within each cluster
    order = np.argsort(labels, kind="stable")
    fine = cloud[order]
    coarse = fine.reshape(-1, ratio, 3).mean(axis=1)
    return HierarchyPair(coarse=coarse, fine=fine, ratio=ratio, order=order, history=history)


def random_pair_downsample(cloud, ratio, rng=None):
    """Ablation baseline: random permutation, then average consecutive groups of ``ratio``."""
    cloud = check_cloud(cloud)
    ratio = check_positive_int(ratio, "ratio", minimum=2)
    if len(cloud) % ratio:
        raise ValueError(f"number of points {len(cloud)} is not divisible by ratio {ratio}")
    order = as_generator(rng).permutation(len(cloud))
    fine = cloud[order]
    return HierarchyPair(
        coarse=fine.reshape(-1, ratio, 3).mean(axis=1), fine=fine, ratio=ratio, order=order
    )


def upsample_replicate(coarse, ratio):
    """Repeat every point ``ratio`` times; works on (M, 3) and (B, M, 3) arrays."""
    coarse = np.asarray(coarse)
    ratio = check_positive_int(ratio, "ratio")
    return np.repeat(coarse, ratio, axis=-2)


def build_hierarchy(cloud, ratio, n_stages, max_iter=25, *, downsampler=None, **kwargs):
    """Downsample ``n_stages`` times and keep every level cluster-contiguous.

    Each downsampling reorders the level it consumes; that permutation is
    pushed down to all finer levels as a permutation of their blocks, so
    ``levels[k]`` rows ``D*m .. D*(m+1)-1`` always belong to
    ``levels[k+1][m]``.

    ``downsampler(cloud, ratio)`` may replace :func:`downsample`, e.g. to run
    the random-pair ablation.
    """
    cloud = check_cloud(cloud)
    ratio = check_positive_int(ratio, "ratio", minimum=2)
    if isinstance(n_stages, bool) or not isinstance(n_stages, (int, np.integer)) or n_stages < 0:
        raise ValueError(f"n_stages must be a non-negative integer, got {n_stages!r}")
    n = len(cloud)
    if n % ratio**n_stages:
        raise ValueError(f"number of points {n} is not divisible by {ratio}**{n_stages}")
    if downsampler is None:
        def downsampler(x, d):
            return downsample(x, d, max_iter, **kwargs)

    levels = [cloud.copy()]
    source_index = np.arange(n)
    for j in range(n_stages):
        pair = downsampler(levels[j], ratio)
        perm = pair.order
        levels[j] = pair.fine
        for i in range(j):
            group = ratio ** (j - i)
            levels[i] = levels[i].reshape(-1, group, 3)[perm].reshape(-1, 3)
        source_index = source_index.reshape(-1, ratio**j)[perm].reshape(-1)
        levels.append(pair.coarse)
    return Hierarchy(levels=levels, ratio=ratio, source_index=source_index)


def check_pair(coarse, fine, ratio, atol=1e-6):
    """Raise ``ValueError`` unless ``coarse[m]`` is the mean of its ``ratio`` fine rows."""
    coarse = np.asarray(coarse)
    fine = np.asarray(fine)
    if fine.shape[-2] != coarse.shape[-2] * ratio:
        raise ValueError(
            f"fine level has {fine.shape[-2]} rows, expected {coarse.shape[-2]} * {ratio}"
        )
    means = fine.reshape(*fine.shape[:-2], -1, ratio, 3).mean(axis=-2)
    err = float(np.max(np.abs(means - coarse))) if coarse.size else 0.0
    if err > atol:
        raise ValueError(f"coarse points differ from fine cluster means by {err:.3g}")
