"""Voxel-seeded clustering of Gaussians by position and feature affinity.

One seed is drawn per non-empty voxel, then clusters grow outwards over
a k-NN graph: every (cluster, point) candidate is ranked by the joint
feature/position metric to the cluster seed, and each point joins the
first (cheapest) claim it receives. Optional extra iterations re-seed
each cluster at its medoid and regrow.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud_io import GaussianCloud, bbox
from .features import FeatureSet

KNN_K = 12


@dataclass
class VoxelGrid:
    resolution: float
    origin: np.ndarray
    cells: dict  # (i, j, k) -> list of point indices


@dataclass
class Clustering:
    assignment: np.ndarray  # (n,) cluster id per point
    seeds: np.ndarray       # (K,) point index of each cluster's seed
    K: int


@dataclass
class ClusterSummary:
    centers: np.ndarray   # (K, 3) mean member position
    features: np.ndarray  # (K, dim) componentwise max over members


def voxelize(cloud: GaussianCloud, resolution) -> VoxelGrid:
    """Bin points into cubes of side `resolution`, origin at the bbox min."""
    if resolution <= 0:
        raise ValueError("voxel resolution must be positive")
    origin = bbox(cloud).min
    idx = np.floor((cloud.positions - origin) / resolution).astype(np.int64)
    cells = {}
    for i, key in enumerate(map(tuple, idx)):
        cells.setdefault(key, []).append(i)
    return VoxelGrid(resolution=float(resolution), origin=origin, cells=cells)


def select_seeds(grid: VoxelGrid, seed) -> np.ndarray:
    """One uniformly-drawn member per non-empty cell, in sorted cell order."""
    if not grid.cells:
        raise ValueError("empty voxel grid")
    rng = np.random.default_rng(seed)
    out = []
    for key in sorted(grid.cells):
        members = grid.cells[key]
        out.append(members[rng.integers(len(members))])
    return np.array(out, dtype=np.int64)


def metric_d(p_i, p_j, f_i, f_j, mu, resolution) -> float:
    """Joint distance: 1 - |cos(f_i, f_j)| + mu * ||p_i - p_j|| / R."""
    ni = np.linalg.norm(f_i)
    nj = np.linalg.norm(f_j)
    if ni == 0 or nj == 0:
        raise ValueError("zero-norm feature")
    cos = abs(float(np.dot(f_i, f_j))) / (ni * nj)
    return 1.0 - cos + mu * float(np.linalg.norm(np.asarray(p_i) - np.asarray(p_j))) / resolution


def _metric_to_point(positions, feats, feat_norms, ref, mu, resolution):
    """metric_d from point `ref` to every point, vectorized."""
    f = feats[ref]
    nf = feat_norms[ref]
    cos = np.abs(feats @ f) / (feat_norms * nf)
    dist = np.linalg.norm(positions - positions[ref], axis=1)
    return 1.0 - cos + mu * dist / resolution


def knn_graph(positions, k=KNN_K):
    """Symmetric k-NN adjacency lists (sorted, deduplicated)."""
    n = len(positions)
    k = min(k, n - 1)
    if k <= 0:
        return [[] for _ in range(n)]
    tree = cKDTree(positions)
    _, nbr = tree.query(positions, k=k + 1)
    nbr = np.atleast_2d(nbr)
    adj = [set() for _ in range(n)]
    for i in range(n):
        for j in nbr[i]:
            if j != i and j < n:
                adj[i].add(int(j))
                adj[int(j)].add(i)
    return [sorted(s) for s in adj]


def cluster(
    cloud: GaussianCloud,
    features: FeatureSet,
    resolution,
    mu,
    iterations: int = 1,
    seed: int = 0,
    knn_k: int = KNN_K,
) -> Clustering:
    """Grow one cluster per non-empty voxel; ties go to the lower cluster id.

    Points unreachable from every seed in the k-NN graph fall back to the
    globally cheapest seed, so the assignment is always total.
    """
    n = len(cloud)
    if n == 0:
        raise ValueError("empty cloud")
    if len(features) != n:
        raise ValueError("features not aligned with cloud")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")

    positions = cloud.positions
    feats = features.vectors
    feat_norms = np.linalg.norm(feats, axis=1)
    if np.any(feat_norms == 0):
        raise ValueError("zero-norm feature")

    grid = voxelize(cloud, resolution)
    seeds = select_seeds(grid, seed)
    adj = knn_graph(positions, knn_k)

    def grow(seed_idx):
        assignment = np.full(n, -1, dtype=np.int64)
        # seed-to-everything metric rows, reused for claims and fallback
        seed_rows = [
            _metric_to_point(positions, feats, feat_norms, s, mu, resolution)
            for s in seed_idx
        ]
        heap = []
        pushed = set()

        def push_neighbors(k_id, point):
            for nb in adj[point]:
                if assignment[nb] < 0 and (k_id, nb) not in pushed:
                    pushed.add((k_id, nb))
                    heapq.heappush(heap, (seed_rows[k_id][nb], k_id, nb))

        for k_id, s in enumerate(seed_idx):
            assignment[s] = k_id  # a seed always claims itself first
        for k_id, s in enumerate(seed_idx):
            push_neighbors(k_id, s)
        while heap:
            _, k_id, point = heapq.heappop(heap)
            if assignment[point] >= 0:
                continue
            assignment[point] = k_id
            push_neighbors(k_id, point)

        orphan = np.flatnonzero(assignment < 0)
        if len(orphan):
            costs = np.stack([row[orphan] for row in seed_rows])  # (K, |orphan|)
            assignment[orphan] = np.argmin(costs, axis=0)
        return assignment

    assignment = grow(seeds)
    for _ in range(iterations - 1):
        seeds = _medoids(positions, feats, feat_norms, assignment, seeds, mu, resolution)
        assignment = grow(seeds)
    return Clustering(assignment=assignment, seeds=seeds, K=len(seeds))


def _medoids(positions, feats, feat_norms, assignment, seeds, mu, resolution):
    """Per cluster, the member minimizing summed metric to all members."""
    new_seeds = seeds.copy()
    for k_id in range(len(seeds)):
        members = np.flatnonzero(assignment == k_id)
        if len(members) <= 1:
            new_seeds[k_id] = members[0] if len(members) else seeds[k_id]
            continue
        p = positions[members]
        f = feats[members]
        nf = feat_norms[members]
        cos = np.abs(f @ f.T) / np.outer(nf, nf)
        dist = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=2)
        totals = (1.0 - cos + mu * dist / resolution).sum(axis=1)
        new_seeds[k_id] = members[int(np.argmin(totals))]
    return new_seeds


def clustering_objective(cloud, features, clustering, mu, resolution) -> float:
    """Sum over points of metric_d(point, its cluster seed)."""
    feats = features.vectors
    norms = np.linalg.norm(feats, axis=1)
    total = 0.0
    for k_id, s in enumerate(clustering.seeds):
        members = np.flatnonzero(clustering.assignment == k_id)
        row = _metric_to_point(cloud.positions, feats, norms, s, mu, resolution)
        total += float(row[members].sum())
    return total


def cluster_summary(cloud: GaussianCloud, features: FeatureSet,
                    clustering: Clustering) -> ClusterSummary:
    """Mean position and max-pooled feature per cluster.

    Max pooling is permutation invariant, so the summary does not depend
    on member order.
    """
    k = clustering.K
    dim = features.dim
    centers = np.zeros((k, 3))
    pooled = np.zeros((k, dim))
    for k_id in range(k):
        members = np.flatnonzero(clustering.assignment == k_id)
        if len(members) == 0:
            raise ValueError(f"cluster {k_id} is empty")
        centers[k_id] = cloud.positions[members].mean(axis=0)
        pooled[k_id] = features.vectors[members].max(axis=0)
    return ClusterSummary(centers=centers, features=pooled)


def save_clustering(clustering: Clustering, path) -> None:
    """Cache format: u32 N, u32 K, then N u32 labels."""
    with open(path, "wb") as f:
        f.write(struct.pack("<II", len(clustering.assignment), clustering.K))
        f.write(clustering.assignment.astype("<u4").tobytes())


def load_clustering(path) -> Clustering:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8:
        raise ValueError("clustering cache too short")
    n, k = struct.unpack_from("<II", data, 0)
    if len(data) != 8 + 4 * n:
        raise ValueError("clustering cache size mismatch")
    labels = np.frombuffer(data, dtype="<u4", count=n, offset=8).astype(np.int64)
    if n and (labels.max() >= k or len(np.unique(labels)) != k):
        raise ValueError("clustering cache labels inconsistent with K")
    return Clustering(assignment=labels, seeds=np.full(k, -1, dtype=np.int64), K=k)
