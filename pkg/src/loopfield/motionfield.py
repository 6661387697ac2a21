"""Two-stage velocity-field estimation and the refined query field.

Stage one moves each cluster toward its most similar peer (cosine
similarity of max-pooled features), giving sparse velocities at cluster
centers. Stage two densifies by ordinary Kriging under a fitted spherical
variogram, then a small MLP over positional-encoded positions is trained
on both supervision sets. The MLP is the field that gets queried during
animation; it is time-invariant by construction.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from . import neural
from .cloud_io import AABB

VARIOGRAM_BINS = 12
PE_FREQUENCIES = 6
HIDDEN_SIZES = (128, 64)


@dataclass
class SparseVelocityField:
    positions: np.ndarray   # (K, 3)
    velocities: np.ndarray  # (K, 3)

    def __len__(self):
        return len(self.positions)


@dataclass
class DenseVelocityField:
    positions: np.ndarray   # (N, 3)
    velocities: np.ndarray  # (N, 3)

    def __len__(self):
        return len(self.positions)


@dataclass
class SphericalVariogram:
    """gamma(d) = nugget + (sill - nugget) * (1.5 d/a - 0.5 (d/a)^3), capped
    at the sill beyond the range; gamma(0) = 0 by definition."""

    nugget: float
    sill: float
    range: float

    def __post_init__(self):
        if self.nugget < 0 or self.sill < self.nugget or self.range <= 0:
            raise ValueError("need 0 <= nugget <= sill and range > 0")

    def __call__(self, d):
        d = np.asarray(d, dtype=np.float64)
        x = np.minimum(d / self.range, 1.0)
        gamma = self.nugget + (self.sill - self.nugget) * (1.5 * x - 0.5 * x ** 3)
        return np.where(d > 0, gamma, 0.0)


def similarity_matrix(cluster_features) -> np.ndarray:
    """Pairwise cosine similarity; symmetric with unit diagonal."""
    f = np.asarray(cluster_features, dtype=np.float64)
    if len(f) < 2:
        raise ValueError("need at least two clusters")
    norms = np.linalg.norm(f, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm cluster feature")
    s = (f @ f.T) / np.outer(norms, norms)
    np.fill_diagonal(s, 1.0)
    return s


def sparse_velocity(centers, similarity) -> SparseVelocityField:
    """Velocity of each cluster = displacement to its most similar peer.

    Argmax excludes self; ties resolve to the lower cluster index.
    """
    centers = np.asarray(centers, dtype=np.float64)
    s = np.asarray(similarity, dtype=np.float64)
    k = len(centers)
    if k < 2:
        raise ValueError("need at least two clusters")
    masked = s.copy()
    np.fill_diagonal(masked, -np.inf)
    best = np.argmax(masked, axis=1)  # first occurrence wins ties
    velocities = centers[best] - centers
    return SparseVelocityField(positions=centers.copy(), velocities=velocities)


def empirical_variogram(positions, values, bins):
    """Binned semivariance: mean of 0.5 (v_i - v_j)^2 per distance bin.

    `values` may be (K,) or (K, m); multi-component semivariances are
    averaged, giving one shared curve. Returns (lags, gammas) with empty
    bins dropped; lags are the mean pair distance per bin.
    """
    positions = np.asarray(positions, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    k = len(positions)
    iu = np.triu_indices(k, 1)
    d = np.linalg.norm(positions[iu[0]] - positions[iu[1]], axis=1)
    g = 0.5 * np.mean((values[iu[0]] - values[iu[1]]) ** 2, axis=1)
    dmax = d.max()
    if dmax == 0:
        raise ValueError("all pairwise distances are zero")
    edges = np.linspace(0.0, dmax, bins + 1)
    which = np.clip(np.digitize(d, edges[1:-1]), 0, bins - 1)
    lags, gammas = [], []
    for b in range(bins):
        sel = which == b
        if np.any(sel):
            lags.append(d[sel].mean())
            gammas.append(g[sel].mean())
    return np.array(lags), np.array(gammas)


def _fit_linear_part(lags, gammas, a):
    """Best (nugget, sill) for a fixed range, non-negativity enforced."""
    x = np.minimum(lags / a, 1.0)
    phi = 1.5 * x - 0.5 * x ** 3
    # least squares for gamma ~ n + c * phi with n >= 0, c >= 0
    A = np.stack([np.ones_like(phi), phi], axis=1)
    sol, *_ = np.linalg.lstsq(A, gammas, rcond=None)
    n, c = sol
    candidates = [(max(n, 0.0), max(c, 0.0))]
    denom = float(phi @ phi)
    if denom > 0:
        candidates.append((0.0, max(float(phi @ gammas) / denom, 0.0)))
    candidates.append((max(float(gammas.mean()), 0.0), 0.0))
    best = None
    for n, c in candidates:
        resid = float(np.sum((n + c * phi - gammas) ** 2))
        if best is None or resid < best[0]:
            best = (resid, n, c)
    return best  # (residual, nugget, partial sill)


def fit_variogram(field: SparseVelocityField, component=None,
                  bins: int = VARIOGRAM_BINS) -> SphericalVariogram:
    """Fit (nugget, sill, range) to the empirical semivariogram.

    `component` picks one velocity axis; None averages the semivariance
    over all three, which is what the pipeline uses so that every axis is
    kriged under one shared model. The range is found by a coarse grid
    search plus golden-section refinement; for each candidate range the
    nugget/sill pair is solved in closed form. Fully deterministic.
    """
    if len(field) < 3:
        raise ValueError("need at least three samples to fit a variogram")
    if bins < 4:
        raise ValueError("need at least four bins")
    values = field.velocities if component is None else field.velocities[:, component]
    lags, gammas = empirical_variogram(field.positions, values, bins)

    if np.all(gammas == 0):
        # constant field: flat zero variogram (range value is irrelevant)
        return SphericalVariogram(nugget=0.0, sill=0.0, range=float(lags.max()))

    a_max = 2.0 * lags.max()
    grid = np.linspace(a_max / 128.0, a_max, 64)
    scored = [(_fit_linear_part(lags, gammas, a)[0], a) for a in grid]
    best_i = int(np.argmin([s for s, _ in scored]))

    lo = grid[max(best_i - 1, 0)]
    hi = grid[min(best_i + 1, len(grid) - 1)]
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - inv_phi * (hi - lo)
    x2 = lo + inv_phi * (hi - lo)
    f1 = _fit_linear_part(lags, gammas, x1)[0]
    f2 = _fit_linear_part(lags, gammas, x2)[0]
    for _ in range(60):
        if f1 < f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - inv_phi * (hi - lo)
            f1 = _fit_linear_part(lags, gammas, x1)[0]
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + inv_phi * (hi - lo)
            f2 = _fit_linear_part(lags, gammas, x2)[0]
    a = 0.5 * (lo + hi)
    _, nugget, partial = _fit_linear_part(lags, gammas, a)
    return SphericalVariogram(nugget=nugget, sill=nugget + partial, range=float(a))


def _deduplicate(positions, velocities):
    """Average velocities at exactly co-located sample positions."""
    _, inverse, counts = np.unique(
        positions, axis=0, return_inverse=True, return_counts=True
    )
    inverse = np.ravel(inverse)
    if np.all(counts == 1):
        return positions, velocities
    first = np.full(counts.shape[0], -1, dtype=np.int64)
    for i, g in enumerate(inverse):
        if first[g] < 0:
            first[g] = i
    order = np.argsort(first)  # keep first-occurrence order
    pos = np.zeros((len(counts), 3))
    vel = np.zeros((len(counts), 3))
    for rank, g in enumerate(order):
        sel = inverse == g
        pos[rank] = positions[sel][0]
        vel[rank] = velocities[sel].mean(axis=0)
    return pos, vel


def kriging_weights(sample_positions, query_positions, variogram):
    """Ordinary-Kriging weight matrix, one row of K weights per query.

    Solves the bordered system with a Lagrange multiplier so each row
    sums to one; the system matrix is factorized once for all queries.
    """
    samples = np.asarray(sample_positions, dtype=np.float64)
    queries = np.atleast_2d(np.asarray(query_positions, dtype=np.float64))
    k = len(samples)
    if k < 2:
        raise ValueError("need at least two samples")

    if variogram.sill == 0.0 and variogram.nugget == 0.0:
        # flat variogram: system is singular, any convex weights reproduce
        # the (necessarily constant) field; use uniform ones
        return np.full((len(queries), k), 1.0 / k)

    d = np.linalg.norm(samples[:, None, :] - samples[None, :, :], axis=2)
    a = np.zeros((k + 1, k + 1))
    a[:k, :k] = variogram(d)
    a[k, :k] = 1.0
    a[:k, k] = 1.0

    dq = np.linalg.norm(queries[:, None, :] - samples[None, :, :], axis=2)
    b = np.ones((k + 1, len(queries)))
    b[:k, :] = variogram(dq).T
    try:
        lu, piv = lu_factor(a)
        sol = lu_solve((lu, piv), b)
    except Exception:
        sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    return sol[:k, :].T


def krige(field: SparseVelocityField, query_positions,
          variogram: SphericalVariogram) -> DenseVelocityField:
    """Interpolate each velocity component at the query positions.

    Duplicate sample positions are averaged away first so the system
    stays non-singular; with a zero nugget the interpolation is exact at
    the remaining sample sites.
    """
    queries = np.atleast_2d(np.asarray(query_positions, dtype=np.float64))
    pos, vel = _deduplicate(field.positions, field.velocities)
    w = kriging_weights(pos, queries, variogram)
    return DenseVelocityField(positions=queries.copy(), velocities=w @ vel)


@dataclass
class MotionField:
    """Trained velocity field: query(p) = mlp(encode(normalize(p)))."""

    mlp: neural.Mlp
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    pe_frequencies: int = PE_FREQUENCIES

    def _normalize(self, p):
        h = self.bbox_max - self.bbox_min
        h = np.where(h == 0, 1.0, h)
        return 2.0 * (p - self.bbox_min) / h - 1.0


def query(field: MotionField, p) -> np.ndarray:
    """Velocity at one position or an (n, 3) batch; extrapolation allowed."""
    p = np.asarray(p, dtype=np.float64)
    encoded = neural.positional_encode(field._normalize(p), field.pe_frequencies)
    return neural.forward(field.mlp, encoded)


def train_field_mlp(
    sparse_field: SparseVelocityField,
    dense_field: DenseVelocityField,
    box: AABB,
    config: neural.TrainConfig | None = None,
    pe_frequencies: int = PE_FREQUENCIES,
    hidden_sizes=HIDDEN_SIZES,
):
    """Fit the refinement MLP on the union of both supervision sets.

    Returns (MotionField, TrainReport). Sparse and dense pairs are mixed
    unweighted; positions are normalized to the given bounding box before
    positional encoding.
    """
    positions = np.concatenate([sparse_field.positions, dense_field.positions])
    velocities = np.concatenate([sparse_field.velocities, dense_field.velocities])
    if len(positions) == 0:
        raise ValueError("empty supervision set")
    config = config or neural.TrainConfig()

    in_dim = 3 + 6 * pe_frequencies
    mlp = neural.mlp_new((in_dim, *hidden_sizes, 3), seed=config.seed)
    field = MotionField(mlp=mlp, bbox_min=box.min.copy(), bbox_max=box.max.copy(),
                        pe_frequencies=pe_frequencies)
    x = neural.positional_encode(field._normalize(positions), pe_frequencies)
    report = neural.train(mlp, x, velocities, config)
    return field, report


# -- caching -----------------------------------------------------------

def save_velocity_field(field, path) -> None:
    """Cache format: u32 count, f32 positions, f32 velocities."""
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(field)))
        f.write(field.positions.astype("<f4").tobytes())
        f.write(field.velocities.astype("<f4").tobytes())


def _load_velocity_arrays(path):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4:
        raise ValueError("velocity cache too short")
    (count,) = struct.unpack_from("<I", data, 0)
    need = 4 + 2 * 12 * count
    if len(data) != need:
        raise ValueError(f"velocity cache size {len(data)} != expected {need}")
    pos = np.frombuffer(data, dtype="<f4", count=3 * count, offset=4)
    vel = np.frombuffer(data, dtype="<f4", count=3 * count, offset=4 + 12 * count)
    return (pos.reshape(count, 3).astype(np.float64),
            vel.reshape(count, 3).astype(np.float64))


def load_sparse_field(path) -> SparseVelocityField:
    pos, vel = _load_velocity_arrays(path)
    return SparseVelocityField(positions=pos, velocities=vel)


def load_dense_field(path) -> DenseVelocityField:
    pos, vel = _load_velocity_arrays(path)
    return DenseVelocityField(positions=pos, velocities=vel)


def save_motion_field(field: MotionField, path) -> None:
    """MLP checkpoint with the bbox normalization constants appended."""
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(field.mlp.layer_sizes)))
    buf.write(struct.pack(f"<{len(field.mlp.layer_sizes)}I", *field.mlp.layer_sizes))
    for w, b in zip(field.mlp.weights, field.mlp.biases):
        buf.write(w.astype("<f4").tobytes())
        buf.write(b.astype("<f4").tobytes())
    buf.write(np.concatenate([field.bbox_min, field.bbox_max]).astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_motion_field(path) -> MotionField:
    with open(path, "rb") as f:
        data = f.read()
    mlp, offset = neural._mlp_from_bytes(data)
    if len(data) != offset + 24:
        raise ValueError("motion-field checkpoint size mismatch")
    box = np.frombuffer(data, dtype="<f4", count=6, offset=offset).astype(np.float64)
    pe = (mlp.in_dim - 3) // 6
    if mlp.in_dim != 3 + 6 * pe:
        raise ValueError("checkpoint input dim is not a positional encoding size")
    return MotionField(mlp=mlp, bbox_min=box[:3], bbox_max=box[3:],
                       pe_frequencies=pe)
