"""Per-point feature embeddings for the dynamic Gaussians.

Each point is summarized as a 14-dim attribute vector (normalized
position, standardized log-scale, quaternion, opacity, DC color). The
default backend compresses those vectors with a small autoencoder; the
handcrafted backend uses them directly. Either way the result is a
FeatureSet aligned index-for-index with the dynamic cloud.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import neural
from .cloud_io import GaussianCloud, bbox

SH_C0 = 0.28209479177387814  # DC band constant, 1 / (2 sqrt(pi))

ATTRIBUTE_DIM = 14
DEFAULT_FEATURE_DIM = 16
_ENCODER_HIDDEN = (64, 32)


@dataclass
class FeatureSet:
    vectors: np.ndarray  # (n, dim)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.vectors)


@dataclass
class NormContext:
    """Normalization constants derived from the cloud being embedded."""

    bbox_min: np.ndarray
    bbox_h: np.ndarray
    log_scale_mean: float
    log_scale_std: float


def norm_context(cloud: GaussianCloud) -> NormContext:
    box = bbox(cloud)
    logs = np.log(cloud.scales)
    std = float(logs.std())
    return NormContext(
        bbox_min=box.min,
        bbox_h=box.h,
        log_scale_mean=float(logs.mean()),
        log_scale_std=std if std > 0 else 1.0,
    )


def attribute_vectors(cloud: GaussianCloud, ctx: NormContext) -> np.ndarray:
    """(n, 14) matrix: [pos in [-1,1]^3 | std log-scale | quat | opacity | dc rgb]."""
    h = ctx.bbox_h.copy()
    degenerate = h == 0
    h[degenerate] = 1.0
    pos = 2.0 * (cloud.positions - ctx.bbox_min) / h - 1.0
    pos[:, degenerate] = 0.0

    logs = (np.log(cloud.scales) - ctx.log_scale_mean) / ctx.log_scale_std
    color = 0.5 + SH_C0 * cloud.sh[:, :, 0]
    return np.concatenate(
        [pos, logs, cloud.rotations, cloud.opacities[:, None], color], axis=1
    )


def attribute_vector(point, ctx: NormContext) -> np.ndarray:
    """Single-point version of attribute_vectors."""
    deg = math.isqrt(point.sh.shape[1]) - 1
    cloud = GaussianCloud(
        point.position[None], point.rotation[None], point.scale[None],
        [point.opacity], point.sh[None], deg,
    )
    return attribute_vectors(cloud, ctx)[0]


@dataclass
class Autoencoder:
    encoder: neural.Mlp
    decoder: neural.Mlp
    norm_ctx: NormContext

    @property
    def feature_dim(self) -> int:
        return self.encoder.out_dim


def train_autoencoder(
    cloud: GaussianCloud,
    feature_dim: int = DEFAULT_FEATURE_DIM,
    config: neural.TrainConfig | None = None,
) -> Autoencoder:
    """Fit encoder (14-64-32-dim) and mirrored decoder by reconstruction mse.

    Both halves are trained jointly as one stacked net; the bottleneck is
    a ReLU layer, so features are the activations the decoder actually
    consumes.
    """
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    if feature_dim < 2:
        raise ValueError("feature_dim must be >= 2")
    config = config or neural.TrainConfig()

    ctx = norm_context(cloud)
    x = attribute_vectors(cloud, ctx)
    sizes = (ATTRIBUTE_DIM, *_ENCODER_HIDDEN, feature_dim,
             *reversed(_ENCODER_HIDDEN), ATTRIBUTE_DIM)
    net = neural.mlp_new(sizes, seed=config.seed)
    neural.train(net, x, x, config)

    half = len(_ENCODER_HIDDEN) + 1
    encoder = neural.Mlp(net.layer_sizes[:half + 1],
                         net.weights[:half], net.biases[:half])
    decoder = neural.Mlp(net.layer_sizes[half:],
                         net.weights[half:], net.biases[half:])
    return Autoencoder(encoder=encoder, decoder=decoder, norm_ctx=ctx)


def encode(autoencoder: Autoencoder, cloud: GaussianCloud) -> FeatureSet:
    """Bottleneck activations per point; zero rows get a 1e-8 nudge.

    The nudge keeps cosine similarity defined for every vector.
    """
    x = attribute_vectors(cloud, autoencoder.norm_ctx)
    feats = np.maximum(neural.forward(autoencoder.encoder, x), 0.0)
    dead = ~np.any(feats != 0.0, axis=1)
    feats[dead, 0] = 1e-8
    return FeatureSet(vectors=feats)


def reconstruction_mse(autoencoder: Autoencoder, cloud: GaussianCloud) -> float:
    x = attribute_vectors(cloud, autoencoder.norm_ctx)
    feats = np.maximum(neural.forward(autoencoder.encoder, x), 0.0)
    return float(np.mean((neural.forward(autoencoder.decoder, feats) - x) ** 2))


def handcrafted_features(cloud: GaussianCloud) -> FeatureSet:
    """Fallback backend: the raw 14-dim attribute vectors, no training."""
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    ctx = norm_context(cloud)
    feats = attribute_vectors(cloud, ctx)
    dead = ~np.any(feats != 0.0, axis=1)
    feats[dead, 0] = 1e-8
    return FeatureSet(vectors=feats)


def save_features(fs: FeatureSet, path) -> None:
    """Cache format: u32 count, u32 dim, then row-major f32 data."""
    with open(path, "wb") as f:
        f.write(struct.pack("<II", len(fs), fs.dim))
        f.write(fs.vectors.astype("<f4").tobytes())


def load_features(path) -> FeatureSet:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8:
        raise ValueError("feature cache too short")
    count, dim = struct.unpack_from("<II", data, 0)
    need = 8 + 4 * count * dim
    if len(data) != need:
        raise ValueError(f"feature cache size {len(data)} != expected {need}")
    vec = np.frombuffer(data, dtype="<f4", count=count * dim, offset=8)
    return FeatureSet(vectors=vec.reshape(count, dim).astype(np.float64))
