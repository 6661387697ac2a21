"""Minimal dense-network engine: forward, backprop, Adam, checkpoints.

Shared by the feature autoencoder and the velocity-field MLP. Hidden
layers use ReLU, the output layer is linear. Everything is seeded and
bit-deterministic: same (seed, config, data order) means same parameters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 400
    batch_size: int = 0          # 0 = full batch
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class TrainReport:
    initial_mse: float
    epoch_mse: list = field(default_factory=list)

    @property
    def final_mse(self) -> float:
        return self.epoch_mse[-1] if self.epoch_mse else self.initial_mse


class Mlp:
    """Fully-connected net; weights[l] has shape (in, out), x @ W + b."""

    def __init__(self, layer_sizes, weights, biases):
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.weights = weights
        self.biases = biases

    @property
    def in_dim(self):
        return self.layer_sizes[0]

    @property
    def out_dim(self):
        return self.layer_sizes[-1]

    def parameter_count(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def mlp_new(layer_sizes, seed) -> Mlp:
    """Xavier-uniform weights from the given seed, zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ValueError("need at least input and output layers")
    if any(s < 1 for s in sizes):
        raise ValueError("layer sizes must be >= 1")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(sizes, weights, biases)


def forward(mlp: Mlp, x) -> np.ndarray:
    """Evaluate the net on a single vector or an (n, in_dim) batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.shape[1] != mlp.in_dim:
        raise ValueError(f"input dim {a.shape[1]} != expected {mlp.in_dim}")
    last = len(mlp.weights) - 1
    for l, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        a = a @ w + b
        if l != last:
            a = np.maximum(a, 0.0)
    return a[0] if single else a


def _forward_trace(mlp, x):
    """Forward pass keeping pre-activations for backprop."""
    acts = [x]       # post-activation per layer, acts[0] = input
    pres = []        # pre-activation per layer
    a = x
    last = len(mlp.weights) - 1
    for l, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = a @ w + b
        pres.append(z)
        a = z if l == last else np.maximum(z, 0.0)
        acts.append(a)
    return acts, pres


def _backprop(mlp, x, y):
    """MSE loss and its gradients wrt every weight/bias.

    Loss is the mean of squared errors over all batch entries and output
    components, so gradients stay scale-free in the batch size.
    """
    acts, pres = _forward_trace(mlp, x)
    out = acts[-1]
    diff = out - y
    loss = float(np.mean(diff ** 2))
    delta = 2.0 * diff / diff.size
    grads_w = [None] * len(mlp.weights)
    grads_b = [None] * len(mlp.biases)
    for l in range(len(mlp.weights) - 1, -1, -1):
        grads_w[l] = acts[l].T @ delta
        grads_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ mlp.weights[l].T) * (pres[l - 1] > 0)
    return loss, grads_w, grads_b


def _dataset_mse(mlp, x, y):
    diff = forward(mlp, x) - y
    return float(np.mean(diff ** 2))


def train(mlp: Mlp, inputs, targets, config: TrainConfig) -> TrainReport:
    """Adam training in place; per-epoch mse is recorded on the full set."""
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    n = len(x)
    if n == 0:
        raise ValueError("empty training set")
    if len(y) != n:
        raise ValueError("inputs/targets length mismatch")

    batch = config.batch_size if 0 < config.batch_size < n else n
    rng = np.random.default_rng(config.seed)
    m_w = [np.zeros_like(w) for w in mlp.weights]
    v_w = [np.zeros_like(w) for w in mlp.weights]
    m_b = [np.zeros_like(b) for b in mlp.biases]
    v_b = [np.zeros_like(b) for b in mlp.biases]
    b1, b2, eps, lr = config.beta1, config.beta2, config.eps, config.learning_rate

    report = TrainReport(initial_mse=_dataset_mse(mlp, x, y))
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n) if batch < n else np.arange(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            _, gw, gb = _backprop(mlp, x[idx], y[idx])
            step += 1
            c1 = 1.0 - b1 ** step
            c2 = 1.0 - b2 ** step
            for params, grads, ms, vs in (
                (mlp.weights, gw, m_w, v_w),
                (mlp.biases, gb, m_b, v_b),
            ):
                for p, g, m, v in zip(params, grads, ms, vs):
                    m *= b1
                    m += (1 - b1) * g
                    v *= b2
                    v += (1 - b2) * g * g
                    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        report.epoch_mse.append(_dataset_mse(mlp, x, y))
    return report


def positional_encode(p, n_frequencies) -> np.ndarray:
    """Fourier features: concat(p, sin(2^k pi p), cos(2^k pi p)), k < L.

    Accepts a 3-vector or an (n, 3) batch; output dim is 3 + 6L.
    """
    if n_frequencies < 0:
        raise ValueError("frequency count must be >= 0")
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    q = p[None, :] if single else p
    parts = [q]
    for k in range(n_frequencies):
        arg = (2.0 ** k) * np.pi * q
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    out = np.concatenate(parts, axis=1)
    return out[0] if single else out


def grad_check(mlp: Mlp, sample, eps) -> float:
    """Max relative error of backprop vs central finite differences.

    The finite-difference side re-evaluates the full loss at theta +/- eps
    per parameter, so it is an independent oracle for the backprop path.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x, y = sample
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    _, gw, gb = _backprop(mlp, x, y)

    def loss():
        diff = forward(mlp, x) - y
        return float(np.mean(diff ** 2))

    worst = 0.0
    for params, grads in ((mlp.weights, gw), (mlp.biases, gb)):
        for p, g in zip(params, grads):
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = loss()
                flat[i] = orig - eps
                down = loss()
                flat[i] = orig
                fd = (up - down) / (2.0 * eps)
                denom = max(abs(gflat[i]), abs(fd), 1e-8)
                worst = max(worst, abs(gflat[i] - fd) / denom)
    return worst


def save_mlp(mlp: Mlp, path) -> None:
    """Checkpoint: u32 layer count, u32 sizes, then f32 W/b per layer."""
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(mlp.layer_sizes)))
        f.write(struct.pack(f"<{len(mlp.layer_sizes)}I", *mlp.layer_sizes))
        for w, b in zip(mlp.weights, mlp.biases):
            f.write(w.astype("<f4").tobytes())
            f.write(b.astype("<f4").tobytes())


def load_mlp(path) -> Mlp:
    with open(path, "rb") as f:
        data = f.read()
    return _mlp_from_bytes(data)[0]


def _mlp_from_bytes(data, offset=0):
    (n_sizes,) = struct.unpack_from("<I", data, offset)
    offset += 4
    sizes = list(struct.unpack_from(f"<{n_sizes}I", data, offset))
    offset += 4 * n_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(data, dtype="<f4", count=fan_in * fan_out, offset=offset)
        offset += 4 * fan_in * fan_out
        b = np.frombuffer(data, dtype="<f4", count=fan_out, offset=offset)
        offset += 4 * fan_out
        weights.append(w.reshape(fan_in, fan_out).astype(np.float64))
        biases.append(b.astype(np.float64))
    return Mlp(sizes, weights, biases), offset
