"""Loop-closed frame generation from a trained velocity field.

Dynamic points are advanced by explicit Euler steps scaled by the
per-axis amplitude vector psi, both forward and backward in time. Each
output frame blends the two trajectories with weight alpha = 1 - t/T,
which forces frame T back onto frame 0 exactly: only positions move,
every other attribute is frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import motionfield
from .cloud_io import GaussianCloud, recompose


@dataclass
class LoopConfig:
    """Amplitude omega, frame count T, and the derived step vector psi.

    Build with for_scene() so psi = (omega/T) * exp(-h); pass psi
    explicitly only to override that rule (the CLI warns loudly when it
    does).
    """

    omega: float
    frames: int
    psi: np.ndarray

    def __post_init__(self):
        if self.omega <= 0:
            raise ValueError("omega must be positive")
        if self.frames < 2:
            raise ValueError("need at least two frames")
        self.psi = np.asarray(self.psi, dtype=np.float64).reshape(3)

    @classmethod
    def for_scene(cls, omega, frames, h) -> "LoopConfig":
        return cls(omega=omega, frames=frames, psi=psi(omega, frames, h))


@dataclass
class FrameSequence:
    frames: list  # T GaussianClouds, full scene each


class FieldDivergedError(RuntimeError):
    """The velocity field produced a non-finite value during integration."""

    def __init__(self, step, n_bad):
        super().__init__(
            f"non-finite field output at integration step {step} "
            f"({n_bad} points affected)"
        )
        self.step = step


def psi(omega, frames, h) -> np.ndarray:
    """Per-axis step amplitude (omega / T) * exp(-h)."""
    if omega <= 0:
        raise ValueError("omega must be positive")
    if frames < 2:
        raise ValueError("need at least two frames")
    return (omega / frames) * np.exp(-np.asarray(h, dtype=np.float64))


def _check_finite(v, step):
    bad = ~np.isfinite(v)
    if np.any(bad):
        raise FieldDivergedError(step, int(np.any(bad, axis=-1).sum()))


def integrate_forward(field, p0, psi_vec, steps) -> np.ndarray:
    """Euler-integrate p <- p + psi * v(p) for the given number of steps."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    p = np.array(p0, dtype=np.float64)
    for step in range(steps):
        v = motionfield.query(field, p)
        _check_finite(v, step)
        p = p + psi_vec * v
    return p


def integrate_backward(field, p0, psi_vec, steps) -> np.ndarray:
    """Reverse Euler: p <- p - psi * v(p), undoing forward motion."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    p = np.array(p0, dtype=np.float64)
    for step in range(steps):
        v = motionfield.query(field, p)
        _check_finite(v, step)
        p = p - psi_vec * v
    return p


def loop_positions(field, p0, psi_vec, frames) -> np.ndarray:
    """(T, n, 3) blended positions; frame 0 equals p0 bit-for-bit.

    Frame t mixes the forward position after t steps with the backward
    position after T - t steps, weighted alpha = 1 - t/T. The conceptual
    frame T (alpha = 0, zero backward steps) lands exactly on p0 again.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    t_total = int(frames)

    fwd = [p0]
    for step in range(1, t_total):
        v = motionfield.query(field, fwd[-1])
        _check_finite(v, step)
        fwd.append(fwd[-1] + psi_vec * v)

    back = [p0]  # back[s] = s backward steps from p0
    for step in range(1, t_total + 1):
        v = motionfield.query(field, back[-1])
        _check_finite(v, -step)
        back.append(back[-1] - psi_vec * v)

    out = np.empty((t_total, *p0.shape))
    out[0] = p0
    for t in range(1, t_total):
        alpha = 1.0 - t / t_total
        out[t] = alpha * fwd[t] + (1.0 - alpha) * back[t_total - t]
    return out


def loop_frames(dynamic: GaussianCloud, static: GaussianCloud, index_map,
                field, config: LoopConfig) -> FrameSequence:
    """Assemble T full-scene frames with the static part re-inserted."""
    if len(dynamic) == 0:
        raise ValueError("nothing to animate: dynamic cloud is empty")
    trajectory = loop_positions(field, dynamic.positions, config.psi, config.frames)
    frames = []
    for t in range(config.frames):
        moved = dynamic.with_positions(trajectory[t])
        frames.append(recompose(moved, static, index_map))
    return FrameSequence(frames=frames)


def mean_frame_displacement(seq: FrameSequence, dynamic_indices) -> float:
    """Mean over consecutive frames of mean per-point displacement norm."""
    steps = []
    for a, b in zip(seq.frames[:-1], seq.frames[1:]):
        d = b.positions[dynamic_indices] - a.positions[dynamic_indices]
        steps.append(float(np.mean(np.linalg.norm(d, axis=1))))
    return float(np.mean(steps))
