"""Deterministic demo scene: a striped flag (dynamic) on a pole (static).

Writes a ~2k-point splat PLY, its sidecar mask, a single-camera
transforms.json and a ready-to-run config. Used by the test suite and as
the quickest way to try the CLI:

    python -m loopfield.synthetic scenes/flag
    loopfield pipeline --config scenes/flag/config.json
"""

from __future__ import annotations

import json
import os
import sys

import numpy as np

from .cloud_io import GaussianCloud, Mask, save_mask, save_ply
from .features import SH_C0
from .pipeline import PipelineConfig

FLAG_NX = 56
FLAG_NY = 28
POLE_N = 420

STRIPE_COLORS = np.array([
    [0.88, 0.22, 0.18],
    [0.95, 0.82, 0.25],
    [0.20, 0.55, 0.85],
    [0.25, 0.75, 0.35],
])


def _rgb_to_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def make_flag_cloud(seed=7):
    """Returns (cloud, mask): flag sheet masked dynamic, pole static."""
    rng = np.random.default_rng(seed)

    # flag sheet: regular grid with a gentle standing ripple in z
    u = np.linspace(0.0, 1.0, FLAG_NX)
    v = np.linspace(0.0, 1.0, FLAG_NY)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    fx = 0.08 + 1.15 * uu.ravel()
    fy = 0.62 + 0.68 * vv.ravel()
    fz = 0.06 * np.sin(2.6 * np.pi * uu.ravel()) * (0.3 + 0.7 * uu.ravel())
    flag_pos = np.stack([fx, fy, fz], axis=1)
    flag_pos += rng.normal(0.0, 0.0015, flag_pos.shape)

    stripe = (vv.ravel() * len(STRIPE_COLORS)).astype(int) % len(STRIPE_COLORS)
    flag_rgb = STRIPE_COLORS[stripe]
    # brightness falls off toward the free end so clusters stay distinct
    flag_rgb = flag_rgb * (1.0 - 0.25 * uu.ravel())[:, None]

    n_flag = len(flag_pos)
    spacing = 1.15 / (FLAG_NX - 1)
    flag_scale = np.full((n_flag, 3), 0.55 * spacing)
    flag_scale *= rng.uniform(0.85, 1.15, (n_flag, 3))
    flag_opacity = rng.uniform(0.82, 0.95, n_flag)

    # pole: a thin vertical cylinder next to the flag's fixed edge
    theta = rng.uniform(0.0, 2.0 * np.pi, POLE_N)
    pole_y = np.linspace(0.0, 1.38, POLE_N)
    pole_pos = np.stack([
        0.02 + 0.012 * np.cos(theta),
        pole_y,
        0.012 * np.sin(theta),
    ], axis=1)
    pole_rgb = np.tile([0.45, 0.38, 0.30], (POLE_N, 1))
    pole_rgb *= rng.uniform(0.9, 1.1, (POLE_N, 1))
    pole_scale = np.full((POLE_N, 3), 0.016)
    pole_opacity = np.full(POLE_N, 0.95)

    positions = np.concatenate([flag_pos, pole_pos])
    n = len(positions)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    scales = np.concatenate([flag_scale, pole_scale])
    opacities = np.concatenate([flag_opacity, pole_opacity])
    rgb = np.clip(np.concatenate([flag_rgb, pole_rgb]), 0.02, 0.98)
    sh = _rgb_to_dc(rgb)[:, :, None]  # degree 0: DC band only

    cloud = GaussianCloud(positions, rotations, scales, opacities, sh, sh_degree=0)
    bits = np.concatenate([np.ones(n_flag, dtype=np.uint8),
                           np.zeros(POLE_N, dtype=np.uint8)])
    return cloud, Mask(bits=bits)


def make_transforms(width=900, height=900):
    """One front-facing camera, far enough back to frame the whole scene."""
    c2w = np.eye(4)
    c2w[:3, 3] = [0.66, 0.70, 3.1]
    return {
        "camera_angle_x": 0.6981317007977318,  # 40 degrees
        "w": width,
        "h": height,
        "frames": [{"transform_matrix": c2w.tolist()}],
    }


def make_flag_scene(out_dir, seed=7) -> dict:
    """Write scene.ply / mask.txt / transforms.json / config.json."""
    os.makedirs(out_dir, exist_ok=True)
    cloud, mask = make_flag_cloud(seed)
    ply_path = os.path.join(out_dir, "scene.ply")
    mask_path = os.path.join(out_dir, "mask.txt")
    cameras_path = os.path.join(out_dir, "transforms.json")
    config_path = os.path.join(out_dir, "config.json")

    save_ply(cloud, ply_path)
    save_mask(mask, mask_path)
    with open(cameras_path, "w", encoding="utf-8") as f:
        json.dump(make_transforms(), f, indent=2)
        f.write("\n")

    # paths relative to the config file keep the scene directory relocatable
    cfg = PipelineConfig(
        input_ply="scene.ply",
        mask_path="mask.txt",
        cameras_path="transforms.json",
        output_dir="out",
    )
    cfg.save(config_path)
    return {
        "ply": ply_path,
        "mask": mask_path,
        "cameras": cameras_path,
        "config": config_path,
    }


if __name__ == "__main__":
    target = sys.argv[1] if len(sys.argv) > 1 else "flag_scene"
    paths = make_flag_scene(target)
    for name, path in paths.items():
        print(f"{name}: {path}")
