"""CPU splat renderer: project Gaussians to 2D, sort by depth, alpha-blend.

Cameras follow the transforms.json convention (camera-to-world matrices,
-z forward / +y up, horizontal field of view shared by both axes).
Projection uses the local affine approximation of the perspective map;
each splat is rasterized over its 3-sigma extent and composited
front-to-back, per pixel, until transmittance drops below 1e-4.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

from .cloud_io import GaussianCloud

# real spherical-harmonics constants, bands 0..3
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

NEAR_PLANE = 0.01
COV2D_FLOOR = 0.3        # px^2, added to the diagonal
EXTENT_SIGMA = 3.0       # rasterized footprint radius in sigmas
TERMINATE_T = 1e-4       # stop blending a pixel below this transmittance


class CameraError(ValueError):
    pass


@dataclass
class Camera:
    c2w: np.ndarray      # 4x4 camera-to-world, -z forward / +y up
    fov_x: float         # horizontal field of view, radians
    width: int
    height: int

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64).reshape(4, 4)
        if not 0 < self.fov_x < np.pi:
            raise CameraError("fov must lie in (0, pi)")
        r = self.c2w[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-4):
            raise CameraError("rotation block is not orthonormal")

    @property
    def focal(self) -> float:
        return 0.5 * self.width / np.tan(0.5 * self.fov_x)

    @property
    def position(self) -> np.ndarray:
        return self.c2w[:3, 3]

    def world_to_cam(self):
        """Rotation/translation into +z-forward, +y-down camera space."""
        r = self.c2w[:3, :3].copy()
        r[:, 1] *= -1.0
        r[:, 2] *= -1.0
        t = self.c2w[:3, 3]
        return r.T, -r.T @ t


@dataclass
class Splat2D:
    mean: np.ndarray     # (2,) pixel coordinates
    cov2d: np.ndarray    # (2, 2) symmetric positive definite
    depth: float         # camera-space z
    color: np.ndarray    # (3,) rgb in [0, 1]
    alpha: float         # base opacity


@dataclass
class Image:
    width: int
    height: int
    buffer: np.ndarray   # (H, W, 3) float rgb in [0, 1]


def load_cameras(path, width=None, height=None):
    """Parse a transforms.json; resolution comes from the file's optional
    top-level "w"/"h" keys unless overridden by the arguments."""
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if "camera_angle_x" not in doc:
        raise CameraError("missing camera_angle_x")
    if "frames" not in doc:
        raise CameraError("missing frames")
    fov = float(doc["camera_angle_x"])
    w = width if width is not None else doc.get("w")
    h = height if height is not None else doc.get("h")
    if w is None or h is None:
        raise CameraError("image resolution not in file and not provided")

    cameras = []
    for i, frame in enumerate(doc["frames"]):
        if "transform_matrix" not in frame:
            raise CameraError(f"frame {i}: missing transform_matrix")
        m = np.asarray(frame["transform_matrix"], dtype=np.float64)
        if m.shape != (4, 4):
            raise CameraError(f"frame {i}: transform_matrix is not 4x4")
        try:
            cameras.append(Camera(c2w=m, fov_x=fov, width=int(w), height=int(h)))
        except CameraError as e:
            raise CameraError(f"frame {i}: {e}") from None
    return cameras


def sh_basis(dirs, degree) -> np.ndarray:
    """Real SH basis values for unit directions, shape (n, (deg+1)^2)."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = len(dirs)
    out = np.empty((n, (degree + 1) ** 2))
    out[:, 0] = SH_C0
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        out[:, 1] = -SH_C1 * y
        out[:, 2] = SH_C1 * z
        out[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out[:, 4] = SH_C2[0] * xy
        out[:, 5] = SH_C2[1] * yz
        out[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[:, 7] = SH_C2[3] * xz
        out[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[:, 10] = SH_C3[1] * xy * z
        out[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[:, 14] = SH_C3[5] * z * (xx - yy)
        out[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def eval_sh(sh_coeffs, view_dir, degree) -> np.ndarray:
    """View-dependent rgb: 0.5 + sum_k basis_k(dir) sh[c, k], clamped.

    sh_coeffs is (3, n_coeff) for one point or (n, 3, n_coeff) batched,
    with view_dir (3,) or (n, 3) to match.
    """
    sh = np.asarray(sh_coeffs, dtype=np.float64)
    single = sh.ndim == 2
    if single:
        sh = sh[None]
    if not 0 <= degree <= 3:
        raise ValueError("degree must be in 0..3")
    n_needed = (degree + 1) ** 2
    if sh.shape[2] < n_needed:
        raise ValueError(
            f"degree {degree} needs {n_needed} coefficients, have {sh.shape[2]}"
        )
    dirs = np.atleast_2d(np.asarray(view_dir, dtype=np.float64))
    basis = sh_basis(dirs, degree)
    rgb = 0.5 + np.einsum("nk,nck->nc", basis, sh[:, :, :n_needed])
    rgb = np.clip(rgb, 0.0, 1.0)
    return rgb[0] if single else rgb


def _quat_to_rot(q):
    """Batch of unit quaternions (n, 4) wxyz -> rotation matrices (n, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((len(q), 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def project_cloud(cloud, camera: Camera, sh_degree=None):
    """Project every point; returns (means, cov2ds, depths, colors, alphas,
    keep) with `keep` false for points culled at the near plane."""
    deg = cloud.sh_degree if sh_degree is None else min(sh_degree, cloud.sh_degree)
    w_rot, w_t = camera.world_to_cam()
    cam_pts = cloud.positions @ w_rot.T + w_t
    depths = cam_pts[:, 2]
    keep = depths >= NEAR_PLANE

    # 3D covariance R S S^T R^T rotated into camera space
    rot = _quat_to_rot(cloud.rotations)
    rs = rot * cloud.scales[:, None, :]          # R @ diag(s)
    cov3d = rs @ np.swapaxes(rs, 1, 2)
    cov_cam = np.einsum("ij,njk,lk->nil", w_rot, cov3d, w_rot)

    f = camera.focal
    z = np.where(keep, depths, 1.0)
    means = np.empty((len(cloud), 2))
    means[:, 0] = 0.5 * camera.width + f * cam_pts[:, 0] / z
    means[:, 1] = 0.5 * camera.height + f * cam_pts[:, 1] / z

    jac = np.zeros((len(cloud), 2, 3))
    jac[:, 0, 0] = f / z
    jac[:, 1, 1] = f / z
    jac[:, 0, 2] = -f * cam_pts[:, 0] / (z * z)
    jac[:, 1, 2] = -f * cam_pts[:, 1] / (z * z)
    cov2d = np.einsum("nij,njk,nlk->nil", jac, cov_cam, jac)
    cov2d[:, 0, 0] += COV2D_FLOOR
    cov2d[:, 1, 1] += COV2D_FLOOR

    view = cloud.positions - camera.position
    norms = np.linalg.norm(view, axis=1, keepdims=True)
    view = view / np.where(norms == 0, 1.0, norms)
    colors = eval_sh(cloud.sh, view, deg)
    return means, cov2d, depths, colors, cloud.opacities.copy(), keep


def project_gaussian(point, camera: Camera):
    """Project one Gaussian; returns a Splat2D, or None when culled."""
    deg = math.isqrt(point.sh.shape[1]) - 1
    cloud = GaussianCloud(point.position[None], point.rotation[None],
                          point.scale[None], [point.opacity], point.sh[None], deg)
    means, cov2d, depths, colors, alphas, keep = project_cloud(cloud, camera)
    if not keep[0]:
        return None
    return Splat2D(mean=means[0], cov2d=cov2d[0], depth=float(depths[0]),
                   color=colors[0], alpha=float(alphas[0]))


def splat_extent(cov2d) -> float:
    """3-sigma footprint radius from the largest covariance eigenvalue."""
    a, b, c = cov2d[0, 0], cov2d[0, 1], cov2d[1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(max(0.25 * (a - c) ** 2 + b * b, 0.0))
    return EXTENT_SIGMA * np.sqrt(max(lam_max, 0.0))


def render(cloud, camera: Camera, sh_degree=None, background=(0.0, 0.0, 0.0)) -> Image:
    """Depth-sorted front-to-back alpha blend of the whole cloud.

    Splats are composited in ascending depth (stable order for equal
    depths); each pixel stops accepting contributions once its
    transmittance falls below 1e-4. The leftover transmittance is filled
    with the background color.
    """
    w, h = camera.width, camera.height
    if w < 1 or h < 1:
        raise ValueError("image dimensions must be positive")
    color_buf = np.zeros((h, w, 3))
    trans = np.ones((h, w))
    bg = np.asarray(background, dtype=np.float64).reshape(3)

    if len(cloud) > 0:
        means, cov2d, depths, colors, alphas, keep = project_cloud(
            cloud, camera, sh_degree
        )
        visible = np.flatnonzero(keep)
        order = visible[np.argsort(depths[visible], kind="stable")]
        for s in order:
            _blend_splat(color_buf, trans, means[s], cov2d[s],
                         colors[s], alphas[s])

    color_buf += trans[:, :, None] * bg
    return Image(width=w, height=h, buffer=color_buf)


def _blend_splat(color_buf, trans, mean, cov2d, color, alpha):
    h, w = trans.shape
    r = splat_extent(cov2d)
    x0 = max(int(np.ceil(mean[0] - r - 0.5)), 0)
    x1 = min(int(np.floor(mean[0] + r - 0.5)), w - 1)
    y0 = max(int(np.ceil(mean[1] - r - 0.5)), 0)
    y1 = min(int(np.floor(mean[1] + r - 0.5)), h - 1)
    if x0 > x1 or y0 > y1:
        return

    det = cov2d[0, 0] * cov2d[1, 1] - cov2d[0, 1] ** 2
    if det <= 0:
        return
    ia = cov2d[1, 1] / det
    ib = -cov2d[0, 1] / det
    ic = cov2d[0, 0] / det

    px = np.arange(x0, x1 + 1) + 0.5 - mean[0]
    py = np.arange(y0, y1 + 1) + 0.5 - mean[1]
    quad = (ia * px ** 2)[None, :] + (ic * py ** 2)[:, None] \
        + (2.0 * ib) * np.outer(py, px)
    a = alpha * np.exp(-0.5 * quad)

    t_block = trans[y0:y1 + 1, x0:x1 + 1]
    active = t_block >= TERMINATE_T
    contrib = np.where(active, t_block * a, 0.0)
    color_buf[y0:y1 + 1, x0:x1 + 1] += contrib[:, :, None] * color
    t_block[active] = (t_block * (1.0 - a))[active]


def write_image(image: Image, path) -> None:
    """8-bit PNG; values are clamped to [0, 1] before quantization."""
    data = np.clip(image.buffer, 0.0, 1.0)
    data = np.rint(255.0 * data).astype(np.uint8)
    PILImage.fromarray(data, mode="RGB").save(path, format="PNG")


def read_image(path) -> Image:
    img = PILImage.open(path).convert("RGB")
    buf = np.asarray(img, dtype=np.float64) / 255.0
    return Image(width=img.width, height=img.height, buffer=buf)
