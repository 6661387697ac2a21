"""Gaussian-splat point cloud I/O and shape utilities.

Clouds are stored as structure-of-arrays (float64 in memory). The on-disk
PLY layout follows the common splat-checkpoint convention: binary little
endian, one vertex element whose float32 properties appear in this exact
order::

    x y z nx ny nz f_dc_0..2 f_rest_* opacity scale_0..2 rot_0..3

Scales are stored as logs and opacities as logits; activations (exp,
sigmoid) are applied on load and inverted on save. Normals are read and
discarded. The number of f_rest properties fixes the SH degree:
0 -> deg 0, 9 -> deg 1, 24 -> deg 2, 45 -> deg 3.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# f_rest count per color channel -> SH degree
_F_REST_TO_DEGREE = {0: 0, 3: 1, 8: 2, 15: 3}

# Quaternions farther than this from unit norm are renormalized on load.
# Anything closer is float32 quantization noise; renormalizing it would
# break the bitwise load/save roundtrip.
_QUAT_NORM_TOL = 1e-6


class PlyParseError(ValueError):
    """Malformed splat PLY; carries the byte offset of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MaskError(ValueError):
    pass


@dataclass
class GaussianPoint:
    """Single Gaussian primitive with post-activation attributes."""

    position: np.ndarray   # (3,)
    rotation: np.ndarray   # (4,) unit quaternion, (w, x, y, z)
    scale: np.ndarray      # (3,) per-axis stddev, > 0
    opacity: float         # in [0, 1]
    sh: np.ndarray         # (3, (deg+1)**2) per-channel coefficients


class GaussianCloud:
    """Ordered set of Gaussian points (structure of arrays).

    Point order is the identity used by masks, features and index maps,
    so every operation here preserves it.
    """

    def __init__(self, positions, rotations, scales, opacities, sh, sh_degree):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.rotations = np.asarray(rotations, dtype=np.float64).reshape(n, 4)
        self.scales = np.asarray(scales, dtype=np.float64).reshape(n, 3)
        self.opacities = np.asarray(opacities, dtype=np.float64).reshape(n)
        n_coeff = (sh_degree + 1) ** 2
        self.sh = np.asarray(sh, dtype=np.float64).reshape(n, 3, n_coeff)
        self.sh_degree = int(sh_degree)
        if np.any(self.scales <= 0):
            raise ValueError("scales must be strictly positive")
        if np.any(self.opacities < 0) or np.any(self.opacities > 1):
            raise ValueError("opacities must lie in [0, 1]")
        norms = np.linalg.norm(self.rotations, axis=1)
        off = np.abs(norms - 1.0) > _QUAT_NORM_TOL
        if np.any(off):
            if np.any(norms[off] == 0):
                raise ValueError("zero quaternion")
            self.rotations = self.rotations / norms[:, None]

    def __len__(self):
        return len(self.positions)

    def point(self, i) -> GaussianPoint:
        return GaussianPoint(
            position=self.positions[i].copy(),
            rotation=self.rotations[i].copy(),
            scale=self.scales[i].copy(),
            opacity=float(self.opacities[i]),
            sh=self.sh[i].copy(),
        )

    def take(self, indices) -> "GaussianCloud":
        """Sub-cloud at the given indices, order preserved."""
        idx = np.asarray(indices, dtype=np.int64)
        return GaussianCloud(
            self.positions[idx], self.rotations[idx], self.scales[idx],
            self.opacities[idx], self.sh[idx], self.sh_degree,
        )

    def with_positions(self, positions) -> "GaussianCloud":
        """Copy of this cloud with positions replaced, all else shared."""
        return GaussianCloud(
            positions, self.rotations, self.scales,
            self.opacities, self.sh, self.sh_degree,
        )


@dataclass
class Mask:
    bits: np.ndarray  # (n,) of {0, 1}

    def __len__(self):
        return len(self.bits)

    @property
    def coverage(self) -> float:
        return float(np.mean(self.bits))


@dataclass
class AABB:
    min: np.ndarray
    max: np.ndarray

    @property
    def h(self) -> np.ndarray:
        return self.max - self.min


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _logit(y):
    y = np.clip(y, 1e-15, 1.0 - 1e-15)
    return np.log(y) - np.log1p(-y)


def _expected_properties(deg):
    n_rest = 3 * ((deg + 1) ** 2 - 1)
    props = ["x", "y", "z", "nx", "ny", "nz"]
    props += [f"f_dc_{i}" for i in range(3)]
    props += [f"f_rest_{i}" for i in range(n_rest)]
    props += ["opacity"]
    props += [f"scale_{i}" for i in range(3)]
    props += [f"rot_{i}" for i in range(4)]
    return props


def load_ply(path) -> GaussianCloud:
    """Load a splat PLY, applying exp/sigmoid activations.

    Raises PlyParseError on malformed headers, unexpected property sets
    or truncated payloads, naming the byte offset of the problem.
    """
    with open(path, "rb") as f:
        data = f.read()

    def fail(msg, offset):
        raise PlyParseError(msg, offset)

    # -- header ------------------------------------------------------
    pos = 0
    lines = []
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            fail("header not terminated by end_header", pos)
        line = data[pos:nl].decode("ascii", errors="replace").strip()
        lines.append((line, pos))
        pos = nl + 1
        if line == "end_header":
            break
        if pos > 65536:
            fail("header too large", pos)
    payload_start = pos

    if lines[0][0] != "ply":
        fail(f"bad magic {lines[0][0]!r}", lines[0][1])
    if lines[1][0] != "format binary_little_endian 1.0":
        fail(f"unsupported format {lines[1][0]!r}", lines[1][1])

    n_vertex = None
    prop_names = []
    for line, off in lines[2:-1]:
        if line.startswith("comment"):
            continue
        if line.startswith("element"):
            parts = line.split()
            if len(parts) != 3 or parts[1] != "vertex":
                fail(f"unsupported element {line!r}", off)
            if n_vertex is not None:
                fail("multiple vertex elements", off)
            try:
                n_vertex = int(parts[2])
            except ValueError:
                fail(f"bad vertex count in {line!r}", off)
        elif line.startswith("property"):
            parts = line.split()
            if len(parts) != 3 or parts[1] not in ("float", "float32"):
                fail(f"unsupported property {line!r}", off)
            prop_names.append(parts[2])
        else:
            fail(f"unrecognized header line {line!r}", off)
    if n_vertex is None:
        fail("missing vertex element", payload_start)
    if n_vertex <= 0:
        fail("empty vertex element", payload_start)

    n_rest_total = len(prop_names) - 17
    deg = _F_REST_TO_DEGREE.get(n_rest_total // 3 if n_rest_total % 3 == 0 else -1)
    if deg is None or prop_names != _expected_properties(deg):
        fail(f"unknown property set ({len(prop_names)} properties)", payload_start)

    # -- payload -----------------------------------------------------
    n_props = len(prop_names)
    need = n_vertex * n_props * 4
    if len(data) - payload_start < need:
        fail(
            f"truncated payload: need {need} bytes, have {len(data) - payload_start}",
            payload_start + (len(data) - payload_start),
        )
    raw = np.frombuffer(
        data, dtype="<f4", count=n_vertex * n_props, offset=payload_start
    ).reshape(n_vertex, n_props).astype(np.float64)

    n_rest = (deg + 1) ** 2 - 1
    positions = raw[:, 0:3]
    f_dc = raw[:, 6:9]
    f_rest = raw[:, 9:9 + 3 * n_rest]
    opacity = _sigmoid(raw[:, 9 + 3 * n_rest])
    scales = np.exp(raw[:, 10 + 3 * n_rest:13 + 3 * n_rest])
    rotations = raw[:, 13 + 3 * n_rest:17 + 3 * n_rest]

    # channel-major f_rest: all deg>0 coefficients of R, then G, then B
    sh = np.zeros((n_vertex, 3, n_rest + 1))
    sh[:, :, 0] = f_dc
    for c in range(3):
        sh[:, c, 1:] = f_rest[:, c * n_rest:(c + 1) * n_rest]

    return GaussianCloud(positions, rotations, scales, opacity, sh, deg)


def save_ply(cloud: GaussianCloud, path) -> None:
    """Write a cloud in the splat PLY layout (inverse activations applied)."""
    if len(cloud) == 0:
        raise ValueError("refusing to save an empty cloud")
    deg = cloud.sh_degree
    n_rest = (deg + 1) ** 2 - 1
    n = len(cloud)

    cols = [cloud.positions, np.zeros((n, 3))]  # zeroed normals
    cols.append(cloud.sh[:, :, 0])
    if n_rest:
        cols.append(cloud.sh[:, :, 1:].reshape(n, 3 * n_rest))
    cols.append(_logit(cloud.opacities)[:, None])
    cols.append(np.log(cloud.scales))
    cols.append(cloud.rotations)
    table = np.concatenate(cols, axis=1).astype("<f4")

    header_lines = ["ply", "format binary_little_endian 1.0",
                    f"element vertex {n}"]
    header_lines += [f"property float {p}" for p in _expected_properties(deg)]
    header_lines.append("end_header")
    header = ("\n".join(header_lines) + "\n").encode("ascii")

    with open(path, "wb") as f:
        f.write(header)
        f.write(table.tobytes())


def load_mask(path, n) -> Mask:
    """Read a sidecar mask: one '0'/'1' per line, exactly n lines."""
    with open(path, "r", encoding="utf-8") as f:
        tokens = f.read().split()
    if len(tokens) != n:
        raise MaskError(f"mask has {len(tokens)} entries, cloud has {n} points")
    bad = [t for t in tokens if t not in ("0", "1")]
    if bad:
        raise MaskError(f"non-binary mask token {bad[0]!r}")
    return Mask(bits=np.array([int(t) for t in tokens], dtype=np.uint8))


def save_mask(mask: Mask, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.writelines(f"{int(b)}\n" for b in mask.bits)


def split(cloud: GaussianCloud, mask: Mask):
    """Partition into (dynamic, static, index_map) by the mask.

    index_map is (dynamic_indices, static_indices) into the original
    cloud; recompose() inverts the split exactly.
    """
    if len(mask) != len(cloud):
        raise ValueError(
            f"mask length {len(mask)} does not match cloud size {len(cloud)}"
        )
    dyn_idx = np.flatnonzero(mask.bits == 1)
    sta_idx = np.flatnonzero(mask.bits == 0)
    return cloud.take(dyn_idx), cloud.take(sta_idx), (dyn_idx, sta_idx)


def recompose(dynamic: GaussianCloud, static: GaussianCloud, index_map) -> GaussianCloud:
    """Inverse of split: re-interleave both parts at their original indices."""
    dyn_idx, sta_idx = index_map
    n = len(dyn_idx) + len(sta_idx)
    deg = dynamic.sh_degree if len(dyn_idx) else static.sh_degree
    n_coeff = (deg + 1) ** 2

    positions = np.zeros((n, 3))
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    scales = np.ones((n, 3))
    opacities = np.zeros(n)
    sh = np.zeros((n, 3, n_coeff))
    for part, idx in ((dynamic, dyn_idx), (static, sta_idx)):
        if len(idx) == 0:
            continue
        positions[idx] = part.positions
        rotations[idx] = part.rotations
        scales[idx] = part.scales
        opacities[idx] = part.opacities
        sh[idx] = part.sh
    return GaussianCloud(positions, rotations, scales, opacities, sh, deg)


def bbox(cloud: GaussianCloud) -> AABB:
    if len(cloud) == 0:
        raise ValueError("bbox of empty cloud")
    return AABB(min=cloud.positions.min(axis=0), max=cloud.positions.max(axis=0))


def eccentricity_loss(cloud: GaussianCloud) -> float:
    """Mean over points of 1 - min(s)^2 / max(s)^2 (0 iff all spherical)."""
    if np.any(cloud.scales <= 0):
        raise ValueError("scales must be strictly positive")
    lo = cloud.scales.min(axis=1)
    hi = cloud.scales.max(axis=1)
    return float(np.mean(1.0 - lo ** 2 / hi ** 2))


def clamp_eccentricity(cloud: GaussianCloud, ratio_min) -> GaussianCloud:
    """Raise sub-threshold scale axes so min(s)/max(s) >= ratio_min.

    max(s) is never changed, so clamping cannot grow a point.
    """
    if not 0 < ratio_min <= 1:
        raise ValueError("ratio_min must lie in (0, 1]")
    hi = cloud.scales.max(axis=1, keepdims=True)
    scales = np.maximum(cloud.scales, ratio_min * hi)
    return GaussianCloud(
        cloud.positions, cloud.rotations, scales,
        cloud.opacities, cloud.sh, cloud.sh_degree,
    )
