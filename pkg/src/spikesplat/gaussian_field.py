"""3D Gaussian primitives, cameras, and the EWA projection to screen-space splats.

Conventions:
    * Quaternions are stored as (w, x, y, z).
    * Camera space is right-handed with the camera looking down -z and y up.
      Depth is ``-z_cam``; pixel coordinates are ``u = fx * x / d + cx`` and
      ``v = -fy * y / d + cy`` with pixel centers at integer coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidParameterError

# Real spherical-harmonic normalization constants (degrees 0..3).
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.4453057213202769,
    -0.5900435899266435,
)

DEFAULT_DILATION = 0.3
CULL_MARGIN = 1.3


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def num_sh_coeffs(degree: int) -> int:
    if not 0 <= degree <= 3:
        raise InvalidParameterError(f"SH degree must be in 0..3, got {degree}")
    return (degree + 1) ** 2


def sh_degree_from_count(count: int) -> int:
    degree = int(round(np.sqrt(count))) - 1
    if (degree + 1) ** 2 != count or not 0 <= degree <= 3:
        raise InvalidParameterError(f"{count} is not a valid SH coefficient count")
    return degree


@dataclass
class Gaussian3D:
    """One scene primitive in its unconstrained (optimizable) parameterization."""

    mean: np.ndarray
    rot: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh: np.ndarray  # (K, C)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.opacity_logit = float(self.opacity_logit)
        sh = np.asarray(self.sh, dtype=np.float64)
        if sh.ndim == 1:
            sh = sh[:, None]
        sh_degree_from_count(sh.shape[0])
        self.sh = sh

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_count(self.sh.shape[0])


@dataclass
class GaussianScene:
    """Struct-of-arrays container for a set of Gaussians.

    Arrays are shaped ``means (G, 3)``, ``rots (G, 4)``, ``log_scales (G, 3)``,
    ``opacity_logits (G,)`` and ``sh (G, K, C)``.
    """

    means: np.ndarray
    rots: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray

    def __post_init__(self):
        self.means = np.ascontiguousarray(self.means, dtype=np.float64).reshape(-1, 3)
        g = self.means.shape[0]
        self.rots = np.ascontiguousarray(self.rots, dtype=np.float64).reshape(g, 4)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64).reshape(g, 3)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float64).reshape(g)
        sh = np.ascontiguousarray(self.sh, dtype=np.float64)
        if sh.ndim != 3 or sh.shape[0] != g:
            raise InvalidParameterError(f"sh must be (G, K, C), got {sh.shape}")
        sh_degree_from_count(sh.shape[1])
        if sh.shape[2] not in (1, 3):
            raise InvalidParameterError("channel count must be 1 or 3")
        self.sh = sh

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.means[i], self.rots[i], self.log_scales[i],
                          self.opacity_logits[i], self.sh[i])

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_count(self.sh.shape[1])

    @property
    def channels(self) -> int:
        return self.sh.shape[2]

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian3D]) -> "GaussianScene":
        if not gaussians:
            raise InvalidParameterError("need at least one Gaussian")
        return cls(
            means=np.stack([g.mean for g in gaussians]),
            rots=np.stack([g.rot for g in gaussians]),
            log_scales=np.stack([g.log_scale for g in gaussians]),
            opacity_logits=np.array([g.opacity_logit for g in gaussians]),
            sh=np.stack([g.sh for g in gaussians]),
        )

    def params(self) -> dict:
        """Parameter groups keyed the way the optimizer names them (views, not copies)."""
        return {
            "mean": self.means,
            "rot": self.rots,
            "scale": self.log_scales,
            "opacity": self.opacity_logits,
            "sh": self.sh,
        }

    @classmethod
    def from_params(cls, params: dict) -> "GaussianScene":
        return cls(params["mean"], params["rot"], params["scale"], params["opacity"], params["sh"])

    def copy(self) -> "GaussianScene":
        return GaussianScene(self.means.copy(), self.rots.copy(), self.log_scales.copy(),
                             self.opacity_logits.copy(), self.sh.copy())

    def select(self, index) -> "GaussianScene":
        return GaussianScene(self.means[index], self.rots[index], self.log_scales[index],
                             self.opacity_logits[index], self.sh[index])

    def concat(self, other: "GaussianScene") -> "GaussianScene":
        return GaussianScene(
            np.concatenate([self.means, other.means]),
            np.concatenate([self.rots, other.rots]),
            np.concatenate([self.log_scales, other.log_scales]),
            np.concatenate([self.opacity_logits, other.opacity_logits]),
            np.concatenate([self.sh, other.sh]),
        )


@dataclass
class CameraView:
    """Pinhole camera with pixel-unit intrinsics and a rigid world-to-camera pose."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.world_to_camera = np.array(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        if self.width <= 0 or self.height <= 0:
            raise InvalidParameterError("image size must be positive")
        if not self.near > 0 or not self.far > self.near:
            raise InvalidParameterError("need 0 < near < far")
        rot = self.world_to_camera[:3, :3]
        if np.abs(rot @ rot.T - np.eye(3)).max() >= 1e-6:
            raise InvalidParameterError("world_to_camera rotation block is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up, width: int, height: int, fov_y_deg: float,
                near: float = 0.01, far: float = 100.0) -> "CameraView":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        true_up = np.cross(right, forward)
        # Rows are the camera axes in world coordinates; camera looks down -z.
        rot = np.stack([right, true_up, -forward])
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye
        f = 0.5 * height / np.tan(np.radians(fov_y_deg) / 2)
        return cls(width, height, f, f, (width - 1) / 2, (height - 1) / 2, w2c, near, far)


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float
    source_index: int


# ---------------------------------------------------------------------------
# Rotation / covariance
# ---------------------------------------------------------------------------

def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions (normalized here)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return rot.reshape(q.shape[:-1] + (3, 3))


def rotmat_grad_to_quat(q_unit: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. R(q) back to the unit quaternion components."""
    w, x, y, z = q_unit[..., 0], q_unit[..., 1], q_unit[..., 2], q_unit[..., 3]
    g = d_rot
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([dw, dx, dy, dz], axis=-1)


def build_covariance(q, s) -> np.ndarray:
    """Sigma = R S S^T R^T for quaternion ``q`` and positive scale vector ``s``.

    Works on single inputs ``(4,), (3,)`` or batches ``(G, 4), (G, 3)``.
    """
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(s))):
        raise InvalidParameterError("covariance inputs must be finite")
    if np.any(s <= 0):
        raise InvalidParameterError("scales must be positive")
    if np.any(np.linalg.norm(q, axis=-1) == 0):
        raise InvalidParameterError("quaternion has zero norm")
    m = quat_to_rotmat(q) * s[..., None, :]
    cov = m @ np.swapaxes(m, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


# ---------------------------------------------------------------------------
# Spherical harmonics
# ---------------------------------------------------------------------------

def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values, shape ``(..., (degree+1)**2)``."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(out, axis=-1)


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Derivative of every basis function w.r.t. (x, y, z): shape ``(..., K, 3)``."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        c = SH_C1
        rows += [(zero, -c + zero, zero), (zero, zero, c + zero), (-c + zero, zero, zero)]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        c = SH_C2
        rows += [
            (c[0] * y, c[0] * x, zero),
            (zero, c[1] * z, c[1] * y),
            (-2 * c[2] * x, -2 * c[2] * y, 4 * c[2] * z),
            (c[3] * z, zero, c[3] * x),
            (2 * c[4] * x, -2 * c[4] * y, zero),
        ]
    if degree >= 3:
        c = SH_C3
        rows += [
            (6 * c[0] * x * y, c[0] * (3 * xx - 3 * yy), zero),
            (c[1] * y * z, c[1] * x * z, c[1] * x * y),
            (-2 * c[2] * x * y, c[2] * (4 * zz - xx - 3 * yy), 8 * c[2] * y * z),
            (-6 * c[3] * x * z, -6 * c[3] * y * z, c[3] * (6 * zz - 3 * xx - 3 * yy)),
            (c[4] * (4 * zz - 3 * xx - yy), -2 * c[4] * x * y, 8 * c[4] * x * z),
            (2 * c[5] * x * z, -2 * c[5] * y * z, c[5] * (xx - yy)),
            (c[6] * (3 * xx - 3 * yy), -6 * c[6] * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def eval_color(sh: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """View-dependent color from SH coefficients ``(K, C)`` (or ``(G, K, C)``).

    The DC convention adds 0.5, so all-zero coefficients give mid-gray; the
    result is clamped to [0, 1].
    """
    sh = np.asarray(sh, dtype=np.float64)
    degree = sh_degree_from_count(sh.shape[-2])
    basis = sh_basis(view_dir, degree)
    raw = np.einsum("...k,...kc->...c", basis, sh)
    return np.clip(raw + 0.5, 0.0, 1.0)


def rgb_to_sh_dc(rgb) -> np.ndarray:
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

@dataclass
class Projection:
    """Screen-space splats for one view plus the intermediates the backward pass needs.

    Rows with ``visible == False`` were culled and must be ignored by the
    rasterizer; their other fields are finite placeholders.
    """

    mean2d: np.ndarray      # (G, 2)
    cov2d: np.ndarray       # (G, 2, 2), dilation included
    depth: np.ndarray       # (G,)
    color: np.ndarray       # (G, C)
    opacity: np.ndarray     # (G,)
    visible: np.ndarray     # (G,) bool
    # intermediates
    cam_points: np.ndarray
    jac: np.ndarray         # (G, 2, 3)
    cov3d: np.ndarray
    rotmats: np.ndarray
    quat_unit: np.ndarray
    quat_norm: np.ndarray
    scales: np.ndarray
    view_dirs: np.ndarray
    view_dist: np.ndarray
    sh_coeffs: np.ndarray   # (G, K, C), the scene's coefficients
    sh_basis: np.ndarray    # (G, K)
    color_active: np.ndarray  # (G, C) bool, False where the [0,1] clamp is engaged
    view: CameraView
    dilation: float

    def __len__(self) -> int:
        return self.mean2d.shape[0]

    def splat(self, i: int) -> Optional[Splat2D]:
        if not self.visible[i]:
            return None
        return Splat2D(self.mean2d[i].copy(), self.cov2d[i].copy(), float(self.depth[i]),
                       self.color[i].copy(), float(self.opacity[i]), i)


def projection_jacobian(cam_points: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """d(u, v)/d(x, y, z) of the pinhole map at camera-space points ``(G, 3)``."""
    x, y, z = cam_points[..., 0], cam_points[..., 1], cam_points[..., 2]
    d = -z
    d = np.where(np.abs(d) < 1e-12, 1e-12, d)
    zero = np.zeros_like(x)
    return np.stack([
        np.stack([fx / d, zero, fx * x / (d * d)], axis=-1),
        np.stack([zero, -fy / d, -fy * y / (d * d)], axis=-1),
    ], axis=-2)


def project_gaussians(scene: GaussianScene, view: CameraView,
                      dilation: float = DEFAULT_DILATION) -> Projection:
    """Project every Gaussian of ``scene`` into ``view``.

    Covariance is mapped with the EWA first-order approximation
    ``J W Sigma W^T J^T`` and then dilated by ``dilation * I``. Gaussians
    behind the near plane, beyond the far plane, or whose projected mean falls
    outside 1.3x the screen extent are culled.
    """
    if dilation < 0:
        raise InvalidParameterError("dilation must be >= 0")
    rot_c = view.rotation
    cam = scene.means @ rot_c.T + view.translation
    depth = -cam[:, 2]
    in_depth = (depth >= view.near) & (depth <= view.far)
    safe = np.where(in_depth, depth, 1.0)
    mean2d = np.stack([view.fx * cam[:, 0] / safe + view.cx,
                       -view.fy * cam[:, 1] / safe + view.cy], axis=-1)
    half_w, half_h = view.width / 2.0, view.height / 2.0
    on_screen = ((np.abs(mean2d[:, 0] - (half_w - 0.5)) <= CULL_MARGIN * half_w)
                 & (np.abs(mean2d[:, 1] - (half_h - 0.5)) <= CULL_MARGIN * half_h))
    visible = in_depth & on_screen

    qnorm = np.linalg.norm(scene.rots, axis=-1)
    qunit = scene.rots / qnorm[:, None]
    rotmats = quat_to_rotmat(qunit)
    scales = np.exp(scene.log_scales)
    m = rotmats * scales[:, None, :]
    cov3d = m @ np.swapaxes(m, -1, -2)

    cam_safe = np.where(in_depth[:, None], cam, np.array([0.0, 0.0, -1.0]))
    jac = projection_jacobian(cam_safe, view.fx, view.fy)
    t = jac @ rot_c
    cov2d = t @ cov3d @ np.swapaxes(t, -1, -2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, -1, -2)) + dilation * np.eye(2)

    offset = scene.means - view.center
    dist = np.linalg.norm(offset, axis=-1)
    dist = np.where(dist > 0, dist, 1.0)
    dirs = offset / dist[:, None]
    basis = sh_basis(dirs, scene.sh_degree)
    raw = np.einsum("gk,gkc->gc", basis, scene.sh) + 0.5
    color = np.clip(raw, 0.0, 1.0)
    active = (raw > 0.0) & (raw < 1.0)

    return Projection(
        mean2d=mean2d, cov2d=cov2d, depth=depth, color=color,
        opacity=sigmoid(scene.opacity_logits), visible=visible,
        cam_points=cam, jac=jac, cov3d=cov3d, rotmats=rotmats, quat_unit=qunit,
        quat_norm=qnorm, scales=scales, view_dirs=dirs, view_dist=dist,
        sh_coeffs=scene.sh, sh_basis=basis, color_active=active, view=view, dilation=float(dilation),
    )


def project_gaussian(g: Gaussian3D, view: CameraView,
                     dilation: float = DEFAULT_DILATION) -> Optional[Splat2D]:
    """Single-Gaussian projection; returns ``None`` when culled."""
    return project_gaussians(GaussianScene.from_gaussians([g]), view, dilation).splat(0)
