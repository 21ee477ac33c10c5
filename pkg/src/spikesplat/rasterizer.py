"""Tile-based alpha compositing of screen-space splats and its reverse-mode gradient.

Compositing constants follow common splatting practice: per-splat alpha is
clamped to 0.99, contributions below 1/255 are skipped, a pixel stops
accumulating once transmittance would drop below 1e-4, and each splat's
support is truncated at its 3-sigma ellipse (the same ellipse used for
binning, so the tiled result does not depend on the tile size).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numba
import numpy as np

from .errors import InvalidParameterError
from .gaussian_field import Projection, Splat2D, rotmat_grad_to_quat, sh_basis_grad

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
SIGMA_CUTOFF_SQ = 9.0
DET_MIN = 1e-12
DEFAULT_TILE = 16


@dataclass
class SplatSet:
    """Struct-of-arrays batch of 2D splats for one view."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    valid: np.ndarray
    source_index: np.ndarray

    def __len__(self) -> int:
        return self.mean2d.shape[0]

    @property
    def channels(self) -> int:
        return self.color.shape[1]

    @classmethod
    def from_projection(cls, proj: Projection) -> "SplatSet":
        n = len(proj)
        return cls(proj.mean2d, proj.cov2d, proj.depth, proj.color, proj.opacity,
                   proj.visible.copy(), np.arange(n))

    @classmethod
    def from_list(cls, splats: Sequence[Splat2D]) -> "SplatSet":
        if not splats:
            return cls(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0), np.zeros((0, 1)),
                       np.zeros(0), np.zeros(0, bool), np.zeros(0, np.int64))
        return cls(
            mean2d=np.array([s.mean2d for s in splats], dtype=np.float64),
            cov2d=np.array([s.cov2d for s in splats], dtype=np.float64),
            depth=np.array([s.depth for s in splats], dtype=np.float64),
            color=np.array([np.atleast_1d(s.color) for s in splats], dtype=np.float64),
            opacity=np.array([s.opacity for s in splats], dtype=np.float64),
            valid=np.ones(len(splats), bool),
            source_index=np.array([s.source_index for s in splats], dtype=np.int64),
        )


@dataclass
class TileBins:
    """Per-tile depth-sorted splat lists stored CSR-style."""

    tile_size: int
    tiles_x: int
    tiles_y: int
    offsets: np.ndarray
    indices: np.ndarray
    sorted_order: np.ndarray
    conic: np.ndarray
    skipped_singular: int

    def tile_list(self, tx: int, ty: int) -> np.ndarray:
        t = ty * self.tiles_x + tx
        return self.indices[self.offsets[t]:self.offsets[t + 1]]


@dataclass
class RenderOutput:
    image: np.ndarray
    final_transmittance: np.ndarray
    contrib_count: np.ndarray
    sorted_order: np.ndarray
    bins: TileBins
    skipped_singular: int


@dataclass
class SplatGradients:
    """Gradients per splat. ``d_cov2d`` is the symmetric matrix gradient (dL = <G, dSigma>)."""

    d_mean2d: np.ndarray
    d_cov2d: np.ndarray
    d_color: np.ndarray
    d_opacity: np.ndarray


# ---------------------------------------------------------------------------
# Binning
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _ellipse_rect_min(mx, my, a, b, c, x0, x1, y0, y1):
    # min over the rectangle of the Mahalanobis form a dx^2 + 2b dx dy + c dy^2
    if x0 <= mx <= x1 and y0 <= my <= y1:
        return 0.0
    best = np.inf
    for k in range(2):
        dx = (x0 if k == 0 else x1) - mx
        dy = -b * dx / c
        dy = min(max(dy, y0 - my), y1 - my)
        v = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        if v < best:
            best = v
        dy = (y0 if k == 0 else y1) - my
        dx = -b * dy / a
        dx = min(max(dx, x0 - mx), x1 - mx)
        v = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        if v < best:
            best = v
    return best


@numba.njit(cache=True)
def _bin_pass(order, mean2d, cov2d, conic, tile_size, tiles_x, width, height,
              counts, indices, fill, write):
    for k in range(order.shape[0]):
        i = order[k]
        mx = mean2d[i, 0]
        my = mean2d[i, 1]
        rx = 3.0 * np.sqrt(cov2d[i, 0, 0])
        ry = 3.0 * np.sqrt(cov2d[i, 1, 1])
        px0 = max(0, int(np.ceil(mx - rx)))
        px1 = min(width - 1, int(np.floor(mx + rx)))
        py0 = max(0, int(np.ceil(my - ry)))
        py1 = min(height - 1, int(np.floor(my + ry)))
        if px0 > px1 or py0 > py1:
            continue
        for ty in range(py0 // tile_size, py1 // tile_size + 1):
            y0 = ty * tile_size
            y1 = min(y0 + tile_size - 1, height - 1)
            for tx in range(px0 // tile_size, px1 // tile_size + 1):
                x0 = tx * tile_size
                x1 = min(x0 + tile_size - 1, width - 1)
                d = _ellipse_rect_min(mx, my, conic[i, 0], conic[i, 1], conic[i, 2],
                                      x0, x1, y0, y1)
                if d <= SIGMA_CUTOFF_SQ:
                    t = ty * tiles_x + tx
                    if write:
                        indices[fill[t]] = i
                        fill[t] += 1
                    else:
                        counts[t] += 1


@numba.njit(cache=True)
def _bin(order, mean2d, cov2d, conic, tile_size, tiles_x, tiles_y, width, height):
    ntiles = tiles_x * tiles_y
    counts = np.zeros(ntiles, np.int64)
    dummy = np.zeros(0, np.int64)
    _bin_pass(order, mean2d, cov2d, conic, tile_size, tiles_x, width, height,
              counts, dummy, dummy, False)
    offsets = np.zeros(ntiles + 1, np.int64)
    for t in range(ntiles):
        offsets[t + 1] = offsets[t] + counts[t]
    indices = np.empty(offsets[ntiles], np.int64)
    fill = offsets[:-1].copy()
    _bin_pass(order, mean2d, cov2d, conic, tile_size, tiles_x, width, height,
              counts, indices, fill, True)
    return offsets, indices


def conic_of(cov2d: np.ndarray):
    """Inverse 2x2 covariances as (a, b, c) with a validity mask on the determinant."""
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    ok = (det > DET_MIN) & (cov2d[:, 0, 0] + cov2d[:, 1, 1] > 0)
    safe = np.where(ok, det, 1.0)
    conic = np.stack([cov2d[:, 1, 1] / safe, -cov2d[:, 0, 1] / safe, cov2d[:, 0, 0] / safe], axis=-1)
    return np.ascontiguousarray(conic), ok


def depth_order(splats: SplatSet) -> np.ndarray:
    """Indices of valid splats sorted by depth, ties broken by source index."""
    idx = np.flatnonzero(splats.valid)
    keys = np.lexsort((splats.source_index[idx], splats.depth[idx]))
    return idx[keys]


def sort_and_bin(splats: SplatSet, height: int, width: int,
                 tile_size: int = DEFAULT_TILE) -> TileBins:
    """Assign splats to every tile their 3-sigma ellipse touches, in depth order.

    Tiles cover pixel-center rectangles; a splat is listed for a tile when the
    minimum Mahalanobis distance from its mean to that rectangle is at most 3.
    Splats with a (near-)singular covariance are dropped and counted.
    """
    if tile_size <= 0:
        raise InvalidParameterError("tile_size must be positive")
    conic, ok = conic_of(splats.cov2d) if len(splats) else (np.zeros((0, 3)), np.zeros(0, bool))
    skipped = int(np.count_nonzero(splats.valid & ~ok))
    usable = SplatSet(splats.mean2d, splats.cov2d, splats.depth, splats.color,
                      splats.opacity, splats.valid & ok, splats.source_index)
    order = depth_order(usable)
    tiles_x = -(-width // tile_size)
    tiles_y = -(-height // tile_size)
    offsets, indices = _bin(order, np.ascontiguousarray(splats.mean2d, dtype=np.float64),
                            np.ascontiguousarray(splats.cov2d, dtype=np.float64), conic,
                            tile_size, tiles_x, tiles_y, width, height)
    return TileBins(tile_size, tiles_x, tiles_y, offsets, indices, order, conic, skipped)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _forward(offsets, indices, tiles_x, tiles_y, tile_size, height, width,
             mean2d, conic, opacity, color, image, final_t, n_contrib):
    nch = color.shape[1]
    for t in range(tiles_x * tiles_y):
        tx = t % tiles_x
        ty = t // tiles_x
        start = offsets[t]
        end = offsets[t + 1]
        for py in range(ty * tile_size, min((ty + 1) * tile_size, height)):
            for px in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                T = 1.0
                count = 0
                for k in range(start, end):
                    i = indices[k]
                    dx = px - mean2d[i, 0]
                    dy = py - mean2d[i, 1]
                    q = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
                    if q > SIGMA_CUTOFF_SQ:
                        continue
                    alpha = min(ALPHA_MAX, opacity[i] * np.exp(-0.5 * q))
                    if alpha < ALPHA_MIN:
                        continue
                    test_t = T * (1.0 - alpha)
                    if test_t < T_MIN:
                        break
                    w = alpha * T
                    for ch in range(nch):
                        image[py, px, ch] += color[i, ch] * w
                    T = test_t
                    count += 1
                final_t[py, px] = T
                n_contrib[py, px] = count


def rasterize_forward(bins: TileBins, splats: SplatSet, height: int, width: int) -> RenderOutput:
    """Front-to-back composite every pixel from its tile's sorted splat list."""
    nch = splats.color.shape[1] if splats.color.ndim == 2 else 1
    image = np.zeros((height, width, nch))
    final_t = np.ones((height, width))
    n_contrib = np.zeros((height, width), np.int32)
    if len(splats):
        _forward(bins.offsets, bins.indices, bins.tiles_x, bins.tiles_y, bins.tile_size,
                 height, width, np.ascontiguousarray(splats.mean2d, dtype=np.float64), bins.conic,
                 np.ascontiguousarray(splats.opacity, dtype=np.float64),
                 np.ascontiguousarray(splats.color, dtype=np.float64).reshape(len(splats), nch),
                 image, final_t, n_contrib)
    return RenderOutput(image, final_t, n_contrib, bins.sorted_order, bins, bins.skipped_singular)


def render_splats(splats: SplatSet, height: int, width: int,
                  tile_size: int = DEFAULT_TILE) -> RenderOutput:
    return rasterize_forward(sort_and_bin(splats, height, width, tile_size), splats, height, width)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _backward_tile(t, offsets, indices, tiles_x, tile_size, height, width,
                   mean2d, conic, opacity, color, dl_dimg,
                   g_mean, g_conic, g_color, g_opac, buf_i, buf_a, buf_t, buf_g):
    nch = color.shape[1]
    tx = t % tiles_x
    ty = t // tiles_x
    start = offsets[t]
    end = offsets[t + 1]
    acc = np.zeros(nch)
    for py in range(ty * tile_size, min((ty + 1) * tile_size, height)):
        for px in range(tx * tile_size, min((tx + 1) * tile_size, width)):
            # replay the forward pass, keeping only what the reverse sweep needs
            T = 1.0
            n = 0
            for k in range(start, end):
                i = indices[k]
                dx = px - mean2d[i, 0]
                dy = py - mean2d[i, 1]
                q = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
                if q > SIGMA_CUTOFF_SQ:
                    continue
                gval = np.exp(-0.5 * q)
                alpha = min(ALPHA_MAX, opacity[i] * gval)
                if alpha < ALPHA_MIN:
                    continue
                test_t = T * (1.0 - alpha)
                if test_t < T_MIN:
                    break
                buf_i[n] = i
                buf_a[n] = alpha
                buf_t[n] = T
                buf_g[n] = gval
                n += 1
                T = test_t
            for ch in range(nch):
                acc[ch] = 0.0
            for m in range(n - 1, -1, -1):
                i = buf_i[m]
                alpha = buf_a[m]
                Ti = buf_t[m]
                w = alpha * Ti
                dl_dalpha = 0.0
                for ch in range(nch):
                    g = dl_dimg[py, px, ch]
                    g_color[i, ch] += g * w
                    dl_dalpha += g * (color[i, ch] * Ti - acc[ch] / (1.0 - alpha))
                    acc[ch] += color[i, ch] * w
                if opacity[i] * buf_g[m] >= ALPHA_MAX:
                    continue
                g_opac[i] += dl_dalpha * buf_g[m]
                dl_dpower = dl_dalpha * alpha
                dx = px - mean2d[i, 0]
                dy = py - mean2d[i, 1]
                a = conic[i, 0]
                b = conic[i, 1]
                c = conic[i, 2]
                g_mean[i, 0] += dl_dpower * (a * dx + b * dy)
                g_mean[i, 1] += dl_dpower * (b * dx + c * dy)
                g_conic[i, 0] += dl_dpower * (-0.5 * dx * dx)
                g_conic[i, 1] += dl_dpower * (-dx * dy)
                g_conic[i, 2] += dl_dpower * (-0.5 * dy * dy)


@numba.njit(cache=True)
def _backward_serial(offsets, indices, tiles_x, tiles_y, tile_size, height, width,
                     mean2d, conic, opacity, color, dl_dimg, g_mean, g_conic, g_color, g_opac):
    maxlen = 1
    for t in range(tiles_x * tiles_y):
        maxlen = max(maxlen, offsets[t + 1] - offsets[t])
    buf_i = np.empty(maxlen, np.int64)
    buf_a = np.empty(maxlen)
    buf_t = np.empty(maxlen)
    buf_g = np.empty(maxlen)
    for t in range(tiles_x * tiles_y):
        _backward_tile(t, offsets, indices, tiles_x, tile_size, height, width, mean2d, conic,
                       opacity, color, dl_dimg, g_mean, g_conic, g_color, g_opac,
                       buf_i, buf_a, buf_t, buf_g)


@numba.njit(parallel=True, cache=True)
def _backward_parallel(offsets, indices, tiles_x, tiles_y, tile_size, height, width,
                       mean2d, conic, opacity, color, dl_dimg, g_mean, g_conic, g_color, g_opac):
    # per-tile gradient buffers, reduced afterwards in tile order
    ntiles = tiles_x * tiles_y
    p = mean2d.shape[0]
    nch = color.shape[1]
    maxlen = 1
    for t in range(ntiles):
        maxlen = max(maxlen, offsets[t + 1] - offsets[t])
    bm = np.zeros((ntiles, p, 2))
    bk = np.zeros((ntiles, p, 3))
    bc = np.zeros((ntiles, p, nch))
    bo = np.zeros((ntiles, p))
    for t in numba.prange(ntiles):
        _backward_tile(t, offsets, indices, tiles_x, tile_size, height, width, mean2d, conic,
                       opacity, color, dl_dimg, bm[t], bk[t], bc[t], bo[t],
                       np.empty(maxlen, np.int64), np.empty(maxlen), np.empty(maxlen),
                       np.empty(maxlen))
    for t in range(ntiles):
        g_mean += bm[t]
        g_conic += bk[t]
        g_color += bc[t]
        g_opac += bo[t]


def conic_grad_to_cov(conic: np.ndarray, g_conic: np.ndarray) -> np.ndarray:
    """Map gradients w.r.t. (a, b, c) of the inverse covariance to a matrix gradient on Sigma'."""
    q = np.empty((conic.shape[0], 2, 2))
    q[:, 0, 0] = conic[:, 0]
    q[:, 0, 1] = q[:, 1, 0] = conic[:, 1]
    q[:, 1, 1] = conic[:, 2]
    gq = np.empty_like(q)
    gq[:, 0, 0] = g_conic[:, 0]
    gq[:, 0, 1] = gq[:, 1, 0] = 0.5 * g_conic[:, 1]
    gq[:, 1, 1] = g_conic[:, 2]
    return -q @ gq @ q


def rasterize_backward(render: RenderOutput, splats: SplatSet, dl_dimage: np.ndarray,
                       deterministic: bool = True) -> SplatGradients:
    """Reverse-mode gradients of the composited image w.r.t. every splat's parameters.

    The per-pixel forward sweep is replayed to recover alphas and
    transmittances, then walked back-to-front. Splats whose alpha hit the 0.99
    clamp receive color gradients only.
    """
    h, w, nch = render.image.shape
    dl_dimage = np.asarray(dl_dimage, dtype=np.float64)
    if dl_dimage.ndim == 2:
        dl_dimage = dl_dimage[:, :, None]
    if dl_dimage.shape != (h, w, nch):
        raise InvalidParameterError(
            f"dL/dimage shape {dl_dimage.shape} does not match render {(h, w, nch)}")
    p = len(splats)
    g_mean = np.zeros((p, 2))
    g_conic = np.zeros((p, 3))
    g_color = np.zeros((p, nch))
    g_opac = np.zeros(p)
    if p:
        bins = render.bins
        kernel = _backward_serial if deterministic else _backward_parallel
        kernel(bins.offsets, bins.indices, bins.tiles_x, bins.tiles_y, bins.tile_size, h, w,
               np.ascontiguousarray(splats.mean2d, dtype=np.float64), bins.conic,
               np.ascontiguousarray(splats.opacity, dtype=np.float64),
               np.ascontiguousarray(splats.color, dtype=np.float64).reshape(p, nch),
               np.ascontiguousarray(dl_dimage), g_mean, g_conic, g_color, g_opac)
    d_cov = conic_grad_to_cov(render.bins.conic, g_conic) if p else np.zeros((0, 2, 2))
    return SplatGradients(g_mean, d_cov, g_color, g_opac)


# ---------------------------------------------------------------------------
# Chain to 3D parameters
# ---------------------------------------------------------------------------

@dataclass
class GaussianGradients:
    mean: np.ndarray
    rot: np.ndarray
    scale: np.ndarray       # w.r.t. log-scale
    opacity: np.ndarray     # w.r.t. opacity logit
    sh: np.ndarray

    def as_dict(self) -> dict:
        return {"mean": self.mean, "rot": self.rot, "scale": self.scale,
                "opacity": self.opacity, "sh": self.sh}


def chain_to_3d(grads: SplatGradients, proj: Projection,
                mask: Optional[np.ndarray] = None) -> GaussianGradients:
    """Back-propagate splat gradients through projection, covariance build, SH and sigmoid."""
    view = proj.view
    vis = proj.visible if mask is None else mask
    vis_f = vis.astype(np.float64)
    d_mean2d = grads.d_mean2d * vis_f[:, None]
    g2 = grads.d_cov2d * vis_f[:, None, None]
    g2 = 0.5 * (g2 + np.swapaxes(g2, -1, -2))
    d_color = grads.d_color * vis_f[:, None]

    rot_c = view.rotation
    jac = proj.jac
    t = jac @ rot_c                                   # (G, 2, 3)
    cov3d = proj.cov3d
    d_cov3d = np.swapaxes(t, -1, -2) @ g2 @ t         # (G, 3, 3)
    d_t = 2.0 * g2 @ t @ cov3d
    d_jac = d_t @ rot_c.T

    # J entries as functions of the camera-space point
    cam = proj.cam_points
    x, y = cam[:, 0], cam[:, 1]
    d = np.where(vis, -cam[:, 2], 1.0)
    fx, fy = view.fx, view.fy
    d_cam = np.einsum("gij,gi->gj", jac, d_mean2d)
    d_cam[:, 0] += d_jac[:, 0, 2] * fx / d**2
    d_cam[:, 1] += d_jac[:, 1, 2] * (-fy / d**2)
    d_depth = (d_jac[:, 0, 0] * (-fx / d**2)
               + d_jac[:, 0, 2] * (-2.0 * fx * x / d**3)
               + d_jac[:, 1, 1] * (fy / d**2)
               + d_jac[:, 1, 2] * (2.0 * fy * y / d**3))
    d_cam[:, 2] += -d_depth
    d_cam *= vis_f[:, None]
    d_mean = d_cam @ rot_c

    # covariance = M M^T with M = R diag(s)
    rot = proj.rotmats
    s = proj.scales
    m = rot * s[:, None, :]
    d_m = 2.0 * d_cov3d @ m
    d_s = np.einsum("gij,gij->gj", rot, d_m)
    d_logs = d_s * s
    d_rot = d_m * s[:, None, :]
    d_qunit = rotmat_grad_to_quat(proj.quat_unit, d_rot)
    qu = proj.quat_unit
    d_q = (d_qunit - qu * np.sum(qu * d_qunit, axis=-1, keepdims=True)) / proj.quat_norm[:, None]

    # color = clamp(SH(dir) . coeffs + 0.5)
    d_raw = d_color * proj.color_active
    d_sh = np.einsum("gk,gc->gkc", proj.sh_basis, d_raw)
    degree = int(round(np.sqrt(proj.sh_basis.shape[1]))) - 1
    if degree > 0:
        sh = proj.sh_coeffs
        basis_grad = sh_basis_grad(proj.view_dirs, degree)      # (G, K, 3)
        d_dir = np.einsum("gc,gkc,gkj->gj", d_raw, sh, basis_grad)
        dirs = proj.view_dirs
        d_off = (d_dir - dirs * np.sum(dirs * d_dir, axis=-1, keepdims=True)) / proj.view_dist[:, None]
        d_mean = d_mean + d_off * vis_f[:, None]

    sig = proj.opacity
    d_logit = grads.d_opacity * vis_f * sig * (1.0 - sig)
    return GaussianGradients(d_mean, d_q, d_logs, d_logit, d_sh)


# ---------------------------------------------------------------------------
# Convenience wrappers over a full scene
# ---------------------------------------------------------------------------

@dataclass
class SceneRender:
    proj: Projection
    splats: SplatSet
    output: RenderOutput

    @property
    def image(self) -> np.ndarray:
        return self.output.image


def render_scene(scene, view, dilation: float = 0.3, tile_size: int = DEFAULT_TILE) -> SceneRender:
    from .gaussian_field import project_gaussians

    proj = project_gaussians(scene, view, dilation)
    splats = SplatSet.from_projection(proj)
    out = render_splats(splats, view.height, view.width, tile_size)
    return SceneRender(proj, splats, out)


def backward_scene(render: SceneRender, dl_dimage: np.ndarray,
                   deterministic: bool = True) -> tuple[GaussianGradients, SplatGradients]:
    g2d = rasterize_backward(render.output, render.splats, dl_dimage, deterministic)
    return chain_to_3d(g2d, render.proj), g2d
