"""Spike rendering loss, its ablation variants, and image metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from numba import njit

from .errors import InvalidParameterError
from .spike_core import SpikeStream, tfp_reconstruct

LOSS_MODES = ("full_spike", "l1_only", "intensity", "no_noise_embed")
SSIM_SIGMA = 1.5


@dataclass
class LossConfig:
    mode: str = "full_spike"
    lam: float = 0.2
    ssim_window: int = 11
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise InvalidParameterError(f"unknown loss mode {self.mode!r}; expected one of {LOSS_MODES}")
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidParameterError(f"lambda must be in [0, 1], got {self.lam}")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise InvalidParameterError("ssim_window must be odd and >= 3")

    @property
    def effective_lam(self) -> float:
        return 0.0 if self.mode == "l1_only" else self.lam


# ---------------------------------------------------------------------------
# Windowed SSIM
# ---------------------------------------------------------------------------

def gaussian_kernel(size: int, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    k = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def fit_window(window: int, height: int, width: int) -> int:
    """Largest odd window not exceeding the requested size or the frame."""
    limit = min(height, width)
    if limit % 2 == 0:
        limit -= 1
    return max(1, min(window, limit))


@njit(cache=True, fastmath=True)
def _vpass(src, k, out):
    # zero-padded 'same' filter along axis 0
    h, w = src.shape
    r = k.shape[0] // 2
    for i in range(h):
        for j in range(w):
            out[i, j] = 0.0
        for ii in range(max(0, i - r), min(h, i + r + 1)):
            wt = k[ii - i + r]
            for j in range(w):
                out[i, j] += wt * src[ii, j]


@njit(cache=True)
def _transpose(src, out):
    h, w = src.shape
    for i in range(h):
        for j in range(w):
            out[j, i] = src[i, j]


@njit(cache=True)
def _blur_t(src, k, tmp, tmp_t, out_t):
    # blur both axes; src is (H, W), out_t receives the result transposed (W, H).
    # Calling it on a transposed frame therefore returns the normal layout.
    _vpass(src, k, tmp)
    _transpose(tmp, tmp_t)
    _vpass(tmp_t, k, out_t)


@njit(cache=True)
def _blur_stack(x, k):
    n, h, w = x.shape
    out = np.empty_like(x)
    tmp = np.empty((h, w))
    tmp_t = np.empty((w, h))
    out_t = np.empty((w, h))
    for t in range(n):
        _blur_t(x[t], k, tmp, tmp_t, out_t)
        _transpose(out_t, out[t])
    return out


def _blur(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' Gaussian filter over the last two axes (self-adjoint)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    flat = x.reshape((-1,) + x.shape[-2:])
    return _blur_stack(flat, np.ascontiguousarray(kernel, dtype=np.float64)).reshape(x.shape)


@dataclass
class SsimReference:
    """Filtered statistics of the fixed (ground-truth) side of an SSIM comparison.

    ``mu`` and ``e2`` are stored per frame transposed, the layout the fused
    kernel works in.
    """

    y: np.ndarray
    mu: np.ndarray
    e2: np.ndarray
    kernel: np.ndarray

    @classmethod
    def build(cls, y: np.ndarray, window: int = 11) -> "SsimReference":
        y = np.ascontiguousarray(y, dtype=np.float64)
        k = gaussian_kernel(fit_window(window, y.shape[-2], y.shape[-1]))
        flip = lambda a: np.ascontiguousarray(np.swapaxes(a, -1, -2))
        return cls(y, flip(_blur(y, k)), flip(_blur(y * y, k)), k)


@njit(cache=True, fastmath=True)
def _ssim_kernel(x, y, mu2, e22, k, c1, c2, grad, per_frame, dx):
    n, h, w = x.shape
    npix = h * w
    tmp = np.empty((h, w))
    tmp_t = np.empty((w, h))
    buf = np.empty((h, w))
    mu1 = np.empty((w, h))
    e11 = np.empty((w, h))
    e12 = np.empty((w, h))
    g_mu = np.empty((w, h))
    g_11 = np.empty((w, h))
    g_12 = np.empty((w, h))
    b_mu = np.empty((h, w))
    b_11 = np.empty((h, w))
    b_12 = np.empty((h, w))
    for t in range(n):
        xt = x[t]
        yt = y[t]
        _blur_t(xt, k, tmp, tmp_t, mu1)
        for i in range(h):
            for j in range(w):
                buf[i, j] = xt[i, j] * xt[i, j]
        _blur_t(buf, k, tmp, tmp_t, e11)
        for i in range(h):
            for j in range(w):
                buf[i, j] = xt[i, j] * yt[i, j]
        _blur_t(buf, k, tmp, tmp_t, e12)
        total = 0.0
        # statistics are in transposed (W, H) layout from here on
        for i in range(w):
            for j in range(h):
                m1 = mu1[i, j]
                m2 = mu2[t, i, j]
                a1 = 2.0 * m1 * m2 + c1
                a2 = 2.0 * (e12[i, j] - m1 * m2) + c2
                b1 = m1 * m1 + m2 * m2 + c1
                b2 = (e11[i, j] - m1 * m1) + (e22[t, i, j] - m2 * m2) + c2
                inv = 1.0 / (b1 * b2)
                s = a1 * a2 * inv
                total += s
                g_mu[i, j] = (2.0 * m2 * a2 - 2.0 * m2 * a1) * inv - s * (2.0 * m1 / b1 - 2.0 * m1 / b2)
                g_11[i, j] = -s / b2
                g_12[i, j] = 2.0 * a1 * inv
        per_frame[t] = total / npix
        if grad:
            same = True
            for i in range(h):
                for j in range(w):
                    if xt[i, j] != yt[i, j]:
                        same = False
            if same:
                # SSIM is maximal at x == y, so the gradient is exactly zero there
                for i in range(h):
                    for j in range(w):
                        dx[t, i, j] = 0.0
                continue
            _blur_t(g_mu, k, tmp_t, tmp, b_mu)
            _blur_t(g_11, k, tmp_t, tmp, b_11)
            _blur_t(g_12, k, tmp_t, tmp, b_12)
            for i in range(h):
                for j in range(w):
                    dx[t, i, j] = (b_mu[i, j] + 2.0 * xt[i, j] * b_11[i, j] + yt[i, j] * b_12[i, j]) / npix


def ssim_frames(x: np.ndarray, y: Union[np.ndarray, SsimReference], window: int = 11,
                c1: float = 0.01 ** 2, c2: float = 0.03 ** 2, grad: bool = False):
    """Mean SSIM of each frame of ``x`` against ``y`` (arrays shaped ``(..., H, W)``).

    Returns ``(ssim_per_frame, dssim_dx)``; the gradient is of
    ``sum(ssim_per_frame)`` and is ``None`` unless ``grad``.
    """
    x = np.asarray(x, dtype=np.float64)
    ref = y if isinstance(y, SsimReference) else SsimReference.build(y, window)
    if ref.y.shape != x.shape:
        raise InvalidParameterError(f"shape mismatch {x.shape} vs {ref.y.shape}")
    h, w = x.shape[-2:]
    flat = lambda a, shape: np.ascontiguousarray(a, dtype=np.float64).reshape((-1,) + shape)
    xf = flat(x, (h, w))
    per_frame = np.empty(xf.shape[0])
    dx = np.empty_like(xf) if grad else np.empty((0, 0, 0))
    _ssim_kernel(xf, flat(ref.y, (h, w)), flat(ref.mu, (w, h)), flat(ref.e2, (w, h)), ref.kernel,
                 float(c1), float(c2), grad, per_frame, dx)
    per_frame = per_frame.reshape(x.shape[:-2])
    return per_frame, (dx.reshape(x.shape) if grad else None)


# ---------------------------------------------------------------------------
# Spike-stream losses
# ---------------------------------------------------------------------------

def _as_frames(a, time_major: bool) -> np.ndarray:
    if isinstance(a, SpikeStream):
        return a.frames().astype(np.float64)
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 3:
        raise InvalidParameterError("streams must be 3-D")
    return a if time_major else np.moveaxis(a, -1, 0)


def _restore(g: np.ndarray, time_major: bool) -> np.ndarray:
    return g if time_major else np.moveaxis(g, 0, -1)


def spike_l1(pred, gt, time_major: bool = False):
    """Mean absolute difference over all H*W*N entries and its gradient w.r.t. ``pred``."""
    p = _as_frames(pred, time_major)
    g = _as_frames(gt, time_major)
    if p.shape != g.shape:
        raise InvalidParameterError(f"shape mismatch {p.shape} vs {g.shape}")
    diff = p - g
    loss = float(np.abs(diff).mean())
    return loss, _restore(np.sign(diff) / diff.size, time_major)


def spike_dssim(pred, gt, window: int = 11, c1: float = 0.01 ** 2, c2: float = 0.03 ** 2,
                time_major: bool = False, reference: Optional[SsimReference] = None):
    """D-SSIM over the N frames of a stream: mean of (1 - SSIM_t) / 2, with gradient."""
    p = _as_frames(pred, time_major)
    ref = reference if reference is not None else SsimReference.build(_as_frames(gt, time_major), window)
    per_frame, d = ssim_frames(p, ref, window, c1, c2, grad=True)
    n = p.shape[0]
    loss = float(np.mean((1.0 - per_frame) / 2.0))
    return loss, _restore(-d / (2.0 * n), time_major)


def _combine(l1, dl1, ds, dds, lam):
    return (1 - lam) * l1 + lam * ds, (1 - lam) * dl1 + lam * dds


def rendering_loss(pred, gt, cfg: LossConfig, time_major: bool = False,
                   reference: Optional[SsimReference] = None, return_terms: bool = False):
    """Loss between a predicted and a ground-truth stream (or image, in ``intensity`` mode).

    ``full_spike``/``no_noise_embed``: ``(1 - lam) * L1 + lam * D-SSIM`` on spike
    streams (noise embedding is switched off upstream for ``no_noise_embed``).
    ``l1_only``: the L1 term alone. ``intensity``: the same combination applied
    to a rendered ``(H, W)`` image against the TFP reconstruction of ``gt``.
    """
    if cfg.mode == "intensity":
        img = np.asarray(pred, dtype=np.float64)
        target = tfp_reconstruct(gt) if isinstance(gt, SpikeStream) else np.asarray(gt, dtype=np.float64)
        if img.shape != target.shape:
            raise InvalidParameterError(f"shape mismatch {img.shape} vs {target.shape}")
        l1, dl1 = spike_l1(img[None], target[None], time_major=True)
        ds, dds = spike_dssim(img[None], target[None], cfg.ssim_window, cfg.ssim_c1, cfg.ssim_c2,
                              time_major=True, reference=reference)
        loss, grad = _combine(l1, dl1[0], ds, dds[0], cfg.lam)
    else:
        lam = cfg.effective_lam
        l1, dl1 = spike_l1(pred, gt, time_major)
        if lam > 0:
            ds, dds = spike_dssim(pred, gt, cfg.ssim_window, cfg.ssim_c1, cfg.ssim_c2,
                                  time_major, reference)
            loss, grad = _combine(l1, dl1, ds, dds, lam)
        else:
            ds = float("nan")
            loss, grad = l1, dl1
    if return_terms:
        return loss, grad, {"l1": l1, "dssim": ds}
    return loss, grad


# ---------------------------------------------------------------------------
# Image metrics
# ---------------------------------------------------------------------------

def _as_hwc(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[:, :, None] if img.ndim == 2 else img


def psnr(img_a, img_b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; ``inf`` when identical."""
    a, b = _as_hwc(img_a), _as_hwc(img_b)
    if a.shape != b.shape:
        raise InvalidParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def ssim_image(img_a, img_b, window: int = 11) -> float:
    """SSIM per channel (Gaussian window, dynamic range 1), averaged over channels."""
    a, b = _as_hwc(img_a), _as_hwc(img_b)
    if a.shape != b.shape:
        raise InvalidParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    per_channel, _ = ssim_frames(np.moveaxis(a, -1, 0), np.moveaxis(b, -1, 0), window)
    return float(per_channel.mean())
