"""Procedural scenes and orbit rigs so the whole pipeline runs without external data."""

from __future__ import annotations

from dataclasses import replace
from typing import List, Optional

import numpy as np

from .errors import InvalidParameterError
from .gaussian_field import CameraView, GaussianScene, logit, rgb_to_sh_dc
from .rasterizer import render_scene
from .spike_core import (
    NoiseConfig,
    NonUniformityMap,
    SpikeStream,
    calibrate_nonuniformity,
    simulate_stream,
)

FIXTURES = ("blobs3", "checker-sphere")
ORBIT_RADIUS = 4.0
FOV_Y_DEG = 40.0
CALIBRATION_LEVEL = 0.8
CALIBRATION_STREAMS = 16


def blobs3_scene() -> GaussianScene:
    """Three anisotropic gray Gaussians around the origin (view-independent color)."""
    means = np.array([[-0.55, 0.1, 0.0], [0.5, -0.2, 0.25], [0.05, 0.45, -0.4]])
    half = np.sqrt(0.5)
    rots = np.array([[1.0, 0.0, 0.0, 0.0],
                     [half, 0.0, 0.0, half],
                     [np.cos(0.4), np.sin(0.4), 0.0, 0.0]])
    scales = np.array([[0.45, 0.2, 0.25], [0.4, 0.15, 0.3], [0.3, 0.3, 0.12]])
    opacity = np.array([0.9, 0.85, 0.8])
    gray = np.array([[0.85], [0.55], [0.7]])
    return GaussianScene(means, rots, np.log(scales), logit(opacity),
                         rgb_to_sh_dc(gray)[:, None, :])


def orbit_views(count: int, width: int = 64, height: int = 64, radius: float = ORBIT_RADIUS,
                fov_y_deg: float = FOV_Y_DEG, phase: float = 0.0,
                elevations=(20.0, -10.0, 35.0)) -> List[CameraView]:
    """Cameras on a sphere around the origin, all looking at it.

    Azimuth steps evenly (shifted by ``phase`` of a step); elevation cycles
    through ``elevations`` in degrees.
    """
    if count <= 0:
        raise InvalidParameterError("view count must be positive")
    views = []
    for k in range(count):
        az = 2 * np.pi * (k + phase) / count
        el = np.deg2rad(elevations[k % len(elevations)])
        eye = radius * np.array([np.cos(el) * np.cos(az), np.sin(el), np.cos(el) * np.sin(az)])
        views.append(CameraView.look_at(eye, np.zeros(3), np.array([0.0, 1.0, 0.0]),
                                        width, height, fov_y_deg))
    return views


def _checker_sphere_image(view: CameraView, squares: int = 8) -> np.ndarray:
    # analytic ray cast of a unit sphere with a latitude/longitude checker
    v, u = np.mgrid[0:view.height, 0:view.width].astype(np.float64)
    d_cam = np.stack([(u - view.cx) / view.fx, -(v - view.cy) / view.fy, -np.ones_like(u)], -1)
    d = d_cam @ view.rotation
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = view.center
    b = d @ o
    disc = b * b - (o @ o - 1.0)
    hit = disc >= 0
    t = -b - np.sqrt(np.where(hit, disc, 0.0))
    p = o + t[..., None] * d
    lon = np.arctan2(p[..., 2], p[..., 0])
    lat = np.arcsin(np.clip(p[..., 1], -1, 1))
    cell = (np.floor(lon / np.pi * squares / 2) + np.floor(lat / np.pi * squares)).astype(int)
    tex = np.where(cell % 2 == 0, 0.8, 0.25)
    shade = 0.6 + 0.4 * np.clip(-(p * d).sum(-1), 0, 1)
    return np.where(hit & (t > 0), tex * shade, 0.0)


def render_fixture(name: str, view: CameraView) -> np.ndarray:
    """Ground-truth ``(H, W)`` intensity of a built-in fixture."""
    if name == "blobs3":
        return np.clip(render_scene(blobs3_scene(), view).image[:, :, 0], 0.0, 1.0)
    if name == "checker-sphere":
        return _checker_sphere_image(view)
    raise InvalidParameterError(f"unknown fixture {name!r}; expected one of {FIXTURES}")


def fixture_bbox(name: str) -> np.ndarray:
    return np.array([[-1.2, -1.2, -1.2], [1.2, 1.2, 1.2]])


def view_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def simulate_views(images, window: int, threshold: float, noise: NoiseConfig,
                   rnu: Optional[NonUniformityMap], timestep_hz: float = 20000.0,
                   stream_offset: int = 0) -> List[SpikeStream]:
    return [simulate_stream(img, window, threshold, replace(noise, seed=view_seed(noise.seed, stream_offset + i)),
                            rnu, "seeded-uniform", timestep_hz)
            for i, img in enumerate(images)]


def calibrate_sensor(shape, window: int, threshold: float, noise: NoiseConfig,
                     true_rnu: Optional[NonUniformityMap], streams: int = CALIBRATION_STREAMS,
                     level: float = CALIBRATION_LEVEL) -> NonUniformityMap:
    """Estimate ``R`` the way a bench calibration would: uniform light, many windows."""
    flat = np.full(shape, level)
    cal = simulate_views([flat] * streams, window, threshold, noise, true_rnu,
                         stream_offset=1_000_000)
    return calibrate_nonuniformity(cal)


def simulate_dataset(fixture: str = "blobs3", views: int = 20, test_views: int = 5,
                     width: int = 64, height: int = 64, window: int = 256,
                     threshold: float = 1.0, noise: Optional[NoiseConfig] = None,
                     calibrate: bool = True):
    """Build a training dataset for a procedural fixture.

    Returns a :class:`~spikesplat.trainer.SceneDataset` whose ``rnu`` is the
    calibrated estimate (or uniform when ``calibrate`` is off); the map used to
    synthesize the streams is attached as ``true_rnu``.
    """
    from .trainer import SceneDataset

    noise = noise or NoiseConfig.noiseless()
    train = orbit_views(views, width, height)
    test = orbit_views(test_views, width, height, phase=0.5, elevations=(10.0, 25.0, -5.0)) \
        if test_views > 0 else []
    gt = [render_fixture(fixture, v) for v in train]
    gt_test = [render_fixture(fixture, v) for v in test]
    true_rnu = None
    if noise.rnu_sigma > 0:
        true_rnu = NonUniformityMap.synthesize(height, width, noise.rnu_sigma,
                                               np.random.default_rng([noise.seed, 7]))
    streams = simulate_views(gt, window, threshold, noise, true_rnu)
    if calibrate:
        rnu = calibrate_sensor((height, width), window, threshold, noise, true_rnu)
    else:
        rnu = NonUniformityMap.uniform(height, width)
    return SceneDataset(train, streams, gt_images=gt, rnu=rnu, test_views=test,
                        test_images=gt_test, bbox=fixture_bbox(fixture), true_rnu=true_rnu)
