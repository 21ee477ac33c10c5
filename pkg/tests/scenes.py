"""Random scene generators shared by the unit and acceptance tests."""

import numpy as np

from spikesplat.gaussian_field import CameraView, GaussianScene, logit, rgb_to_sh_dc
from spikesplat.rasterizer import SplatSet


def random_splats(rng, n, height, width, channels=1, min_sigma=1.0, max_sigma=4.0,
                  opacity=(0.2, 0.85)):
    mean2d = np.stack([rng.uniform(0, width - 1, n), rng.uniform(0, height - 1, n)], -1)
    cov = np.zeros((n, 2, 2))
    for i in range(n):
        th = rng.uniform(0, np.pi)
        r = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        s = rng.uniform(min_sigma, max_sigma, 2)
        cov[i] = r @ np.diag(s * s) @ r.T
    return SplatSet(mean2d, cov, rng.uniform(1, 5, n), rng.uniform(0.05, 0.95, (n, channels)),
                    rng.uniform(*opacity, n), np.ones(n, bool), np.arange(n))


def random_view(rng, width=16, height=16, fov=50.0):
    eye = rng.normal(size=3)
    eye = 3.0 * eye / np.linalg.norm(eye)
    up = [0, 1, 0] if abs(eye[1]) < 2.9 else [1, 0, 0]
    return CameraView.look_at(eye, rng.normal(scale=0.05, size=3), up, width, height, fov)


def random_scene(rng, n, degree=1, channels=1, radius=0.5, scale=(0.08, 0.25), opacity=(0.2, 0.85)):
    k = (degree + 1) ** 2
    sh = 0.1 * rng.normal(size=(n, k, channels))
    sh[:, 0, :] = rgb_to_sh_dc(rng.uniform(0.2, 0.8, (n, channels)))
    return GaussianScene(
        rng.uniform(-radius, radius, (n, 3)),
        rng.normal(size=(n, 4)),
        np.log(rng.uniform(*scale, (n, 3))),
        logit(rng.uniform(*opacity, n)),
        sh,
    )
