import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_fd, rel_error
from spikesplat.errors import InvalidParameterError
from spikesplat.gaussian_field import (
    CameraView,
    Gaussian3D,
    GaussianScene,
    build_covariance,
    eval_color,
    logit,
    project_gaussian,
    project_gaussians,
    projection_jacobian,
    quat_to_rotmat,
    rgb_to_sh_dc,
    sigmoid,
)

finite = st.floats(-3, 3, allow_nan=False)
quats = arrays(np.float64, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 1e-2)
scales = arrays(np.float64, 3, elements=st.floats(1e-3, 5.0))


def qmul(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def gaussian(mean, sigma=0.1, degree=0, opacity=0.5):
    k = (degree + 1) ** 2
    return Gaussian3D(mean, [1, 0, 0, 0], np.log([sigma] * 3), logit(opacity), np.zeros((k, 1)))


# build_covariance

def test_covariance_identity():
    np.testing.assert_allclose(build_covariance([1, 0, 0, 0], [1, 1, 1]), np.eye(3), atol=1e-15)


def test_covariance_diagonal_scale():
    np.testing.assert_allclose(build_covariance([1, 0, 0, 0], [2, 1, 1]), np.diag([4.0, 1, 1]), atol=1e-15)


def test_covariance_quarter_turn_about_z():
    h = np.sqrt(0.5)
    np.testing.assert_allclose(build_covariance([h, 0, 0, h], [2, 1, 1]), np.diag([1.0, 4, 1]), atol=1e-12)


@pytest.mark.parametrize("q, s", [
    ([1, 0, 0, 0], [np.nan, 1, 1]),
    ([np.inf, 0, 0, 0], [1, 1, 1]),
    ([1, 0, 0, 0], [0, 1, 1]),
    ([0, 0, 0, 0], [1, 1, 1]),
])
def test_covariance_rejects_bad_input(q, s):
    with pytest.raises(InvalidParameterError):
        build_covariance(q, s)


@given(quats, scales)
def test_covariance_symmetric_psd(q, s):
    cov = build_covariance(q, s)
    assert np.array_equal(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() >= -1e-9 * max(1.0, s.max() ** 2)


@given(quats, quats, scales)
def test_covariance_rotation_composition(q, q0, s):
    r0 = quat_to_rotmat(q0)
    lhs = build_covariance(qmul(q0, q), s)
    rhs = r0 @ build_covariance(q, s) @ r0.T
    np.testing.assert_allclose(lhs, rhs, atol=1e-9 * max(1.0, s.max() ** 2))


@given(quats)
def test_rotmat_orthonormal(q):
    r = quat_to_rotmat(q)
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


# project_gaussian

def test_on_axis_projection_covariance():
    f, z, sigma, dil = 50.0, 4.0, 0.2, 0.3
    view = CameraView(32, 32, f, f, 15.5, 15.5)
    sp = project_gaussian(gaussian([0, 0, -z], sigma), view, dil)
    np.testing.assert_allclose(sp.cov2d, (f * f * sigma * sigma / (z * z) + dil) * np.eye(2), rtol=1e-12)
    np.testing.assert_allclose(sp.mean2d, [15.5, 15.5])
    assert sp.depth == pytest.approx(z)


def test_behind_camera_is_culled():
    view = CameraView(32, 32, 50, 50, 15.5, 15.5)
    assert project_gaussian(gaussian([0, 0, 2.0]), view) is None
    assert project_gaussian(gaussian([0, 0, -0.001]), view) is None


def test_far_off_screen_is_culled():
    view = CameraView(32, 32, 50, 50, 15.5, 15.5)
    # 1.3x the half-extent beyond the image center
    assert project_gaussian(gaussian([2.0, 0, -1.0]), view) is None
    assert project_gaussian(gaussian([0.35, 0, -1.0]), view) is not None


def test_dilation_floor():
    view = CameraView(32, 32, 50, 50, 15.5, 15.5)
    sp = project_gaussian(gaussian([0, 0, -3.0], 1e-9), view, 0.3)
    np.testing.assert_allclose(sp.cov2d, 0.3 * np.eye(2), atol=1e-12)


def test_negative_dilation_rejected():
    view = CameraView(32, 32, 50, 50, 15.5, 15.5)
    with pytest.raises(InvalidParameterError):
        project_gaussian(gaussian([0, 0, -3.0]), view, -0.1)


def test_camera_validation():
    with pytest.raises(InvalidParameterError):
        CameraView(8, 8, 10, 10, 4, 4, np.diag([1.0, 1.0, 1.01, 1.0]))
    with pytest.raises(InvalidParameterError):
        CameraView(8, 8, 10, 10, 4, 4, near=0.0)
    with pytest.raises(InvalidParameterError):
        CameraView(8, 8, 10, 10, 4, 4, near=2.0, far=1.0)


def test_look_at_centers_target():
    view = CameraView.look_at([3, 1, 2], [0, 0, 0], [0, 1, 0], 31, 21, 45)
    sp = project_gaussian(gaussian([0, 0, 0]), view)
    np.testing.assert_allclose(sp.mean2d, [15.0, 10.0], atol=1e-12)
    np.testing.assert_allclose(view.center, [3, 1, 2], atol=1e-12)


def test_projection_jacobian_matches_fd():
    rng = np.random.default_rng(3)
    fx, fy = 40.0, 55.0
    for _ in range(20):
        p = rng.normal(size=3)
        p[2] = -rng.uniform(0.5, 5)

        def proj(v):
            d = -v[2]
            return np.array([fx * v[0] / d, -fy * v[1] / d])

        num = np.zeros((2, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1e-6
            num[:, k] = (proj(p + e) - proj(p - e)) / 2e-6
        assert rel_error(projection_jacobian(p[None], fx, fy)[0], num) < 1e-5


def test_projected_mean_matches_fd_of_pixel_map():
    rng = np.random.default_rng(4)
    view = CameraView.look_at([0.5, 0.3, 3], [0, 0, 0], [0, 1, 0], 40, 30, 50)
    mean = rng.normal(scale=0.3, size=3)
    scene = GaussianScene(mean[None], [[1, 0, 0, 0]], np.log([[0.1] * 3]), [0.0], np.zeros((1, 1, 1)))
    proj = project_gaussians(scene, view)
    analytic = proj.jac[0] @ view.rotation
    m = scene.means
    out = np.zeros((2, 3))
    for r in range(2):
        out[r] = central_fd(lambda: project_gaussians(scene, view).mean2d[0, r], m)[0]
    assert rel_error(analytic, out) < 1e-5


@given(st.floats(0.2, 20.0), st.integers(0, 2 ** 31 - 1))
def test_scene_scale_invariance(k, seed):
    rng = np.random.default_rng(seed)
    g = 4
    scene = GaussianScene(rng.normal(scale=0.4, size=(g, 3)), rng.normal(size=(g, 4)),
                          np.log(rng.uniform(0.05, 0.3, (g, 3))), np.zeros(g), np.zeros((g, 1, 1)))
    view = CameraView.look_at([0, 0.5, 3], [0, 0, 0], [0, 1, 0], 32, 32, 50)
    scaled = scene.copy()
    scaled.means *= k
    scaled.log_scales += np.log(k)
    w2c = view.world_to_camera.copy()
    w2c[:3, 3] *= k
    sview = CameraView(view.width, view.height, view.fx, view.fy, view.cx, view.cy, w2c,
                       view.near * k, view.far * k)
    a = project_gaussians(scene, view)
    b = project_gaussians(scaled, sview)
    np.testing.assert_allclose(a.mean2d, b.mean2d, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(a.cov2d, b.cov2d, rtol=1e-9, atol=1e-9)
    assert np.array_equal(a.visible, b.visible)


# eval_color

def test_dc_only_color():
    sh = rgb_to_sh_dc([0.5])[None, :]
    for d in np.eye(3):
        assert eval_color(sh, d)[0] == pytest.approx(0.5)


def test_zero_coefficients_give_mid_gray():
    assert eval_color(np.zeros((4, 3)), np.array([0, 0, 1.0])) == pytest.approx([0.5] * 3)


@given(arrays(np.float64, 3, elements=st.floats(-1, 1)).filter(lambda v: np.linalg.norm(v) > 1e-3),
       st.integers(1, 3), st.floats(-0.3, 0.3))
def test_degree_one_band_is_odd(d, band, c):
    d = d / np.linalg.norm(d)
    sh = np.zeros((4, 1))
    sh[band, 0] = c
    lo = eval_color(sh, d)[0] - 0.5
    hi = eval_color(sh, -d)[0] - 0.5
    assert lo == pytest.approx(-hi, abs=1e-12)


def test_color_is_clamped():
    sh = np.zeros((1, 1))
    sh[0, 0] = 10.0
    assert eval_color(sh, np.array([0, 0, 1.0]))[0] == 1.0


@given(arrays(np.float64, 8, elements=st.floats(-30, 30)))
def test_activations_keep_invariants(x):
    p = sigmoid(x)
    assert np.all((p > 0) & (p < 1))
    assert np.all(np.exp(x) > 0)


def test_logit_inverts_sigmoid():
    p = np.linspace(0.01, 0.99, 17)
    np.testing.assert_allclose(sigmoid(logit(p)), p, rtol=1e-12)


def test_scene_roundtrip_and_select():
    rng = np.random.default_rng(0)
    scene = GaussianScene(rng.normal(size=(5, 3)), rng.normal(size=(5, 4)), rng.normal(size=(5, 3)),
                          rng.normal(size=5), rng.normal(size=(5, 4, 3)))
    again = GaussianScene.from_params(scene.copy().params())
    for k, v in scene.params().items():
        assert np.array_equal(v, again.params()[k])
    sub = scene.select([0, 3])
    assert len(sub) == 2 and np.array_equal(sub.means[1], scene.means[3])
    assert len(scene.concat(sub)) == 7
    g = scene[2]
    assert g.sh_degree == 1 and np.array_equal(g.mean, scene.means[2])


def test_scene_rejects_bad_sh():
    with pytest.raises(InvalidParameterError):
        GaussianScene(np.zeros((1, 3)), [[1, 0, 0, 0]], np.zeros((1, 3)), [0.0], np.zeros((1, 3, 1)))
    with pytest.raises(InvalidParameterError):
        GaussianScene(np.zeros((1, 3)), [[1, 0, 0, 0]], np.zeros((1, 3)), [0.0], np.zeros((1, 4, 2)))
