import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import if_cumsum_spikes, if_stepwise
from spikesplat.errors import InvalidParameterError
from spikesplat.spike_core import (
    AccumulatorState,
    NoiseConfig,
    NonUniformityMap,
    SpikeStream,
    Surrogate,
    calibrate_nonuniformity,
    estimate_phase,
    if_step,
    initial_accumulator,
    simulate_stream,
    snl_backward,
    snl_forward,
    tfp_reconstruct,
)

# if_step

def test_if_step_exact_threshold():
    s, nxt = if_step(AccumulatorState(np.zeros((2, 3))), np.ones((2, 3)))
    assert s.all() and not nxt.A.any()


def test_if_step_subthreshold():
    s, nxt = if_step(AccumulatorState(np.full((1, 1), 0.6)), np.full((1, 1), 0.3))
    assert s[0, 0] == 0 and nxt.A[0, 0] == pytest.approx(0.9)


def test_if_step_sequence():
    st_ = AccumulatorState(np.zeros((1, 1)))
    fired = []
    for _ in range(5):
        s, st_ = if_step(st_, np.full((1, 1), 0.4))
        fired.append(int(s[0, 0]))
    assert fired == list(if_stepwise([0.4] * 5, 0.0, 1.0)) == [0, 0, 1, 0, 1]


def test_if_step_clamps_negative_and_counts():
    s, nxt = if_step(AccumulatorState(np.full((1, 2), 0.5)), np.array([[-0.2, 0.1]]))
    assert nxt.clamped_inputs == 1
    np.testing.assert_allclose(nxt.A, [[0.5, 0.6]])


def test_if_step_folds_large_input():
    s, nxt = if_step(AccumulatorState(np.zeros((1, 1))), np.full((1, 1), 2.5))
    assert s[0, 0] == 1 and nxt.A[0, 0] == pytest.approx(0.5)


def test_if_step_rejects_non_finite():
    with pytest.raises(InvalidParameterError):
        if_step(AccumulatorState(np.zeros((1, 1))), np.full((1, 1), np.nan))


@given(arrays(np.float64, (6, 3), elements=st.floats(0, 3)), st.floats(0.1, 2.0))
def test_accumulator_stays_in_range(inputs, omega):
    st_ = AccumulatorState(np.zeros(3), omega)
    for x in inputs:
        _, st_ = if_step(st_, x)
        assert np.all(st_.A >= 0) and np.all(st_.A < omega)


# simulate_stream

def test_half_intensity_gives_128_spikes():
    s = simulate_stream(np.full((3, 4), 0.5), 256, 1.0, NoiseConfig.noiseless(), None, "zero")
    assert np.all(s.counts() == 128)


def test_zero_light_zero_stream():
    s = simulate_stream(np.zeros((4, 4)), 64, 1.0, NoiseConfig(photon_gain=100.0, seed=3))
    assert not s.bits.any()


def test_same_seed_bit_identical():
    cfg = NoiseConfig(photon_gain=500.0, dark_rate=1e-3, seed=11)
    img = np.random.default_rng(0).uniform(size=(8, 9))
    assert simulate_stream(img, 100, 1.0, cfg) == simulate_stream(img, 100, 1.0, cfg)
    other = NoiseConfig(photon_gain=500.0, dark_rate=1e-3, seed=12)
    assert simulate_stream(img, 100, 1.0, cfg) != simulate_stream(img, 100, 1.0, other)


@given(st.floats(0.0, 1.0), st.floats(0.25, 2.0), st.integers(1, 300), st.floats(0, 0.999))
def test_constant_input_matches_cumsum_oracle(L, omega, n, frac):
    L = min(L, omega)
    a0 = frac * omega
    s = simulate_stream(np.full((1, 1), L), n, omega, None, None, np.full((1, 1), a0))
    assert np.array_equal(s.to_dense()[0, 0], if_cumsum_spikes(L, a0, omega, n))


@given(arrays(np.float64, 40, elements=st.floats(0, 2.5)), st.floats(0, 0.999))
def test_varying_input_matches_stepwise_oracle(inputs, frac):
    s = simulate_stream(inputs[None, None, :], 40, 1.0, None, None, np.full((1, 1), frac))
    assert np.array_equal(s.to_dense()[0, 0], if_stepwise(inputs, frac, 1.0))


@given(st.floats(0, 1), st.integers(1, 512))
def test_firing_rate_law(L, n):
    s = simulate_stream(np.full((1, 1), L), n, 1.0, None, None, "zero")
    assert s.counts()[0, 0] == np.floor(np.float64(n) * L) or abs(n * L - round(n * L)) < 1e-9
    rnd = simulate_stream(np.full((1, 64), L), n, 1.0, NoiseConfig(seed=5), None, "seeded-uniform")
    assert set(np.unique(rnd.counts())) <= {np.floor(n * L), np.ceil(n * L)}


def test_rate_increases_with_intensity():
    grid = np.linspace(0, 1, 41)
    s = simulate_stream(grid[None, :], 4096, 1.0, None, None, "zero")
    assert np.all(np.diff(s.counts()[0]) > 0)


def test_eta_and_light_scale_scale_input():
    a = simulate_stream(np.full((1, 1), 0.2), 100, 1.0, NoiseConfig(eta=2.0), None, "zero")
    b = simulate_stream(np.full((1, 1), 0.2), 100, 1.0, NoiseConfig(light_scale=2.0), None, "zero")
    assert a.counts()[0, 0] == b.counts()[0, 0] == 40


def test_rnu_scales_response():
    rnu = NonUniformityMap(np.array([[1.0, 0.5]]))
    s = simulate_stream(np.full((1, 2), 0.25), 100, 1.0, None, rnu, "zero")
    np.testing.assert_array_equal(s.counts(), [[25, 50]])


@pytest.mark.parametrize("kwargs", [dict(photon_gain=0.0), dict(dark_rate=-1.0), dict(rnu_sigma=0.6)])
def test_noise_config_validation(kwargs):
    with pytest.raises(InvalidParameterError):
        NoiseConfig(**kwargs)


def test_bad_a0():
    with pytest.raises(InvalidParameterError):
        simulate_stream(np.zeros((1, 1)), 4, 1.0, None, None, np.full((1, 1), 1.0))
    with pytest.raises(InvalidParameterError):
        initial_accumulator((2, 2), 1.0, "bogus")


def test_shot_noise_mean_rate():
    s = simulate_stream(np.full((32, 32), 0.3), 256, 1.0, NoiseConfig(photon_gain=100.0, seed=1))
    assert tfp_reconstruct(s).mean() == pytest.approx(0.3, abs=0.01)


# SpikeStream

@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 12), st.integers(0, 2 ** 31 - 1))
def test_pack_roundtrip(h, w, n, seed):
    dense = np.random.default_rng(seed).integers(0, 2, (h, w, n)).astype(np.uint8)
    s = SpikeStream.from_dense(dense)
    assert s.bits.shape == (n, -(-h * w // 8))
    assert np.array_equal(s.to_dense(), dense)
    assert np.array_equal(SpikeStream.from_dense(s.to_dense()).bits, s.bits)


def test_stream_rejects_non_binary_and_bad_shape():
    with pytest.raises(InvalidParameterError):
        SpikeStream.from_dense(np.full((1, 1, 1), 2))
    with pytest.raises(InvalidParameterError):
        SpikeStream(2, 2, 3, np.zeros((3, 2), np.uint8))


# calibration

def test_uniform_calibration_is_flat():
    streams = [simulate_stream(np.full((8, 8), 0.8), 256, 1.0, NoiseConfig(photon_gain=1000.0, seed=s))
               for s in range(8)]
    nu = calibrate_nonuniformity(streams)
    assert np.abs(nu.R - 1.0).max() < 3 / np.sqrt(256 * 8) * 2
    assert nu.R[nu.reference_pixel] == 1.0


def test_double_sensitivity_halves_ratio():
    true = NonUniformityMap(np.ones((4, 4)))
    true.R[1, 2] = 0.5
    streams = [simulate_stream(np.full((4, 4), 0.3), 512, 1.0, NoiseConfig(seed=s), true) for s in range(4)]
    nu = calibrate_nonuniformity(streams)
    assert nu.R[1, 2] == pytest.approx(0.5, abs=0.01)


def test_dead_pixel_flagged():
    dense = np.ones((2, 2, 8), np.uint8)
    dense[0, 1] = 0
    nu = calibrate_nonuniformity([SpikeStream.from_dense(dense)])
    assert nu.dead[0, 1] and np.isinf(nu.R[0, 1])
    assert np.all(nu.response[nu.dead] == 0)


def test_reference_tie_breaks_to_first_pixel():
    nu = calibrate_nonuniformity([SpikeStream.from_dense(np.ones((3, 3, 4), np.uint8))])
    assert nu.reference_pixel == (0, 0)


def test_empty_calibration():
    with pytest.raises(InvalidParameterError):
        calibrate_nonuniformity([])


def test_synthesized_map_reference_is_one():
    nu = NonUniformityMap.synthesize(10, 12, 0.1, 4)
    assert abs(nu.R[nu.reference_pixel] - 1.0) < 1e-6 and np.all(nu.R > 0)


# spike neuron layer

@given(arrays(np.float64, (3, 4), elements=st.floats(0, 1)), st.integers(0, 2 ** 31 - 1))
def test_snl_matches_noiseless_simulation(img, seed):
    rng = np.random.default_rng(seed)
    rnu = NonUniformityMap.synthesize(3, 4, 0.1, rng)
    a0 = rng.uniform(0, 1, (3, 4))
    stream, tape = snl_forward(img, rnu, 1.0, 64, a0)
    assert stream == simulate_stream(img, 64, 1.0, None, rnu, a0)
    assert tape.window == 64


def test_snl_zero_input():
    a0 = np.full((2, 2), 0.3)
    stream, tape = snl_forward(np.zeros((2, 2)), None, 1.0, 10, a0)
    assert not stream.bits.any()
    assert np.all(tape.V == 0.3)


def test_snl_single_spike_at_last_step():
    n = 37
    stream, _ = snl_forward(np.full((1, 1), 1.0 / n), NonUniformityMap.uniform(1, 1), 1.0, n, np.zeros((1, 1)))
    d = stream.to_dense()[0, 0]
    assert d.sum() == 1 and d[-1] == 1


def test_snl_shape_mismatch():
    with pytest.raises(InvalidParameterError):
        snl_forward(np.zeros((2, 2)), NonUniformityMap.uniform(2, 3), 1.0, 4, np.zeros((2, 2)))


def test_snl_backward_zero_upstream():
    _, tape = snl_forward(np.full((2, 2), 0.4), None, 1.0, 8, np.zeros((2, 2)))
    assert not snl_backward(tape, np.zeros((2, 2, 8))).any()


def test_snl_backward_single_step():
    rnu = NonUniformityMap(np.array([[0.8]]))
    _, tape = snl_forward(np.full((1, 1), 0.5), rnu, 1.0, 1, np.full((1, 1), 0.4))
    # V = 0.4 + 0.5 / 0.8 lies in the window |V - 1| <= 0.5
    g = snl_backward(tape, np.full((1, 1, 1), 3.0), Surrogate(width=0.5))
    assert g[0, 0] == pytest.approx(3.0 * (1 / 0.8) / (2 * 0.5))


def test_surrogate_locality_and_mass():
    v = np.linspace(-3, 5, 80001)
    for kind in ("rectangular", "fast-sigmoid"):
        d = Surrogate(kind, 0.3).derivative(v, 1.0)
        if kind == "rectangular":
            assert not d[np.abs(v - 1.0) > 0.3].any()
        assert np.all(d >= 0)
    assert np.trapezoid(Surrogate("rectangular", 0.3).derivative(v, 1.0), v) == pytest.approx(1.0, abs=1e-3)


def test_surrogate_validation():
    with pytest.raises(InvalidParameterError):
        Surrogate("step")
    with pytest.raises(InvalidParameterError):
        Surrogate(width=0.0)


@pytest.mark.parametrize("level", [0.1, 0.3, 0.5, 0.7, 0.9])
def test_surrogate_gradient_tracks_expected_count(level):
    # stochastic FD over an A0 ensemble vs the surrogate gradient of the spike count
    n, pixels, eps = 64, 4000, 0.02
    a0 = np.random.default_rng(1).uniform(0, 1, (1, pixels))

    def mean_count(x):
        return snl_forward(np.full((1, pixels), x), None, 1.0, n, a0)[0].counts().mean()

    fd = (mean_count(level + eps) - mean_count(level - eps)) / (2 * eps)
    _, tape = snl_forward(np.full((1, pixels), level), None, 1.0, n, a0)
    g = snl_backward(tape, np.ones((1, pixels, n))).mean()
    assert np.sign(g) == np.sign(fd)
    assert 0.5 <= g / fd <= 2.0


def test_reset_gradient_flag_changes_sum():
    _, tape = snl_forward(np.full((1, 1), 0.7), None, 1.0, 16, np.zeros((1, 1)))
    up = np.random.default_rng(0).normal(size=(1, 1, 16))
    a = snl_backward(tape, up, Surrogate())
    b = snl_backward(tape, up, Surrogate(reset_grad=True))
    assert a.shape == b.shape and not np.allclose(a, b)


def test_reset_gradient_single_step_equals_detached():
    _, tape = snl_forward(np.full((1, 1), 0.7), None, 1.0, 1, np.full((1, 1), 0.5))
    up = np.full((1, 1, 1), 2.0)
    assert snl_backward(tape, up, Surrogate(reset_grad=True)) == snl_backward(tape, up, Surrogate())


# TFP

def test_tfp_all_ones():
    assert np.all(tfp_reconstruct(SpikeStream.from_dense(np.ones((2, 3, 10), np.uint8))) == 1.0)


def test_tfp_empty():
    s = SpikeStream.from_dense(np.zeros((2, 3, 0), np.uint8))
    assert not tfp_reconstruct(s).any()


@given(arrays(np.float64, (4, 4), elements=st.floats(0, 1)), st.integers(1, 400))
def test_tfp_bound(img, n):
    s = simulate_stream(img, n, 1.0, NoiseConfig(seed=2))
    assert np.abs(tfp_reconstruct(s) - img).max() <= 1.0 / n + 1e-12


# phase estimation

def test_estimate_phase_noiseless():
    rng = np.random.default_rng(0)
    img = rng.uniform(0.05, 0.95, (16, 16))
    a0 = rng.uniform(0, 1, (16, 16))
    s = simulate_stream(img, 256, 1.0, None, None, a0)
    est = estimate_phase(s)
    err = np.abs(est - a0)
    err = np.minimum(err, 1 - err)
    assert np.median(err) < 0.02
    assert np.all((est >= 0) & (est < 1))
    # the fitted phase reproduces the stream almost everywhere
    again = simulate_stream(img, 256, 1.0, None, None, est)
    assert np.mean(again.frames() == s.frames()) > 0.99
