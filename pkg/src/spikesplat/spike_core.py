"""Integrate-and-fire spike model: camera simulator and differentiable neuron layer.

Every pixel integrates its input, ``V = A + I``; it emits one spike when
``V >= threshold`` and subtracts the threshold (one spike per step at most,
any excess folds into the accumulator modulo the threshold).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numba
import numpy as np

from .errors import InvalidParameterError

A0_MODES = ("zero", "seeded-uniform")


# ---------------------------------------------------------------------------
# Data types
# ---------------------------------------------------------------------------

@dataclass
class SpikeStream:
    """Binary H x W x N stream, bit-packed one frame at a time.

    ``bits`` has shape ``(N, ceil(H*W/8))``; each frame is the row-major pixel
    sequence packed eight pixels per byte with the least significant bit first.
    """

    width: int
    height: int
    window: int
    bits: np.ndarray
    threshold: float = 1.0
    timestep_hz: float = 20000.0

    def __post_init__(self):
        self.bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        expected = (self.window, frame_bytes(self.height, self.width))
        if self.bits.shape != expected:
            raise InvalidParameterError(f"bit tensor shape {self.bits.shape} != {expected}")
        if not self.threshold > 0:
            raise InvalidParameterError("threshold must be positive")

    @classmethod
    def from_dense(cls, spikes: np.ndarray, threshold: float = 1.0,
                   timestep_hz: float = 20000.0, time_major: bool = False) -> "SpikeStream":
        """Pack a dense ``(H, W, N)`` array (or ``(N, H, W)`` with ``time_major``)."""
        spikes = np.asarray(spikes)
        frames = spikes if time_major else np.moveaxis(spikes, -1, 0)
        n, h, w = frames.shape
        if np.any((frames != 0) & (frames != 1)):
            raise InvalidParameterError("spike entries must be 0 or 1")
        flat = frames.reshape(n, h * w).astype(np.uint8)
        bits = np.packbits(flat, axis=1, bitorder="little")
        return cls(w, h, n, bits, threshold, timestep_hz)

    def frames(self) -> np.ndarray:
        """Dense ``(N, H, W)`` uint8 view of the stream."""
        flat = np.unpackbits(self.bits, axis=1, count=self.height * self.width, bitorder="little")
        return flat.reshape(self.window, self.height, self.width)

    def to_dense(self) -> np.ndarray:
        """Dense ``(H, W, N)`` uint8 array."""
        return np.moveaxis(self.frames(), 0, -1)

    def counts(self) -> np.ndarray:
        return self.frames().sum(axis=0, dtype=np.int64)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SpikeStream):
            return NotImplemented
        return (self.width == other.width and self.height == other.height
                and self.window == other.window and self.threshold == other.threshold
                and self.timestep_hz == other.timestep_hz
                and np.array_equal(self.bits, other.bits))


def frame_bytes(height: int, width: int) -> int:
    return -(-(height * width) // 8)


@dataclass
class AccumulatorState:
    A: np.ndarray
    threshold: float = 1.0
    clamped_inputs: int = 0

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        if not self.threshold > 0:
            raise InvalidParameterError("threshold must be positive")


@dataclass
class NoiseConfig:
    """Sensor noise parameters.

    ``photon_gain`` is the expected photon count at intensity 1 (``inf``
    disables shot noise). Dark current adds an exponential draw with mean
    ``dark_rate`` per step. ``rnu_sigma`` is the spread of per-pixel
    sensitivity used to synthesize a non-uniformity map. The effective input
    per step is ``eta * response * (L + shot + dark) / charge_ref``.
    """

    photon_gain: float = np.inf
    dark_rate: float = 0.0
    rnu_sigma: float = 0.0
    seed: int = 0
    eta: float = 1.0
    charge_ref: float = 1.0
    light_scale: float = 1.0

    def __post_init__(self):
        if not self.photon_gain > 0:
            raise InvalidParameterError("photon_gain must be > 0")
        if not self.dark_rate >= 0:
            raise InvalidParameterError("dark_rate must be >= 0")
        if not 0 <= self.rnu_sigma <= 0.5:
            raise InvalidParameterError("rnu_sigma must be in [0, 0.5]")
        if not (self.eta > 0 and self.charge_ref > 0 and self.light_scale > 0):
            raise InvalidParameterError("eta, charge_ref and light_scale must be positive")

    @classmethod
    def noiseless(cls, **kw) -> "NoiseConfig":
        return cls(photon_gain=np.inf, dark_rate=0.0, rnu_sigma=0.0, **kw)

    @property
    def is_noiseless(self) -> bool:
        return np.isinf(self.photon_gain) and self.dark_rate == 0


@dataclass
class NonUniformityMap:
    """Per-pixel response ratio ``R = r_ref / r`` relative to a reference pixel.

    A pixel twice as sensitive as the reference has ``R = 0.5``; its relative
    response (what multiplies incident light) is ``1 / R``. Dead pixels carry
    ``R = inf`` and respond with 0.
    """

    R: np.ndarray
    reference_pixel: tuple = (0, 0)
    dead: Optional[np.ndarray] = None

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        if self.R.ndim != 2:
            raise InvalidParameterError("R must be an H x W map")
        if np.any(~(self.R > 0)):
            raise InvalidParameterError("R must be positive")
        self.reference_pixel = tuple(int(v) for v in self.reference_pixel)
        if self.dead is None:
            self.dead = np.isinf(self.R)

    @property
    def shape(self) -> tuple:
        return self.R.shape

    @property
    def response(self) -> np.ndarray:
        return 1.0 / self.R

    @classmethod
    def uniform(cls, height: int, width: int) -> "NonUniformityMap":
        return cls(np.ones((height, width)), (0, 0))

    @classmethod
    def synthesize(cls, height: int, width: int, sigma: float,
                   rng: Union[int, np.random.Generator] = 0) -> "NonUniformityMap":
        """Random sensitivity field with relative spread ``sigma``, normalized to its reference pixel."""
        if not 0 <= sigma <= 0.5:
            raise InvalidParameterError("sigma must be in [0, 0.5]")
        rng = np.random.default_rng(rng)
        sens = np.clip(1.0 + sigma * rng.standard_normal((height, width)), 0.05, None)
        ref = _closest_to_mean(sens)
        R = sens[ref] / sens
        R[ref] = 1.0
        return cls(R, ref)


@dataclass
class NeuronTape:
    """Everything the reverse sweep of the spike neuron layer needs."""

    V: np.ndarray            # (N, H, W) membrane values A_{t-1} + I_in
    A0: np.ndarray           # (H, W)
    spikes: np.ndarray       # (N, H, W) uint8
    response: np.ndarray     # (H, W) d I_in / d I_hat
    threshold: float

    @property
    def window(self) -> int:
        return self.V.shape[0]


@dataclass
class Surrogate:
    """Stand-in derivative of the firing threshold.

    ``rectangular``: ``1/(2a)`` inside ``|V - threshold| <= a``, else 0.
    ``fast-sigmoid``: ``1 / (2a (1 + |V - threshold|/a)^2)``; both integrate to 1.
    """

    kind: str = "rectangular"
    width: Optional[float] = None   # a; defaults to threshold / 2
    reset_grad: bool = False

    def __post_init__(self):
        if self.kind not in ("rectangular", "fast-sigmoid"):
            raise InvalidParameterError(f"unknown surrogate kind {self.kind!r}")
        if self.width is not None and not self.width > 0:
            raise InvalidParameterError("surrogate width must be positive")

    def derivative(self, V: np.ndarray, threshold: float) -> np.ndarray:
        a = threshold / 2 if self.width is None else self.width
        x = np.abs(V - threshold)
        if self.kind == "rectangular":
            return np.where(x <= a, 1.0 / (2 * a), 0.0)
        return 1.0 / (2 * a * (1.0 + x / a) ** 2)


# ---------------------------------------------------------------------------
# Integrate-and-fire kernels
# ---------------------------------------------------------------------------

def _closest_to_mean(values: np.ndarray) -> tuple:
    flat = values.ravel()
    idx = int(np.argmin(np.abs(flat - flat.mean())))  # first index wins ties
    return tuple(int(v) for v in np.unravel_index(idx, values.shape))


@numba.njit(cache=True)
def _run_constant(inp, a0, omega, n, spikes, v_out, record):
    p_count = inp.shape[0]
    for p in range(p_count):
        a = a0[p]
        x = inp[p]
        if x <= omega:
            # closed form A0 + t x >= (k + 1) omega avoids drift from repeated addition
            k = 0
            for t in range(n):
                total = a0[p] + (t + 1) * x
                if record:
                    v_out[t, p] = total - k * omega
                if total >= (k + 1) * omega:
                    spikes[t, p] = 1
                    k += 1
                else:
                    spikes[t, p] = 0
            continue
        for t in range(n):
            v = a + x
            if record:
                v_out[t, p] = v
            if v >= omega:
                spikes[t, p] = 1
                a = v - omega
                if a >= omega:
                    a = a % omega
            else:
                spikes[t, p] = 0
                a = v
    return a


@numba.njit(cache=True)
def _run_varying(inp, a0, omega, spikes, a_out):
    n, p_count = inp.shape
    for p in range(p_count):
        a = a0[p]
        for t in range(n):
            v = a + inp[t, p]
            if v >= omega:
                spikes[t, p] = 1
                a = v - omega
                if a >= omega:
                    a = a % omega
            else:
                spikes[t, p] = 0
                a = v
        a_out[p] = a


def _check_finite(x: np.ndarray, what: str):
    if not np.all(np.isfinite(x)):
        raise InvalidParameterError(f"{what} must be finite")


def if_step(state: AccumulatorState, inp: np.ndarray):
    """Advance every pixel one readout step. Returns ``(spikes, next_state)``."""
    inp = np.asarray(inp, dtype=np.float64)
    _check_finite(inp, "input")
    if inp.shape != state.A.shape:
        raise InvalidParameterError(f"input shape {inp.shape} != state shape {state.A.shape}")
    negative = inp < 0
    inp = np.where(negative, 0.0, inp)
    omega = state.threshold
    v = state.A + inp
    spikes = v >= omega
    a = np.where(spikes, v - omega, v)
    a = np.where(a >= omega, np.mod(a, omega), a)
    nxt = AccumulatorState(a, omega, state.clamped_inputs + int(negative.sum()))
    return spikes.astype(np.uint8), nxt


def initial_accumulator(shape, threshold: float, mode: str = "seeded-uniform",
                        rng: Union[int, np.random.Generator, None] = 0) -> np.ndarray:
    if mode == "zero":
        return np.zeros(shape)
    if mode == "seeded-uniform":
        return np.random.default_rng(rng).uniform(0.0, threshold, size=shape)
    raise InvalidParameterError(f"unknown A0 mode {mode!r}; expected one of {A0_MODES}")


def estimate_phase(stream: "SpikeStream", candidates: int = 41) -> np.ndarray:
    """Per-pixel initial accumulator that best explains a stream under constant input.

    For constant input ``q`` the cumulative count obeys
    ``c_t = floor((A0 + t q) / threshold)``, so each step confines ``A0`` to
    ``[threshold c_t - t q, threshold (c_t + 1) - t q)``. A least-squares line
    through the staircase gives a first ``q``; slopes within two counts of it
    are then scanned (coarse, then fine around each pixel's best) for the one
    whose interval is widest (least violated under noise), and ``A0`` is that
    interval's midpoint, clipped into ``[0, threshold)``.
    """
    n = stream.window
    omega = stream.threshold
    h, w = stream.height, stream.width
    if n < 2:
        return np.zeros((h, w))
    csum = np.cumsum(stream.frames(), axis=0, dtype=np.float64).reshape(n, h * w)
    t = np.arange(1, n + 1, dtype=np.float64)
    tc = t - t.mean()
    y = omega * (csum + 0.5)
    q0 = tc @ y / np.dot(tc, tc)
    best_width = np.full(h * w, -np.inf)
    best_mid = np.zeros(h * w)
    best_q = q0
    span = 2.0 * omega / n
    for _ in range(2):
        center = best_q
        for off in np.linspace(-span, span, candidates):
            q = center + off
            lo = np.max(omega * csum - t[:, None] * q, axis=0)
            hi = np.min(omega * (csum + 1.0) - t[:, None] * q, axis=0)
            lo = np.maximum(lo, 0.0)
            hi = np.minimum(hi, omega)
            better = hi - lo > best_width
            best_width = np.where(better, hi - lo, best_width)
            best_mid = np.where(better, 0.5 * (lo + hi), best_mid)
            best_q = np.where(better, q, best_q)
        # second pass refines around each pixel's best slope
        span *= 2.0 / (candidates - 1)
    return np.clip(best_mid, 0.0, np.nextafter(omega, 0.0)).reshape(h, w)


def _resolve_a0(A0, shape, threshold, rng):
    if isinstance(A0, str):
        return initial_accumulator(shape, threshold, A0, rng)
    a0 = np.broadcast_to(np.asarray(A0, dtype=np.float64), shape).copy()
    if np.any(a0 < 0) or np.any(a0 >= threshold):
        raise InvalidParameterError("A0 must lie in [0, threshold)")
    return a0


def simulate_stream(intensity: np.ndarray, window: int, threshold: float = 1.0,
                    noise: Optional[NoiseConfig] = None,
                    rnu: Optional[NonUniformityMap] = None,
                    A0: Union[str, np.ndarray] = "seeded-uniform",
                    timestep_hz: float = 20000.0) -> SpikeStream:
    """Simulate a spike camera looking at ``intensity`` for ``window`` readout steps.

    Args:
        intensity: ``(H, W)`` static radiance in [0, 1], or ``(H, W, N)`` per step.
        window: number of readout steps N.
        threshold: firing threshold.
        noise: sensor noise; defaults to noiseless. Its ``seed`` drives every
            random draw, including a seeded-uniform ``A0``.
        rnu: response non-uniformity map; defaults to uniform response.
        A0: ``"zero"``, ``"seeded-uniform"`` or an explicit ``(H, W)`` array.
    """
    noise = noise or NoiseConfig.noiseless()
    intensity = np.asarray(intensity, dtype=np.float64)
    _check_finite(intensity, "intensity")
    if intensity.ndim == 3:
        if intensity.shape[2] != window:
            raise InvalidParameterError("per-step intensity must have N slices")
        light = np.moveaxis(intensity, -1, 0)
    elif intensity.ndim == 2:
        light = intensity[None]
    else:
        raise InvalidParameterError("intensity must be H x W or H x W x N")
    h, w = light.shape[1:]
    if rnu is not None and rnu.shape != (h, w):
        raise InvalidParameterError("rnu map shape does not match intensity")
    if window <= 0:
        raise InvalidParameterError("window must be positive")
    light = np.clip(light, 0.0, None) * noise.light_scale

    ss = np.random.SeedSequence(noise.seed)
    rng_a0, rng_shot, rng_dark = (np.random.Generator(np.random.Philox(s)) for s in ss.spawn(3))
    a0 = _resolve_a0(A0, (h, w), threshold, rng_a0)
    response = np.ones((h, w)) if rnu is None else rnu.response
    gain = noise.eta * response / noise.charge_ref

    if noise.is_noiseless and light.shape[0] == 1:
        spikes = np.empty((window, h * w), np.uint8)
        _run_constant((gain * light[0]).ravel(), a0.ravel(), float(threshold), window,
                      spikes, np.empty((0, 0)), False)
        return SpikeStream.from_dense(spikes.reshape(window, h, w), threshold, timestep_hz,
                                      time_major=True)

    per_step = np.broadcast_to(light, (window, h, w))
    if np.isinf(noise.photon_gain):
        photons = per_step
    else:
        photons = rng_shot.poisson(noise.photon_gain * per_step) / noise.photon_gain
    if noise.dark_rate > 0:
        photons = photons + rng_dark.exponential(noise.dark_rate, size=(window, h, w))
    inp = np.ascontiguousarray((gain * photons).reshape(window, h * w))
    spikes = np.empty((window, h * w), np.uint8)
    _run_varying(inp, a0.ravel(), float(threshold), spikes, np.empty(h * w))
    return SpikeStream.from_dense(spikes.reshape(window, h, w), threshold, timestep_hz,
                                  time_major=True)


def calibrate_nonuniformity(uniform_streams: Sequence[SpikeStream]) -> NonUniformityMap:
    """Estimate the response ratio map from streams of a uniformly lit scene.

    The reference pixel is the one whose mean firing rate is closest to the
    global mean; pixels that never fire are flagged dead with ``R = inf``.
    """
    if not uniform_streams:
        raise InvalidParameterError("need at least one calibration stream")
    shape = (uniform_streams[0].height, uniform_streams[0].width)
    total = np.zeros(shape)
    steps = 0
    for s in uniform_streams:
        if (s.height, s.width) != shape:
            raise InvalidParameterError("calibration streams differ in size")
        total += s.counts()
        steps += s.window
    rate = total / steps
    ref = _closest_to_mean(rate)
    if rate[ref] == 0:
        raise InvalidParameterError("calibration scene produced no spikes")
    dead = rate == 0
    with np.errstate(divide="ignore"):
        R = np.where(dead, np.inf, rate[ref] / np.where(dead, 1.0, rate))
    R[ref] = 1.0
    return NonUniformityMap(R, ref, dead)


# ---------------------------------------------------------------------------
# Differentiable spike neuron layer
# ---------------------------------------------------------------------------

def snl_forward(intensity_hat: np.ndarray, rnu: Optional[NonUniformityMap], threshold: float,
                window: int, A0: np.ndarray, timestep_hz: float = 20000.0):
    """Run the integrate-and-fire layer on a rendered intensity image.

    The per-step input is the constant ``intensity_hat * response`` over the
    window. Returns ``(stream, tape)``; ``tape.spikes`` holds the dense frames.
    """
    ihat = np.asarray(intensity_hat, dtype=np.float64)
    _check_finite(ihat, "intensity_hat")
    if ihat.ndim != 2:
        raise InvalidParameterError("intensity_hat must be H x W")
    h, w = ihat.shape
    if rnu is not None and rnu.shape != (h, w):
        raise InvalidParameterError(f"rnu map shape {rnu.shape} != intensity shape {(h, w)}")
    a0 = _resolve_a0(A0, (h, w), threshold, None)
    response = np.ones((h, w)) if rnu is None else rnu.response
    inp = (response * np.clip(ihat, 0.0, None)).ravel()
    spikes = np.empty((window, h * w), np.uint8)
    V = np.empty((window, h * w))
    _run_constant(inp, a0.ravel(), float(threshold), window, spikes, V, True)
    spikes = spikes.reshape(window, h, w)
    tape = NeuronTape(V.reshape(window, h, w), a0, spikes, response, float(threshold))
    stream = SpikeStream.from_dense(spikes, threshold, timestep_hz, time_major=True)
    return stream, tape


def snl_backward(tape: NeuronTape, dl_dstream: np.ndarray,
                 surrogate: Optional[Surrogate] = None, time_major: bool = False) -> np.ndarray:
    """Gradient of the loss w.r.t. the rendered intensity through the unrolled layer.

    With the reset path detached (default) this is
    ``response * sum_t dL/dO_t * Thr'(V_t)``. With ``surrogate.reset_grad``
    the membrane carry ``A_t = V_t - threshold * O_t`` is differentiated too.

    Args:
        dl_dstream: ``(H, W, N)`` upstream gradient, or ``(N, H, W)`` with ``time_major``.
    """
    surrogate = surrogate or Surrogate()
    g = np.asarray(dl_dstream, dtype=np.float64)
    if not time_major:
        g = np.moveaxis(g, -1, 0)
    if g.shape != tape.V.shape:
        raise InvalidParameterError(f"dL/dstream shape {g.shape} != tape shape {tape.V.shape}")
    dthr = surrogate.derivative(tape.V, tape.threshold)
    if not surrogate.reset_grad:
        return tape.response * np.einsum("thw,thw->hw", g, dthr)
    carry = np.zeros(tape.V.shape[1:])
    total = np.zeros_like(carry)
    for t in range(tape.window - 1, -1, -1):
        dv = g[t] * dthr[t] + carry * (1.0 - tape.threshold * dthr[t])
        total += dv
        carry = dv
    return tape.response * total


def tfp_reconstruct(stream: SpikeStream) -> np.ndarray:
    """Intensity estimate ``threshold * spike_count / N``, clipped to [0, 1]."""
    if stream.window == 0:
        return np.zeros((stream.height, stream.width))
    return np.clip(stream.threshold * stream.counts() / stream.window, 0.0, 1.0)
