"""Periodic lattice fields: noise synthesis and the stochastic convolution.

The spatial domain is a torus of side L sampled on N^d points, so fields
live in the span of the lattice frequencies xi_k = k/L and convolution
with a Green kernel is exact multiplication by its Fourier multiplier at
those frequencies.  The spectral measure is discretized as one point mass
per frequency cell, density(|xi_k|) / L^d, which preserves the variance
identities used throughout (Var X(t,x) equals the discrete Phi(t) sum).

Frequency-domain convention: a stored complex array ``c`` represents the
spatial field ``numpy.fft.ifftn(c)``; real fields have Hermitian ``c``.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import NyquistError
from .rng import CounterStream
from .spectral import (
    HEAT,
    WAVE,
    Operator,
    RieszKernel,
    fourier_green_radial,
    riesz_constant,
    surface_area,
)

IMAG_RESIDUE_TOL = 1e-10


@dataclass(frozen=True)
class Lattice:
    """Space-time grid: torus of side ``length`` with ``points``^d cells, ``steps`` time steps."""

    dimension: int
    length: float
    points: int
    steps: int
    horizon: float

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("lattice dimension must be >= 1")
        if self.points < 2 or (self.points & (self.points - 1)) != 0:
            raise ValueError(f"points per side must be a power of two, got {self.points}")
        if self.length <= 0 or self.horizon <= 0 or self.steps < 1:
            raise ValueError("length, horizon and steps must be positive")

    @property
    def dt(self):
        return self.horizon / self.steps

    @property
    def dx(self):
        return self.length / self.points

    @property
    def space_shape(self):
        return (self.points,) * self.dimension

    @property
    def cell_count(self):
        return self.points**self.dimension

    @property
    def space_axes(self):
        return tuple(range(-self.dimension, 0))

    @property
    def nyquist(self):
        return self.points / (2.0 * self.length)

    def frequency_radii(self):
        """|xi_k| on the fft-ordered frequency lattice."""
        f = np.fft.fftfreq(self.points, d=self.dx)
        grids = np.meshgrid(*([f] * self.dimension), indexing="ij")
        return np.sqrt(sum(g * g for g in grids))

    def times(self):
        return np.arange(self.steps + 1) * self.dt

    def step_of(self, t):
        """Grid index of time t; errors if t is off the grid."""
        n = t / self.dt
        if abs(n - round(n)) > 1e-9 or not 0 <= round(n) <= self.steps:
            raise ValueError(f"time {t} is not on the lattice grid (dt={self.dt})")
        return int(round(n))


def spectral_weights(model, lattice):
    """Point masses of the spectral measure at the lattice frequencies.

    One frequency cell has volume L^-d, so a density rho contributes
    rho(|xi_k|) / L^d per mode.  The singular power-kernel density gets
    its zero cell replaced by the exact mass of the equal-volume ball,
    which is finite because eps < d.
    """
    if model.dimension != lattice.dimension:
        raise ValueError("model and lattice dimensions differ")
    d = lattice.dimension
    r = lattice.frequency_radii()
    cell = lattice.length**-d
    corr = model.correlation
    with np.errstate(divide="ignore"):
        mu = corr.density_radial(r, d) * cell
    if isinstance(corr, RieszKernel):
        eps = corr.epsilon
        c = riesz_constant(d, eps)
        omega = math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0)
        r0 = (cell / omega) ** (1.0 / d)
        origin = (0,) * d
        mu[origin] = c * surface_area(d) * r0**eps / eps
    if not np.all(np.isfinite(mu)) or np.any(mu < 0):
        raise ValueError("spectral weights must be finite and nonnegative")
    return mu


@dataclass
class LatticeField:
    """Real space-time sample on the lattice, indexed (time step, space...)."""

    lattice: Lattice
    values: np.ndarray

    def __post_init__(self):
        expected = (self.lattice.steps + 1,) + self.lattice.space_shape
        if self.values.shape != expected:
            raise ValueError(f"field shape {self.values.shape} != lattice shape {expected}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    def origin_series(self):
        """Time series at the lattice origin."""
        idx = (slice(None),) + (0,) * self.lattice.dimension
        return self.values[idx]


@dataclass
class NoisePath:
    """Frequency-domain Gaussian increments of one noise realization.

    ``increments[j]`` is Hermitian-symmetric; its spatial field is
    ``ifftn(increments[j])`` and carries the time-white sqrt(dt) scaling.
    Shifted paths built by ``mehler_shift`` keep the seed of their base
    path.
    """

    lattice: Lattice
    seed: int
    stream: int
    increments: np.ndarray


# ---------------------------------------------------------------------------
# One-step accumulators for causal Green-kernel sums
# ---------------------------------------------------------------------------


class HeatAccumulator:
    """State S_n = sum_{j<n} m^(n-j) B_j updated as S <- m (S + B).

    Exact because the heat multiplier satisfies g(t+dt) = g(t) g(dt).
    """

    def __init__(self, lattice, batch_shape=()):
        r = lattice.frequency_radii()
        self.mult = fourier_green_radial(Operator(HEAT, lattice.dimension), lattice.dt, r)
        self.state = np.zeros(batch_shape + lattice.space_shape, dtype=np.complex128)

    def push(self, term):
        self.state += term

    def advance(self):
        self.state *= self.mult

    def value(self):
        return self.state


class WaveAccumulator:
    """Two-component rotation for sums of wave multipliers.

    Carries S_n = sum_{j<n} s_(n-j) B_j and C_n = sum_{j<n} c_(n-j) B_j
    with s_q = sin(2 pi q dt r)/(2 pi r) and c_q = cos(2 pi q dt r); the
    angle-addition identities advance both exactly by one step.
    """

    def __init__(self, lattice, batch_shape=()):
        r = lattice.frequency_radii()
        dt = lattice.dt
        self.s1 = fourier_green_radial(Operator(WAVE, lattice.dimension), dt, r)
        self.c1 = np.cos(2.0 * math.pi * dt * r)
        self.w2 = (2.0 * math.pi * r) ** 2
        shape = batch_shape + lattice.space_shape
        self.state = np.zeros(shape, dtype=np.complex128)
        self._cos_part = np.zeros(shape, dtype=np.complex128)

    def push(self, term):
        self._cos_part += term

    def advance(self):
        s, c = self.state, self._cos_part
        self.state = self.c1 * s + self.s1 * c
        self._cos_part = self.c1 * c - self.w2 * self.s1 * s

    def value(self):
        return self.state


def make_accumulator(op, lattice, batch_shape=()):
    if op.kind == HEAT:
        return HeatAccumulator(lattice, batch_shape)
    if op.kind == WAVE:
        return WaveAccumulator(lattice, batch_shape)
    raise ValueError(f"unsupported operator kind: {op.kind!r}")


# ---------------------------------------------------------------------------
# Noise synthesis
# ---------------------------------------------------------------------------


def sample_noise_batch(lattice, model, seed, streams, spectral_cutoff=None):
    """Frequency increments for several paths; shape (len(streams), M, *space).

    Each increment is fftn of an iid standard-normal field scaled by
    sqrt(dt mu_k N^d), which gives a centered Gaussian field with spatial
    point spectrum mu and time-white variance scaling, Hermitian by
    construction.  Deterministic in (seed, stream, step).
    """
    if spectral_cutoff is not None and lattice.nyquist <= spectral_cutoff:
        raise NyquistError(
            f"lattice Nyquist frequency {lattice.nyquist:g} does not exceed the "
            f"configured spectral cutoff {spectral_cutoff:g}; refine the grid or "
            f"shrink the cutoff"
        )
    if abs(model.horizon - lattice.horizon) > 1e-12 * max(1.0, model.horizon):
        raise ValueError("model horizon and lattice horizon differ")
    mu = spectral_weights(model, lattice)
    amp = np.sqrt(lattice.dt * mu * lattice.cell_count)
    M = lattice.steps
    shape = lattice.space_shape
    out = np.empty((len(streams), M) + shape, dtype=np.complex128)
    eta = np.empty((M,) + shape)
    for i, stream in enumerate(streams):
        cs = CounterStream(seed, stream)
        for j in range(M):
            eta[j] = cs.normals(j, shape)
        out[i] = np.fft.fftn(eta, axes=lattice.space_axes) * amp
    return out


def sample_noise(lattice, model, seed, stream=0, spectral_cutoff=None):
    """One noise path; see sample_noise_batch."""
    inc = sample_noise_batch(lattice, model, seed, [stream], spectral_cutoff)[0]
    return NoisePath(lattice=lattice, seed=seed, stream=stream, increments=inc)


def mehler_shift(w, w_prime, theta):
    """Interpolate two independent paths along the Ornstein-Uhlenbeck flow.

    Every increment becomes exp(-theta) w + sqrt(1 - exp(-2 theta)) w',
    which preserves the marginal law for any theta >= 0.
    """
    if w.lattice != w_prime.lattice:
        raise ValueError("paths live on different lattices")
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    a = math.exp(-theta)
    b = math.sqrt(-math.expm1(-2.0 * theta))
    return NoisePath(
        lattice=w.lattice,
        seed=w.seed,
        stream=w.stream,
        increments=a * w.increments + b * w_prime.increments,
    )


def shift_increments(inc, inc_prime, theta):
    """Array version of mehler_shift for batched pipelines."""
    a = math.exp(-theta)
    b = math.sqrt(-math.expm1(-2.0 * theta))
    return a * inc + b * inc_prime


# ---------------------------------------------------------------------------
# Stochastic convolution
# ---------------------------------------------------------------------------


def _to_real(z, context):
    resid = float(np.abs(z.imag).max()) if z.size else 0.0
    if resid > IMAG_RESIDUE_TOL:
        raise ValueError(f"imaginary residue {resid:.2e} exceeds tolerance in {context}")
    return z.real


def build_X_batch(increments, op, lattice):
    """Discrete stochastic convolution for a batch of noise paths.

    X_hat(t_n) = sum_{j<n} F Gamma(t_n - s_j) dW_hat_j, accumulated with
    the one-step recursion and inverse-transformed to space; left-endpoint
    rule in s, X(0) = 0.
    """
    P = increments.shape[0]
    M = lattice.steps
    acc = make_accumulator(op, lattice, batch_shape=(P,))
    X = np.zeros((P, M + 1) + lattice.space_shape)
    axes = lattice.space_axes
    for n in range(1, M + 1):
        acc.push(increments[:, n - 1])
        acc.advance()
        X[:, n] = _to_real(np.fft.ifftn(acc.value(), axes=axes), "stochastic convolution")
    return X


def build_X(noise, model):
    """Stochastic convolution of one noise path as a LatticeField."""
    X = build_X_batch(noise.increments[None], model.operator, noise.lattice)[0]
    return LatticeField(lattice=noise.lattice, values=X)


# ---------------------------------------------------------------------------
# Binary field dump (debug interface)
# ---------------------------------------------------------------------------


def dump_field(field, path):
    """Write a field: header (d, N, M) as little-endian int64, then the
    row-major float64 little-endian value array."""
    lat = field.lattice
    header = np.array([lat.dimension, lat.points, lat.steps], dtype="<i8")
    with open(path, "wb") as fh:
        header.tofile(fh)
        np.ascontiguousarray(field.values, dtype="<f8").tofile(fh)


def read_field_dump(path):
    """Read a dump_field file; returns (d, N, M, values)."""
    with open(path, "rb") as fh:
        d, N, M = (int(x) for x in np.fromfile(fh, dtype="<i8", count=3))
        values = np.fromfile(fh, dtype="<f8").reshape((M + 1,) + (N,) * d)
    return d, N, M, values
