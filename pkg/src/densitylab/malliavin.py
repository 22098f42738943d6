"""Derivative kernels of the solution functional and their Hilbert-space geometry.

The derivative of u(t*, x_ref) with respect to the noise is a kernel
D_{r,v} u(t*, x_ref) over past times r and positions v.  It solves the
linear recursion whose free term is the Green kernel Gamma(t* - r, x_ref - v)
and whose correction convolves b'(u) against the kernel itself.  Because
that recursion is linear with field coefficients, the kernel of one target
functional is computed here by the adjoint (backward) sweep

    lam_{n*} = indicator(x_ref),
    That_m   = sum_{n>m} F Gamma((n-m) dt) lamhat_n      (one-step recursion),
    lam_m    = dt * b'(u(s_m)) * ifft(That_m),

and the frequency slice of the kernel at r = m dt is exactly That_m.  One
sweep costs O(M N^d log N) per path; the test suite pins it against a
dense solve of the literal forward recursion.

Inner products use the spectral representation of the noise geometry:

    <h, g>_H = dt * sum_r sum_k  Fh(r)(xi_k) conj(Fg(r)(xi_k)) mu_k,

with F the lattice-scaled transform (dx^d times the DFT), so the free
kernel has squared norm equal to the discrete variance sum Phi_disc(t*).
"""

from dataclasses import dataclass

import numpy as np

from .fields import Lattice, make_accumulator, spectral_weights
from .spectral import fourier_green_radial


@dataclass(frozen=True)
class HGeometry:
    """Spectral weights of the noise Hilbert space on a lattice."""

    lattice: Lattice
    weights: np.ndarray  # mu_k at lattice frequencies

    def __post_init__(self):
        if self.weights.shape != self.lattice.space_shape:
            raise ValueError("weight array does not match the lattice")
        if np.any(self.weights < 0):
            raise ValueError("spectral weights must be nonnegative")


def make_geometry(model, lattice):
    return HGeometry(lattice=lattice, weights=spectral_weights(model, lattice))


@dataclass
class DerivativeKernel:
    """Grid kernel D_{r,v} u(t*, x_ref) for one path and one target.

    ``values[r]`` is the spatial slice at past time index r; slices at
    r >= target_step vanish (the derivative looks only into the past).
    The frequency representation used by the inner products is cached in
    ``hat`` (lattice-scaled transform of each slice).
    """

    lattice: Lattice
    target_step: int
    x_ref: tuple
    values: np.ndarray
    hat: np.ndarray

    def norm2(self, geom):
        return h_inner(self, self, geom)


def free_kernel_hat(op, lattice, target_step):
    """Frequency slices of the canonical kernel of X(t*, x_ref) at the origin.

    Slice j carries F Gamma((n* - j) dt)(xi_k) for j < n*; together they
    represent Gamma(t* - r, x_ref - v).
    """
    r = lattice.frequency_radii()
    out = np.empty((target_step,) + lattice.space_shape)
    for j in range(target_step):
        out[j] = fourier_green_radial(op, (target_step - j) * lattice.dt, r)
    return out


def discrete_phi(op, lattice, weights, step):
    """Squared H-norm of the free kernel: dt sum_{q<=n} sum_k g(q dt)^2 mu_k."""
    r = lattice.frequency_radii()
    acc = 0.0
    for q in range(1, step + 1):
        g = fourier_green_radial(op, q * lattice.dt, r)
        acc += float((g * g * weights).sum())
    return lattice.dt * acc


def discrete_psi(op, lattice, step):
    """Right-endpoint sum of the Green-kernel mass: dt sum_{q<=n} mass(q dt)."""
    return lattice.dt * sum(
        fourier_green_radial(op, q * lattice.dt, 0.0) for q in range(1, step + 1)
    )


def backward_sweep(u, drift, op, lattice, target_step):
    """Yield (m, That_m) for m = target_step-1 .. 0 over a batch of paths.

    ``u`` has shape (P, M+1, *space); the yielded arrays have shape
    (P, *space) and are only valid until the next iteration (views of the
    accumulator state); copy if kept.
    """
    P = u.shape[0]
    axes = lattice.space_axes
    dt = lattice.dt
    acc = make_accumulator(op, lattice, batch_shape=(P,))
    lamhat = np.ones((P,) + lattice.space_shape, dtype=np.complex128)
    for m in range(target_step - 1, -1, -1):
        acc.push(lamhat)
        acc.advance()
        that = acc.value()
        yield m, that
        if m > 0:
            lam = dt * drift.b_prime(u[:, m]) * np.fft.ifftn(that, axes=axes).real
            lamhat = np.fft.fftn(lam, axes=axes)


def backward_kernels(u, drift, op, lattice, target_step):
    """Frequency kernel slices, shape (P, target_step, *space)."""
    P = u.shape[0]
    K = np.empty((P, target_step) + lattice.space_shape, dtype=np.complex128)
    for m, that in backward_sweep(u, drift, op, lattice, target_step):
        K[:, m] = that
    return K


def kernel_inner(K1, K2, weights, dt):
    """Pairwise H inner products of frequency kernels, shape (P,).

    dt sum_j sum_k K1 conj(K2) mu_k; real for kernels of real fields (the
    imaginary part is pure roundoff and is dropped).
    """
    d = weights.ndim
    axes = tuple(range(-d - 1, 0))
    return dt * np.real(np.sum(K1 * np.conj(K2) * weights, axis=axes))


def kernel_norm2(K, weights, dt):
    d = weights.ndim
    axes = tuple(range(-d - 1, 0))
    return dt * np.sum((K.real**2 + K.imag**2) * weights, axis=axes)


def propagate_derivative(u, drift, model, target_time=None):
    """Derivative kernel of u(t*, origin) for one solved path.

    ``u`` is a SolutionPath; the target defaults to the horizon.  The
    recursion collapses to the free kernel when b' vanishes.
    """
    lattice = u.field.lattice
    n_star = lattice.steps if target_time is None else lattice.step_of(target_time)
    hat_active = backward_kernels(
        u.field.values[None], drift, model.operator, lattice, n_star
    )[0]
    steps = lattice.steps
    hat = np.zeros((steps,) + lattice.space_shape, dtype=np.complex128)
    hat[:n_star] = hat_active
    dxd = lattice.dx**lattice.dimension
    values = np.fft.ifftn(hat, axes=lattice.space_axes).real / dxd
    return DerivativeKernel(
        lattice=lattice,
        target_step=n_star,
        x_ref=(0,) * lattice.dimension,
        values=values,
        hat=hat,
    )


def h_inner(h1, h2, geom):
    """Spectral H inner product of two derivative kernels."""
    if h1.lattice != h2.lattice or h1.lattice != geom.lattice:
        raise ValueError("kernels and geometry live on different lattices")
    return float(kernel_inner(h1.hat[None], h2.hat[None], geom.weights, geom.lattice.dt)[0])


# ---------------------------------------------------------------------------
# Conditional norm diagnostics
# ---------------------------------------------------------------------------


@dataclass
class NormTable:
    """Binned conditional means of kernel norms against the target variable."""

    r_times: np.ndarray
    bin_edges: np.ndarray
    counts: np.ndarray          # per bin
    table: np.ndarray           # (n_bins, n_r) conditional means of the norm
    ratios: np.ndarray          # table / sqrt(phi_t)
    included: np.ndarray        # bins with enough samples
    sup_ratio: float
    phi_t: float


def conditional_norm_diag(norms, r_times, f_sample, phi_t, n_bins=20, min_count=30):
    """Table of conditional means E[ ||Du(r, .)||_H | F in bin ] over r <= t.

    Bins are equal-probability quantile bins of the conditioning sample;
    bins holding fewer than ``min_count`` paths are flagged and excluded
    from the reported sup of the ratio to sqrt(phi_t).
    """
    norms = np.asarray(norms)
    f_sample = np.asarray(f_sample)
    if norms.shape[0] != f_sample.shape[0]:
        raise ValueError("norm rows and conditioning sample must align")
    edges = np.quantile(f_sample, np.linspace(0.0, 1.0, n_bins + 1))
    idx = np.clip(np.searchsorted(edges[1:-1], f_sample, side="right"), 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    table = np.full((n_bins, norms.shape[1]), np.nan)
    for b in range(n_bins):
        sel = idx == b
        if counts[b] > 0:
            table[b] = norms[sel].mean(axis=0)
    ratios = table / np.sqrt(phi_t)
    included = counts >= min_count
    sup_ratio = float(np.nanmax(ratios[included])) if included.any() else float("nan")
    return NormTable(
        r_times=np.asarray(r_times, dtype=float),
        bin_edges=edges,
        counts=counts,
        table=table,
        ratios=ratios,
        included=included,
        sup_ratio=sup_ratio,
        phi_t=phi_t,
    )
