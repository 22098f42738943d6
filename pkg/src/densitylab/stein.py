"""Estimation of the Stein kernel of the solution and the density it induces.

For a centered target F = u(t*, x_ref) - m the Stein kernel is the
conditional expectation

    g(z) = E[ integral_0^inf e^-theta <DF, shifted DF(theta)>_H dtheta | F = z ],

where the shifted derivative is DF evaluated along the path
exp(-theta) W + sqrt(1 - exp(-2 theta)) W' with an independent copy W'.
The estimator samples the theta integral with a Gauss-Laguerre rule
(weight e^-theta is the Laguerre weight), re-solves the equation on every
shifted path, pairs derivative kernels through the spectral inner
product, and smooths the per-path results against F with local-constant
regression.

The per-path quantity splits exactly, by bilinearity, into

    Y = Phi_disc + A1 + A2 + A3,

with A1 = <K - G, G>, A2 = <G, Ktilde - G>, A3 = <K - G, Ktilde - G>,
where G is the deterministic free kernel; ``decompose`` reports the
pieces and the (float-level) residual of the identity.

An explicit density follows from the kernel estimate:

    rho(z) = E|F| / (2 g(z)) * exp(-integral_0^z y / g(y) dy).
"""

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.laguerre import laggauss
from scipy.integrate import cumulative_trapezoid

from .fields import sample_noise_batch, shift_increments, spectral_weights
from .malliavin import (
    backward_kernels,
    backward_sweep,
    discrete_phi,
    free_kernel_hat,
    kernel_inner,
    kernel_norm2,
)
from .regress import bootstrap_stderr, loo_cv_bandwidth, nw_regress, silverman_bandwidth
from .rng import DIAG_STREAM_BASE, prime_stream
from .solver import default_chunk, make_drift, solve_from_noise

DEFAULT_THETA_NODES = 12
MIN_LOCAL_SAMPLE = 30


@dataclass(frozen=True)
class ThetaQuadrature:
    """Nodes and weights for integrals against the weight e^-theta on (0, inf)."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if np.any(self.nodes < 0):
            raise ValueError("quadrature nodes must be nonnegative")
        total = float(self.weights.sum())
        if abs(total - 1.0) > 1e-10:
            raise ValueError(f"weights must integrate the unit function to 1, got {total}")

    @classmethod
    def gauss_laguerre(cls, n=DEFAULT_THETA_NODES):
        nodes, weights = laggauss(n)
        return cls(nodes=nodes, weights=weights)

    def integrate(self, values_at_nodes):
        return float(np.dot(self.weights, values_at_nodes))


@dataclass
class SteinSamples:
    """Per-path Monte Carlo output of the shift-resampling estimator."""

    target_steps: tuple
    target_times: np.ndarray
    f_values: np.ndarray    # (P, n_targets) centered targets
    y_values: np.ndarray    # (P, n_targets) theta-integrated pairings
    a1: np.ndarray
    a2: np.ndarray
    a3: np.ndarray
    phi_disc: np.ndarray    # (n_targets,) free-kernel squared norms
    n_paths: int
    n_primes: int
    seed: int


def _inner_step(a, b, weights):
    """sum_k a conj(b) mu_k over space axes; real part."""
    d = weights.ndim
    axes = tuple(range(-d, 0))
    return np.real(np.sum(a * np.conj(b) * weights, axis=axes))


def _stein_chunk(lattice, model, drift, seed, paths, quad, n_primes, target_steps):
    """One chunk of the estimator; returns per-path raw target values and pieces."""
    op = model.operator
    dt = lattice.dt
    mu = spectral_weights(model, lattice)
    origin = (0,) * lattice.dimension
    nt = len(target_steps)
    P = len(paths)

    inc = sample_noise_batch(lattice, model, seed, paths)
    u, _ = solve_from_noise(inc, drift, op, lattice)
    u_targets = np.stack([u[(slice(None), n) + origin] for n in target_steps], axis=1)

    G = [free_kernel_hat(op, lattice, n) for n in target_steps]
    phi_d = np.array([dt * float((g * g * mu).sum()) for g in G])

    if drift.constant_derivative:
        # kernels do not depend on the path: one backward pass, no resampling
        dummy = np.zeros((1, lattice.steps + 1) + lattice.space_shape)
        y = np.empty(nt)
        a1 = np.empty(nt)
        a3 = np.empty(nt)
        for i, n in enumerate(target_steps):
            K = backward_kernels(dummy, drift, op, lattice, n)
            y[i] = kernel_norm2(K, mu, dt)[0]
            a1[i] = kernel_inner(K - G[i][None], G[i][None], mu, dt)[0]
            a3[i] = kernel_norm2(K - G[i][None], mu, dt)[0]
        ones = np.ones((P, 1))
        return (
            u_targets,
            ones * y,
            ones * a1,
            ones * a1,  # shifted cross term equals the plain one
            ones * a3,
            phi_d,
        )

    Kown = [backward_kernels(u, drift, op, lattice, n) for n in target_steps]
    kg_own = np.stack(
        [kernel_inner(Kown[i], G[i][None], mu, dt) for i in range(nt)], axis=1
    )
    a1 = kg_own - phi_d[None, :]

    Y = np.zeros((P, nt))
    a2 = np.zeros((P, nt))
    a3 = np.zeros((P, nt))
    n_theta = len(quad.nodes)
    for q, (theta, wq) in enumerate(zip(quad.nodes, quad.weights)):
        for rep in range(n_primes):
            streams = [prime_stream(p, q, rep, n_theta, n_primes) for p in paths]
            inc_prime = sample_noise_batch(lattice, model, seed, streams)
            inc_shift = shift_increments(inc, inc_prime, theta)
            del inc_prime
            u_shift, _ = solve_from_noise(inc_shift, drift, op, lattice)
            del inc_shift
            w = wq / n_primes
            for i, n in enumerate(target_steps):
                y = np.zeros(P)
                gk = np.zeros(P)
                for m, that in backward_sweep(u_shift, drift, op, lattice, n):
                    y += _inner_step(Kown[i][:, m], that, mu)
                    gk += _inner_step(G[i][m][None], that, mu)
                y *= dt
                gk *= dt
                Y[:, i] += w * y
                a2[:, i] += w * (gk - phi_d[i])
                a3[:, i] += w * (y - gk - kg_own[:, i] + phi_d[i])
    return u_targets, Y, a1, a2, a3, phi_d


def _stein_chunk_args(args):
    (lattice, model, drift_name, drift_param, seed, paths, quad_nodes, quad_weights,
     n_primes, target_steps) = args
    drift = make_drift(drift_name, drift_param)
    quad = ThetaQuadrature(nodes=np.asarray(quad_nodes), weights=np.asarray(quad_weights))
    return _stein_chunk(lattice, model, drift, seed, list(paths), quad, n_primes, target_steps)


def stein_samples(
    ensemble,
    drift,
    model,
    quad=None,
    n_primes=1,
    target_steps=None,
    chunk=None,
    workers=1,
):
    """Per-path Stein-kernel samples for the targets, regenerating paths by seed.

    The ensemble summary supplies the seed, surviving path ids, and the
    centering means; every path is regenerated bit-identically from its
    counter-based stream, so no fields need to be stored between stages.
    """
    if ensemble.drift_name != drift.name or ensemble.drift_param != drift.param:
        raise ValueError("drift does not match the one used for the ensemble")
    if quad is None:
        quad = ThetaQuadrature.gauss_laguerre()
    if n_primes < 1:
        raise ValueError("n_primes must be >= 1")
    lattice = ensemble.lattice
    if target_steps is None:
        target_steps = ensemble.target_steps
    target_steps = tuple(int(n) for n in target_steps)
    if any(n < 1 or n > lattice.steps for n in target_steps):
        raise ValueError("target steps must lie in [1, steps]")

    # chunk size keeps the complex field blocks bounded
    if chunk is None:
        per_path = lattice.steps * lattice.cell_count * (
            16 * 3 + 8 * 2 + 16 * len(target_steps)
        )
        chunk = max(4, int(192 * 2**20 / max(per_path, 1)))
    paths = list(ensemble.path_indices)
    ranges = [paths[lo : lo + chunk] for lo in range(0, len(paths), chunk)]

    if workers > 1:
        import concurrent.futures as cf

        jobs = [
            (lattice, model, drift.name, drift.param, ensemble.seed, tuple(r),
             tuple(quad.nodes), tuple(quad.weights), n_primes, target_steps)
            for r in ranges
        ]
        with cf.ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_stein_chunk_args, jobs))
    else:
        results = [
            _stein_chunk(lattice, model, drift, ensemble.seed, r, quad, n_primes, target_steps)
            for r in ranges
        ]

    u_t = np.concatenate([r[0] for r in results], axis=0)
    means = np.array([ensemble.mean_series[n] for n in target_steps])
    samples = SteinSamples(
        target_steps=target_steps,
        target_times=np.asarray(target_steps) * lattice.dt,
        f_values=u_t - means[None, :],
        y_values=np.concatenate([r[1] for r in results], axis=0),
        a1=np.concatenate([r[2] for r in results], axis=0),
        a2=np.concatenate([r[3] for r in results], axis=0),
        a3=np.concatenate([r[4] for r in results], axis=0),
        phi_disc=results[0][5],
        n_paths=u_t.shape[0],
        n_primes=n_primes,
        seed=ensemble.seed,
    )
    return samples


# ---------------------------------------------------------------------------
# Conditional-expectation estimate and the induced density
# ---------------------------------------------------------------------------


@dataclass
class GEstimate:
    """Smoothed Stein-kernel estimate on a z grid with its error bars."""

    z: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    n_eff: np.ndarray
    valid: np.ndarray          # enough local sample and reported
    bandwidth: float
    n_paths: int
    n_primes: int
    target_time: float
    raw_negative_fraction: float
    clipped_fraction: float

    def valid_range(self):
        idx = np.where(self.valid)[0]
        if idx.size == 0:
            raise ValueError("no grid point has enough local sample")
        return self.z[idx[0]], self.z[idx[-1]]


def regress_gF(f_sample, y_sample, target_time, n_primes=1, z_points=101,
               bandwidth=None, n_boot=200, seed=0, min_local=MIN_LOCAL_SAMPLE):
    """Smooth per-path samples into a GEstimate on the central z grid."""
    f_sample = np.asarray(f_sample, dtype=float)
    y_sample = np.asarray(y_sample, dtype=float)
    z_lo, z_hi = np.quantile(f_sample, [0.005, 0.995])
    z = np.linspace(z_lo, z_hi, z_points)
    spread = y_sample.std()
    if bandwidth is None:
        if spread <= 1e-12 * (abs(y_sample.mean()) + 1.0):
            bandwidth = silverman_bandwidth(f_sample)
        else:
            bandwidth = loo_cv_bandwidth(f_sample, y_sample, seed=seed)
    ghat, n_eff = nw_regress(f_sample, y_sample, z, bandwidth)
    valid = n_eff >= min_local
    raw_neg = float((y_sample < 0).mean())
    clipped = float(((ghat < 0) & valid).mean())
    ghat = np.where(valid & (ghat < 0), 0.0, ghat)
    se = bootstrap_stderr(f_sample, y_sample, z, bandwidth, n_boot=n_boot, seed=seed)
    return GEstimate(
        z=z,
        values=ghat,
        stderr=se,
        n_eff=n_eff,
        valid=valid,
        bandwidth=float(bandwidth),
        n_paths=f_sample.size,
        n_primes=n_primes,
        target_time=float(target_time),
        raw_negative_fraction=raw_neg,
        clipped_fraction=clipped,
    )


def estimate_gF(ensemble, drift, model, quad=None, n_primes=1, seed=0,
                target_steps=None, z_points=101, chunk=None, workers=1):
    """End-to-end Stein-kernel estimates, one GEstimate per target step."""
    samples = stein_samples(
        ensemble, drift, model, quad=quad, n_primes=n_primes,
        target_steps=target_steps, chunk=chunk, workers=workers,
    )
    out = []
    for i, t in enumerate(samples.target_times):
        out.append(
            regress_gF(
                samples.f_values[:, i], samples.y_values[:, i], t,
                n_primes=n_primes, z_points=z_points, seed=seed,
            )
        )
    return out[0] if len(out) == 1 else out


@dataclass
class NVDensity:
    """Density reconstructed from a Stein-kernel estimate.

    rho(z) = E|F| / (2 g(z)) exp(-int_0^z y/g(y) dy) on the estimate's
    valid central range; ``normalization`` records the trapezoid mass on
    that truncated grid.
    """

    z: np.ndarray
    rho: np.ndarray
    e_abs_f: float
    normalization: float
    normalization_ok: bool


def density_from_g(g, e_abs_f, max_mass_error=0.02):
    """Evaluate the explicit density formula from a positive kernel estimate."""
    idx = np.where(g.valid)[0]
    if idx.size < 3:
        raise ValueError("kernel estimate valid on too few grid points")
    # largest contiguous valid block
    breaks = np.where(np.diff(idx) > 1)[0]
    blocks = np.split(idx, breaks + 1)
    block = max(blocks, key=len)
    z = g.z[block]
    gz = g.values[block]
    if np.any(gz <= 0):
        raise ValueError("kernel estimate is not positive on the grid; density undefined")
    if not (z[0] <= 0.0 <= z[-1]):
        raise ValueError("grid does not bracket z = 0; cannot anchor the exponent integral")
    integrand = z / gz
    cum = np.concatenate([[0.0], cumulative_trapezoid(integrand, z)])
    cum -= np.interp(0.0, z, cum)
    rho = e_abs_f / (2.0 * gz) * np.exp(-cum)
    mass = float(np.trapezoid(rho, z))
    return NVDensity(
        z=z,
        rho=rho,
        e_abs_f=float(e_abs_f),
        normalization=mass,
        normalization_ok=abs(mass - 1.0) <= max_mass_error,
    )


# ---------------------------------------------------------------------------
# Decomposition and bounds
# ---------------------------------------------------------------------------


@dataclass
class SteinDecomposition:
    """Estimated pieces of the exact split Y = Phi_disc + A1 + A2 + A3."""

    target_time: float
    phi_disc: float
    a1_mean: float
    a2_mean: float
    a3_mean: float
    a1_se: float
    a2_se: float
    a3_se: float
    residual_mean: float
    residual_se: float
    residual_max: float


def decompose_gF(samples, target_index=0):
    """Monte Carlo estimates of the correction terms and the identity residual."""
    i = target_index
    n = samples.n_paths
    a1, a2, a3 = samples.a1[:, i], samples.a2[:, i], samples.a3[:, i]
    resid = samples.y_values[:, i] - samples.phi_disc[i] - a1 - a2 - a3
    sem = lambda v: float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return SteinDecomposition(
        target_time=float(samples.target_times[i]),
        phi_disc=float(samples.phi_disc[i]),
        a1_mean=float(a1.mean()),
        a2_mean=float(a2.mean()),
        a3_mean=float(a3.mean()),
        a1_se=sem(a1),
        a2_se=sem(a2),
        a3_se=sem(a3),
        residual_mean=float(resid.mean()),
        residual_se=sem(resid),
        residual_max=float(np.abs(resid).max()),
    )


@dataclass
class SteinBounds:
    c1_hat: float
    c2_hat: float
    passed: bool


def check_g_bounds(g, phi_t):
    """Empirical two-sided constants min/max of ghat / Phi(t) on the valid range."""
    vals = g.values[g.valid]
    if vals.size == 0:
        return SteinBounds(c1_hat=float("nan"), c2_hat=float("nan"), passed=False)
    c1 = float(vals.min() / phi_t)
    c2 = float(vals.max() / phi_t)
    return SteinBounds(c1_hat=c1, c2_hat=c2, passed=c1 > 0.0)


# ---------------------------------------------------------------------------
# Kernel-norm sampling for the conditional diagnostics
# ---------------------------------------------------------------------------


def derivative_norm_samples(ensemble, drift, model, r_steps, thetas=(), chunk=None):
    """H-norms of derivative kernels at intermediate targets, per path.

    Returns (own, shifted) where own has shape (P, len(r_steps)) and
    shifted maps each theta to the norms along the correspondingly
    shifted path (one independent copy per path and theta).
    """
    lattice = ensemble.lattice
    op = model.operator
    dt = lattice.dt
    mu = spectral_weights(model, lattice)
    r_steps = tuple(int(n) for n in r_steps)
    chunk = chunk or default_chunk(lattice, budget_mb=128)
    paths = list(ensemble.path_indices)
    ranges = [paths[lo : lo + chunk] for lo in range(0, len(paths), chunk)]

    def norms_for(u):
        out = np.empty((u.shape[0], len(r_steps)))
        for i, n in enumerate(r_steps):
            acc = np.zeros(u.shape[0])
            for _, that in backward_sweep(u, drift, op, lattice, n):
                acc += _inner_step(that, that, mu)
            out[:, i] = np.sqrt(dt * acc)
        return out

    own_parts = []
    shifted_parts = {th: [] for th in thetas}
    for r in ranges:
        inc = sample_noise_batch(lattice, model, ensemble.seed, r)
        u, _ = solve_from_noise(inc, drift, op, lattice)
        own_parts.append(norms_for(u))
        for t_idx, theta in enumerate(thetas):
            streams = [DIAG_STREAM_BASE + p * len(thetas) + t_idx for p in r]
            inc_prime = sample_noise_batch(lattice, model, ensemble.seed, streams)
            u_shift, _ = solve_from_noise(
                shift_increments(inc, inc_prime, theta), drift, op, lattice
            )
            shifted_parts[theta].append(norms_for(u_shift))
    own = np.concatenate(own_parts, axis=0)
    shifted = {th: np.concatenate(parts, axis=0) for th, parts in shifted_parts.items()}
    return own, shifted
