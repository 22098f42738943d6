"""Explicit time stepping for the mild-form integral equation on the lattice.

The scheme is the left-endpoint rectangle rule

    u(t_n, x) = X(t_n, x) + dt * sum_{j<n} [Gamma(t_n - s_j) * b(u(s_j, .))](x),

with the spatial convolution against the Green measure evaluated in
frequency space (the d=3 wave kernel is a surface measure, so the Fourier
multiplier is its only faithful lattice representation).  The causal sums
are advanced by the exact one-step accumulators from ``fields``.
"""

from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .errors import SolverBlowupError
from .fields import Lattice, LatticeField, build_X_batch, make_accumulator


# ---------------------------------------------------------------------------
# Drift catalog
# ---------------------------------------------------------------------------


def _b_zero(u):
    return np.zeros_like(u)


def _bp_zero(u):
    return np.zeros_like(u)


def _b_const(u, c):
    return np.full_like(u, c)


def _b_linear(u, lam):
    return lam * u


def _bp_const(u, lam):
    return np.full_like(u, lam)


def _b_arctan(u, a):
    return a * np.arctan(u)


def _bp_arctan(u, a):
    return a / (1.0 + u * u)


def _b_sine(u, a):
    return a * np.sin(u)


def _bp_sine(u, a):
    return a * np.cos(u)


@dataclass(frozen=True, eq=False)
class DriftSpec:
    """Drift function, its derivative, and the declared Lipschitz bound.

    ``constant_derivative`` marks drifts whose derivative does not depend
    on the state; for those the derivative kernels are deterministic and
    downstream estimators may reuse one kernel for every path (an exact
    identity, not an approximation).
    """

    name: str
    param: float | None
    b: callable
    b_prime: callable
    lip: float
    constant_derivative: bool = field(default=False)


DRIFT_NAMES = ("zero", "constant", "linear", "arctan", "sine")


def make_drift(name, param=None):
    """Built-in drift catalog: zero, constant(c), linear(lam), arctan(a), sine(a)."""
    if name == "zero":
        return DriftSpec("zero", None, _b_zero, _bp_zero, 0.0, constant_derivative=True)
    if param is None:
        raise ValueError(f"drift {name!r} needs a parameter")
    p = float(param)
    if name == "constant":
        return DriftSpec(
            "constant", p, partial(_b_const, c=p), _bp_zero, 0.0, constant_derivative=True
        )
    if name == "linear":
        return DriftSpec(
            "linear", p, partial(_b_linear, lam=p), partial(_bp_const, lam=p),
            abs(p), constant_derivative=True,
        )
    if name == "arctan":
        return DriftSpec("arctan", p, partial(_b_arctan, a=p), partial(_bp_arctan, a=p), abs(p))
    if name == "sine":
        return DriftSpec("sine", p, partial(_b_sine, a=p), partial(_bp_sine, a=p), abs(p))
    raise ValueError(f"unknown drift {name!r}; choose from {DRIFT_NAMES}")


# ---------------------------------------------------------------------------
# Core stepping loops
# ---------------------------------------------------------------------------


def _drift_loop(x_at, drift, op, lattice, batch):
    """Shared recursion; ``x_at(n)`` supplies the convolution field X(t_n).

    Returns (u, first_bad_step_per_path) where a -1 entry means the path
    stayed finite.
    """
    M = lattice.steps
    dt = lattice.dt
    axes = lattice.space_axes
    u = np.empty((batch, M + 1) + lattice.space_shape)
    u[:, 0] = x_at(0)
    bad = np.full(batch, -1, dtype=np.int64)
    acc = make_accumulator(op, lattice, batch_shape=(batch,))
    flat = u.reshape(batch, M + 1, -1)
    for n in range(1, M + 1):
        acc.push(np.fft.fftn(drift.b(u[:, n - 1]), axes=axes))
        acc.advance()
        u[:, n] = x_at(n) + dt * np.fft.ifftn(acc.value(), axes=axes).real
        finite = np.isfinite(flat[:, n]).all(axis=1)
        if not finite.all():
            fresh = (~finite) & (bad < 0)
            bad[fresh] = n
            flat[fresh, n] = 0.0  # keep the rest of the batch numeric
    return u, bad


def solve_batch(X, drift, op, lattice):
    """Solve the integral equation for a batch of convolution fields X (P, M+1, space)."""
    if drift.name == "zero":
        return X.copy(), np.full(X.shape[0], -1, dtype=np.int64)
    return _drift_loop(lambda n: X[:, n], drift, op, lattice, X.shape[0])


def solve_from_noise(increments, drift, op, lattice):
    """Fused synthesis + solve: computes X(t_n) on the fly from frequency increments.

    Produces fields identical to build_X_batch followed by solve_batch,
    without materializing X for all times.
    """
    P = increments.shape[0]
    axes = lattice.space_axes
    noise_acc = make_accumulator(op, lattice, batch_shape=(P,))
    zero = np.zeros((P,) + lattice.space_shape)

    def x_at(n):
        if n == 0:
            return zero
        noise_acc.push(increments[:, n - 1])
        noise_acc.advance()
        return np.fft.ifftn(noise_acc.value(), axes=axes).real

    if drift.name == "zero":
        X = build_X_batch(increments, op, lattice)
        return X, np.full(P, -1, dtype=np.int64)
    return _drift_loop(x_at, drift, op, lattice, P)


@dataclass
class SolutionPath:
    """One solved path with the monitored time series at the origin."""

    field: LatticeField
    x_ref: tuple
    u_ref: np.ndarray


def solve_mild(X, drift, model):
    """Solve one path from its stochastic convolution field.

    Raises SolverBlowupError if the path leaves the finite range; vanishing
    initial conditions are inherited from X(0, .) = 0.
    """
    lattice = X.lattice
    u, bad = solve_batch(X.values[None], drift, model.operator, lattice)
    if bad[0] >= 0:
        prev = u[0, : bad[0]]
        raise SolverBlowupError(int(bad[0]), float(np.abs(prev).max()) if prev.size else 0.0)
    fld = LatticeField(lattice=lattice, values=u[0])
    return SolutionPath(field=fld, x_ref=(0,) * lattice.dimension, u_ref=fld.origin_series())


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------


@dataclass
class EnsembleSummary:
    """Monitored output of a solved ensemble plus what is needed to regenerate it.

    Paths are never stored: they are reproducible bit for bit from
    (seed, path index), so downstream stages regenerate them on demand.
    """

    lattice: Lattice
    model: object
    drift_name: str
    drift_param: float | None
    seed: int
    n_paths: int
    target_steps: tuple
    path_indices: np.ndarray   # surviving path ids (regeneration keys)
    u_ref: np.ndarray          # (n_ok, M+1) series at the origin
    mean_series: np.ndarray    # ensemble mean of u_ref per time step
    centered: np.ndarray       # (n_ok, n_targets) F = u - mean at targets
    n_failed: int

    def target_times(self):
        return np.asarray(self.target_steps) * self.lattice.dt

    def f_sample(self, target_step):
        i = self.target_steps.index(target_step)
        return self.centered[:, i]

    def mean_at(self, target_step):
        return float(self.mean_series[target_step])


def default_chunk(lattice, budget_mb=256):
    """Paths per chunk keeping the complex increment block under ~budget_mb."""
    bytes_per_path = lattice.steps * lattice.cell_count * 16
    return max(4, int(budget_mb * 2**20 / max(bytes_per_path, 1)))


def _ensemble_chunk(lattice, model, drift, seed, streams, spectral_cutoff):
    from .fields import sample_noise_batch

    inc = sample_noise_batch(lattice, model, seed, streams, spectral_cutoff)
    u, bad = solve_from_noise(inc, drift, model.operator, lattice)
    origin = (slice(None), slice(None)) + (0,) * lattice.dimension
    return u[origin].copy(), bad


def _ensemble_chunk_args(args):
    lattice, model, drift_name, drift_param, seed, streams, cutoff = args
    drift = make_drift(drift_name, drift_param)
    return _ensemble_chunk(lattice, model, drift, seed, list(streams), cutoff)


def ensemble_solve(
    model,
    drift,
    lattice,
    n_paths,
    seed,
    target_times=None,
    chunk=None,
    workers=1,
    spectral_cutoff=None,
    max_failure_fraction=1e-3,
):
    """Solve n_paths independent paths and return the monitored summary.

    Deterministic in (seed, n_paths, lattice, model, drift): the reduction
    runs in path order over fixed-size chunks, so neither chunking nor the
    worker count changes any output bit.  Aborts if more than
    ``max_failure_fraction`` of the paths blow up.
    """
    if n_paths < 2:
        raise ValueError("an ensemble needs at least 2 paths")
    if target_times is None:
        target_times = [lattice.horizon]
    target_steps = tuple(lattice.step_of(t) for t in target_times)
    chunk = chunk or default_chunk(lattice)
    ranges = [range(lo, min(lo + chunk, n_paths)) for lo in range(0, n_paths, chunk)]

    results = []
    if workers > 1:
        import concurrent.futures as cf

        jobs = [
            (lattice, model, drift.name, drift.param, seed, tuple(r), spectral_cutoff)
            for r in ranges
        ]
        with cf.ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_ensemble_chunk_args, jobs))
    else:
        for r in ranges:
            results.append(
                _ensemble_chunk(lattice, model, drift, seed, list(r), spectral_cutoff)
            )

    u_ref = np.concatenate([r[0] for r in results], axis=0)
    bad = np.concatenate([r[1] for r in results])
    n_failed = int((bad >= 0).sum())
    if n_failed > max_failure_fraction * n_paths:
        raise SolverBlowupError(int(bad[bad >= 0].min()), float("nan"))
    ok = bad < 0
    u_ref = u_ref[ok]
    mean_series = u_ref.mean(axis=0)
    centered = u_ref[:, list(target_steps)] - mean_series[list(target_steps)]
    return EnsembleSummary(
        lattice=lattice,
        model=model,
        drift_name=drift.name,
        drift_param=drift.param,
        seed=seed,
        n_paths=n_paths,
        target_steps=target_steps,
        path_indices=np.where(ok)[0],
        u_ref=u_ref,
        mean_series=mean_series,
        centered=centered,
        n_failed=n_failed,
    )
