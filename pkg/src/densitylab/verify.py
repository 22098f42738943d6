"""Reference density estimation and verification of the two-sided Gaussian bound.

The bound under test sandwiches the density p of u(t, x) between

    E|u-m| / (C2 Phi) exp(-(z-m)^2 / (C1 Phi))  <=  p(z)
    p(z)  <=  E|u-m| / (C1 Phi) exp(-(z-m)^2 / (C2 Phi)),

for constants 0 < C1 <= C2.  An exact Gaussian with variance Phi and the
matching E|u-m| saturates both sides at C1 = C2 = 2.  Constants are
searched on a log grid; feasibility is judged on a finite z range (by
default the central 99% of the sample) because kernel-density tails are
noise dominated.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .regress import silverman_bandwidth

SQRT2PI = math.sqrt(2.0 * math.pi)

# two-sided Kolmogorov-Smirnov asymptotic critical value at the 1% level
KS_CRIT_1PCT = math.sqrt(-math.log(0.005) / 2.0)

DEFAULT_C_GRID = 2.0 ** (np.arange(-16, 33) / 4.0)  # 2^-4 .. 2^8, quarter-octave steps


@dataclass
class KdeDensity:
    """Gaussian-kernel density estimate on a fixed grid."""

    z: np.ndarray
    p: np.ndarray
    bandwidth: float
    n: int


def kde(sample, m_hat, phi_t, z_points=401, bandwidth=None):
    """Kernel density estimate on the grid m_hat +- 5 sqrt(phi_t).

    Silverman bandwidth by default; refuses degenerate samples and
    samples smaller than 10^3 points.
    """
    sample = np.asarray(sample, dtype=float)
    if sample.size < 1000:
        raise ValueError(f"kde needs at least 1000 points, got {sample.size}")
    if sample.std() == 0:
        raise ValueError("degenerate sample: zero variance")
    h = bandwidth if bandwidth is not None else silverman_bandwidth(sample)
    half = 5.0 * math.sqrt(phi_t)
    z = np.linspace(m_hat - half, m_hat + half, z_points)
    p = np.exp(-0.5 * ((z[:, None] - sample[None, :]) / h) ** 2).sum(axis=1)
    p /= sample.size * h * SQRT2PI
    return KdeDensity(z=z, p=p, bandwidth=float(h), n=sample.size)


def _density_arrays(density):
    if isinstance(density, KdeDensity):
        return density.z, density.p
    if hasattr(density, "rho"):
        return density.z, density.rho
    raise TypeError(f"unsupported density object: {type(density)!r}")


@dataclass
class SandwichFit:
    """Fitted constants of the two-sided bound on a z range."""

    m_hat: float
    phi_t: float
    e_abs: float
    c1: float
    c2: float
    feasible: bool
    z_lo: float
    z_hi: float

    @property
    def ratio(self):
        return self.c2 / self.c1 if self.feasible else float("inf")

    def lower(self, z):
        q = (np.asarray(z) - self.m_hat) ** 2
        return self.e_abs / (self.c2 * self.phi_t) * np.exp(-q / (self.c1 * self.phi_t))

    def upper(self, z):
        q = (np.asarray(z) - self.m_hat) ** 2
        return self.e_abs / (self.c1 * self.phi_t) * np.exp(-q / (self.c2 * self.phi_t))

    def holds_on(self, z, p, tol=0.0):
        """Whether the fitted pair sandwiches the density values on (z, p)."""
        lo = self.lower(z)
        up = self.upper(z)
        return bool(np.all(lo <= p * (1 + tol)) and np.all(p * (1 - tol) <= up))


def _feasible_mask(z, p, m_hat, phi_t, e_abs, c_grid, tol=1e-9):
    """Feasibility of every (C1, C2) pair on the grid; shape (nc, nc).

    ``tol`` is a relative slack so that densities saturating a bound
    exactly (the Gaussian at C1 = C2 = 2) are not rejected by roundoff.
    """
    q = (z - m_hat) ** 2 / phi_t
    nc = len(c_grid)
    lo_pref = e_abs / (np.asarray(c_grid) * phi_t)  # indexed by the prefactor constant
    expo = np.exp(-q[None, :] / np.asarray(c_grid)[:, None])  # (nc, nz)
    ok = np.zeros((nc, nc), dtype=bool)
    up_tol = 1.0 + tol
    for i1 in range(nc):
        for i2 in range(i1, nc):
            lower = lo_pref[i2] * expo[i1]      # 1/C2 prefactor, 1/C1 exponent
            upper = lo_pref[i1] * expo[i2]      # 1/C1 prefactor, 1/C2 exponent
            ok[i1, i2] = bool(np.all(lower <= p * up_tol) and np.all(p <= upper * up_tol))
    return ok


def fit_sandwich(density, m_hat, phi_t, e_abs, z_range=None, c_grid=None):
    """Search (C1, C2) minimizing C2/C1 subject to the two-sided bound.

    ``density`` is a KdeDensity or a Stein-kernel density; the constraint
    is enforced at every grid point inside ``z_range`` (callers normally
    pass the central 99% range of the sample).  Infeasibility is a result,
    not an error.
    """
    z, p = _density_arrays(density)
    if z_range is not None:
        mask = (z >= z_range[0]) & (z <= z_range[1])
        z, p = z[mask], p[mask]
    if z.size == 0:
        raise ValueError("empty z range for the sandwich fit")
    if c_grid is None:
        c_grid = DEFAULT_C_GRID
    ok = _feasible_mask(z, p, m_hat, phi_t, e_abs, c_grid)
    return _pick_best(ok, c_grid, m_hat, phi_t, e_abs, z)


def fit_sandwich_joint(densities, m_hats, phi_ts, e_abss, z_ranges=None, c_grid=None):
    """One constant pair satisfying the bound for several densities at once."""
    if c_grid is None:
        c_grid = DEFAULT_C_GRID
    ok = None
    z_all = []
    for k, density in enumerate(densities):
        z, p = _density_arrays(density)
        if z_ranges is not None:
            mask = (z >= z_ranges[k][0]) & (z <= z_ranges[k][1])
            z, p = z[mask], p[mask]
        z_all.append(z)
        m = _feasible_mask(z, p, m_hats[k], phi_ts[k], e_abss[k], c_grid)
        ok = m if ok is None else (ok & m)
    z_cat = np.concatenate(z_all)
    return _pick_best(ok, c_grid, float("nan"), float("nan"), float("nan"), z_cat)


def _pick_best(ok, c_grid, m_hat, phi_t, e_abs, z):
    i1s, i2s = np.where(ok)
    z_lo, z_hi = float(z.min()), float(z.max())
    if i1s.size == 0:
        return SandwichFit(
            m_hat=m_hat, phi_t=phi_t, e_abs=e_abs,
            c1=float("nan"), c2=float("nan"), feasible=False, z_lo=z_lo, z_hi=z_hi,
        )
    ratios = np.asarray(c_grid)[i2s] / np.asarray(c_grid)[i1s]
    order = np.lexsort((np.asarray(c_grid)[i2s], ratios))
    best = order[0]
    return SandwichFit(
        m_hat=m_hat, phi_t=phi_t, e_abs=e_abs,
        c1=float(c_grid[i1s[best]]), c2=float(c_grid[i2s[best]]),
        feasible=True, z_lo=z_lo, z_hi=z_hi,
    )


@dataclass
class KsResult:
    statistic: float
    threshold: float
    n: int
    verdict: str  # pass | fail | insufficient-n


def gaussian_ks(sample, m_hat, phi_t, slack=1.0):
    """Two-sided KS statistic against N(m_hat, phi_t) with the 1% asymptotic threshold.

    Samples below 10^3 points are refused with the verdict
    ``insufficient-n``; ``slack`` scales the threshold to absorb declared
    discretization bias.
    """
    sample = np.asarray(sample, dtype=float)
    n = sample.size
    if n < 1000:
        return KsResult(statistic=float("nan"), threshold=float("nan"), n=n,
                        verdict="insufficient-n")
    stat = float(stats.kstest(sample, stats.norm(m_hat, math.sqrt(phi_t)).cdf).statistic)
    threshold = slack * KS_CRIT_1PCT / math.sqrt(n)
    return KsResult(
        statistic=stat, threshold=threshold, n=n,
        verdict="pass" if stat < threshold else "fail",
    )


@dataclass
class CrossValidation:
    l1_distance: float
    z_lo: float
    z_hi: float
    bandwidth_kde: float


def cross_validate(nv, kde_density):
    """L1 distance between the Stein-kernel density and the KDE on their overlap."""
    z1, p1 = _density_arrays(nv)
    z2, p2 = _density_arrays(kde_density)
    lo = max(z1.min(), z2.min())
    hi = min(z1.max(), z2.max())
    if lo >= hi:
        raise ValueError("density supports do not overlap")
    grid = np.linspace(lo, hi, 801)
    a = np.interp(grid, z1, p1)
    b = np.interp(grid, z2, p2)
    return CrossValidation(
        l1_distance=float(np.trapezoid(np.abs(a - b), grid)),
        z_lo=float(lo),
        z_hi=float(hi),
        bandwidth_kde=float(kde_density.bandwidth),
    )
