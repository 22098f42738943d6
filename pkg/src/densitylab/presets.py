"""Built-in experiment presets.

Lattice sides are at least eight times the diffusion / propagation radius
at the horizon so periodization bias stays below the Monte Carlo noise;
spectral cutoffs record the scale the grid must resolve and are validated
against the Nyquist frequency.
"""

from .config import (
    CorrelationConfig,
    DiagnosticsConfig,
    DriftConfig,
    ExperimentConfig,
    LatticeConfig,
    ModelConfig,
    SamplingConfig,
    ScanConfig,
    SteinConfig,
    ToleranceConfig,
)


def _heat1d_white(drift, n_paths, steps=200, seed=20250810):
    return ExperimentConfig(
        mode="pipeline",
        model=ModelConfig(
            operator="heat", dimension=1, horizon=0.5,
            correlation=CorrelationConfig(kind="white"),
        ),
        lattice=LatticeConfig(points=256, length=8.0, steps=steps),
        drift=drift,
        sampling=SamplingConfig(n_paths=n_paths, seed=seed),
        tolerances=ToleranceConfig(spectral_cutoff=10.0, ks_slack=1.5),
    )


def heat1d_white_b0():
    return _heat1d_white(DriftConfig(name="zero"), n_paths=10000)


def heat1d_white_linear():
    return _heat1d_white(DriftConfig(name="linear", param=0.5), n_paths=10000)


def heat1d_white_arctan():
    cfg = ExperimentConfig(
        mode="pipeline",
        model=ModelConfig(
            operator="heat", dimension=1, horizon=0.48,
            correlation=CorrelationConfig(kind="white"),
        ),
        lattice=LatticeConfig(points=64, length=8.0, steps=192),
        drift=DriftConfig(name="arctan", param=1.0),
        sampling=SamplingConfig(n_paths=1200, seed=20250810),
        stein=SteinConfig(theta_nodes=12, n_primes=1),
        tolerances=ToleranceConfig(spectral_cutoff=3.0, ks_slack=1.5),
    )
    return cfg


def heat2d_riesz_arctan():
    return ExperimentConfig(
        mode="pipeline",
        model=ModelConfig(
            operator="heat", dimension=2, horizon=0.4,
            correlation=CorrelationConfig(kind="riesz", epsilon=1.0),
        ),
        lattice=LatticeConfig(points=64, length=8.0, steps=96),
        drift=DriftConfig(name="arctan", param=0.5),
        sampling=SamplingConfig(n_paths=200, seed=20250810),
        tolerances=ToleranceConfig(spectral_cutoff=2.0),
        diagnostics=DiagnosticsConfig(bins=6, min_bin_count=30, r_points=4),
    )


def wave1d_white_arctan():
    return ExperimentConfig(
        mode="pipeline",
        model=ModelConfig(
            operator="wave", dimension=1, horizon=0.5,
            correlation=CorrelationConfig(kind="white"),
        ),
        lattice=LatticeConfig(points=128, length=8.0, steps=128),
        drift=DriftConfig(name="arctan", param=1.0),
        sampling=SamplingConfig(n_paths=1000, seed=20250810),
        tolerances=ToleranceConfig(spectral_cutoff=4.0),
    )


def wave3d_riesz_sine():
    return ExperimentConfig(
        mode="pipeline",
        model=ModelConfig(
            operator="wave", dimension=3, horizon=0.25,
            correlation=CorrelationConfig(kind="riesz", epsilon=1.0),
        ),
        lattice=LatticeConfig(points=32, length=4.0, steps=64),
        drift=DriftConfig(name="sine", param=0.5),
        sampling=SamplingConfig(n_paths=96, seed=20250810),
        stein=SteinConfig(theta_nodes=8, n_primes=1, min_local=10),
        diagnostics=DiagnosticsConfig(bins=4, min_bin_count=10, r_points=4),
        tolerances=ToleranceConfig(spectral_cutoff=2.0),
    )


def dalang_scan():
    return ExperimentConfig(
        mode="scan",
        scan=ScanConfig(
            dimension=3,
            epsilons=(0.5, 1.0, 1.5, 1.9, 2.1, 2.5),
            operators=("heat", "wave"),
            horizon=0.5,
        ),
    )


PRESETS = {
    "heat1d-white-b0": heat1d_white_b0,
    "heat1d-white-linear": heat1d_white_linear,
    "heat1d-white-arctan": heat1d_white_arctan,
    "heat2d-riesz-arctan": heat2d_riesz_arctan,
    "wave1d-white-arctan": wave1d_white_arctan,
    "wave3d-riesz-sine": wave3d_riesz_sine,
    "dalang-scan": dalang_scan,
}


def get_preset(name):
    from dataclasses import replace

    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    return replace(PRESETS[name](), preset=name)


def list_presets():
    """Stable catalog order."""
    return list(PRESETS)
