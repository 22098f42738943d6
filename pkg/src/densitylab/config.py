"""Experiment configuration: schema, validation, YAML round trip, hashing."""

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import yaml

from .errors import ValidationError
from .fields import Lattice
from .solver import DRIFT_NAMES, make_drift
from .spectral import Operator, RieszKernel, SpectralModel, TabulatedDensity, WhiteNoise


@dataclass(frozen=True)
class CorrelationConfig:
    kind: str = "white"            # white | riesz | tabulated
    epsilon: float | None = None   # riesz
    csv: str | None = None         # tabulated: path to (xi_radius, density) table


@dataclass(frozen=True)
class ModelConfig:
    operator: str = "heat"
    dimension: int = 1
    horizon: float = 0.5
    correlation: CorrelationConfig = field(default_factory=CorrelationConfig)


@dataclass(frozen=True)
class LatticeConfig:
    points: int = 64
    length: float = 8.0
    steps: int = 64


@dataclass(frozen=True)
class DriftConfig:
    name: str = "zero"
    param: float | None = None


@dataclass(frozen=True)
class SamplingConfig:
    n_paths: int = 200
    seed: int = 20250810
    chunk: int = 0                 # 0 = automatic
    workers: int = 1


@dataclass(frozen=True)
class SteinConfig:
    theta_nodes: int = 12
    n_primes: int = 1
    z_points: int = 101
    bootstrap: int = 200
    min_local: int = 30    # local-sample floor below which a z point is excluded


@dataclass(frozen=True)
class LadderConfig:
    scan_fractions: tuple = (0.125, 0.25, 0.5, 1.0)
    stability_ratio: float = 4.0


@dataclass(frozen=True)
class DiagnosticsConfig:
    bins: int = 20
    min_bin_count: int = 30
    r_points: int = 6
    theta_probe: tuple = (0.1, 1.0, 5.0)


@dataclass(frozen=True)
class ToleranceConfig:
    quad_rel: float = 1e-6
    spectral_cutoff: float | None = None
    ks_slack: float = 1.5


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "runs"


@dataclass(frozen=True)
class ScanConfig:
    dimension: int = 3
    epsilons: tuple = (0.5, 1.0, 1.5, 1.9, 2.1, 2.5)
    operators: tuple = ("heat", "wave")
    horizon: float = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str | None = None
    mode: str = "pipeline"         # pipeline | scan
    model: ModelConfig = field(default_factory=ModelConfig)
    lattice: LatticeConfig = field(default_factory=LatticeConfig)
    drift: DriftConfig = field(default_factory=DriftConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    stein: SteinConfig = field(default_factory=SteinConfig)
    ladder: LadderConfig = field(default_factory=LadderConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    tolerances: ToleranceConfig = field(default_factory=ToleranceConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    scan: ScanConfig = field(default_factory=ScanConfig)

    # ---- builders -------------------------------------------------------

    def build_model(self):
        mc = self.model
        op = Operator(mc.operator, mc.dimension)
        cc = mc.correlation
        if cc.kind == "white":
            corr = WhiteNoise()
        elif cc.kind == "riesz":
            corr = RieszKernel(cc.epsilon)
        elif cc.kind == "tabulated":
            radii, values = load_tabulated_csv(cc.csv)
            corr = TabulatedDensity(radii=tuple(radii), values=tuple(values))
        else:
            raise ValidationError(f"unknown correlation kind {cc.kind!r}")
        return SpectralModel(op, corr, horizon=mc.horizon)

    def build_lattice(self):
        lc = self.lattice
        return Lattice(
            dimension=self.model.dimension,
            length=lc.length,
            points=lc.points,
            steps=lc.steps,
            horizon=self.model.horizon,
        )

    def build_drift(self):
        return make_drift(self.drift.name, self.drift.param)

    def scan_steps(self):
        return tuple(
            int(round(f * self.lattice.steps)) for f in self.ladder.scan_fractions
        )


# ---------------------------------------------------------------------------
# dict / YAML round trip
# ---------------------------------------------------------------------------

def config_to_dict(cfg):
    d = asdict(cfg)

    def clean(x):
        if isinstance(x, dict):
            return {k: clean(v) for k, v in x.items()}
        if isinstance(x, tuple):
            return [clean(v) for v in x]
        if isinstance(x, (np.floating, np.integer)):
            return x.item()
        return x

    return clean(d)


def config_from_dict(d):
    def sub(cls, data):
        return cls(**data) if data is not None else cls()

    d = dict(d)
    model = d.get("model", {})
    corr = sub(CorrelationConfig, model.get("correlation"))
    model = ModelConfig(
        operator=model.get("operator", "heat"),
        dimension=model.get("dimension", 1),
        horizon=model.get("horizon", 0.5),
        correlation=corr,
    )

    def tup(cls, data, *tuple_fields):
        if data is None:
            return cls()
        data = dict(data)
        for f_ in tuple_fields:
            if f_ in data and isinstance(data[f_], list):
                data[f_] = tuple(data[f_])
        return cls(**data)

    return ExperimentConfig(
        preset=d.get("preset"),
        mode=d.get("mode", "pipeline"),
        model=model,
        lattice=sub(LatticeConfig, d.get("lattice")),
        drift=sub(DriftConfig, d.get("drift")),
        sampling=sub(SamplingConfig, d.get("sampling")),
        stein=sub(SteinConfig, d.get("stein")),
        ladder=tup(LadderConfig, d.get("ladder"), "scan_fractions"),
        diagnostics=tup(DiagnosticsConfig, d.get("diagnostics"), "theta_probe"),
        tolerances=sub(ToleranceConfig, d.get("tolerances")),
        output=sub(OutputConfig, d.get("output")),
        scan=tup(ScanConfig, d.get("scan"), "epsilons", "operators"),
    )


def save_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)


def load_config(path):
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ValidationError(f"config file {path} does not contain a mapping")
    return config_from_dict(data)


def config_hash(cfg):
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def load_tabulated_csv(path):
    """Two-column CSV (xi_radius, density) with a mandatory header row."""
    if path is None:
        raise ValidationError("tabulated correlation needs a csv path")
    with open(path) as fh:
        header = fh.readline()
        try:
            float(header.split(",")[0])
            raise ValidationError(f"tabulated csv {path} is missing its header row")
        except ValueError:
            pass
        rows = np.loadtxt(fh, delimiter=",", ndmin=2)
    if rows.shape[1] != 2:
        raise ValidationError(f"tabulated csv {path} must have exactly two columns")
    return rows[:, 0], rows[:, 1]


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_config(cfg):
    """Collect all problems before any computation; raises ValidationError."""
    problems = []
    m, l = cfg.model, cfg.lattice

    if cfg.mode not in ("pipeline", "scan"):
        problems.append(f"mode must be pipeline or scan, got {cfg.mode!r}")
    if m.operator not in ("heat", "wave"):
        problems.append(f"operator must be heat or wave, got {m.operator!r}")
    if m.operator == "wave" and not 1 <= m.dimension <= 3:
        problems.append(f"wave operator needs dimension in 1..3, got {m.dimension}")
    if m.dimension < 1:
        problems.append(f"dimension must be positive, got {m.dimension}")
    if m.horizon <= 0:
        problems.append(f"horizon must be positive, got {m.horizon}")

    cc = m.correlation
    if cc.kind not in ("white", "riesz", "tabulated"):
        problems.append(f"correlation kind must be white, riesz or tabulated, got {cc.kind!r}")
    if cc.kind == "riesz":
        if cc.epsilon is None or not 0 < cc.epsilon < m.dimension:
            problems.append(
                f"riesz exponent must satisfy 0 < eps < d={m.dimension}, got {cc.epsilon}"
            )
    if cc.kind == "tabulated" and not cc.csv:
        problems.append("tabulated correlation needs a csv path")

    if l.points < 2 or (l.points & (l.points - 1)) != 0:
        problems.append(f"lattice points must be a power of two, got {l.points}")
    if l.length <= 0:
        problems.append(f"lattice length must be positive, got {l.length}")
    if l.steps < 8:
        problems.append(f"lattice needs at least 8 time steps, got {l.steps}")

    if cfg.drift.name not in DRIFT_NAMES:
        problems.append(f"drift must be one of {DRIFT_NAMES}, got {cfg.drift.name!r}")
    if cfg.drift.name != "zero" and cfg.drift.param is None:
        problems.append(f"drift {cfg.drift.name!r} needs a parameter")

    s = cfg.sampling
    if s.n_paths < 2:
        problems.append(f"n_paths must be >= 2, got {s.n_paths}")
    if s.workers < 1:
        problems.append(f"workers must be >= 1, got {s.workers}")
    if cfg.stein.theta_nodes < 1:
        problems.append("theta_nodes must be >= 1")
    if cfg.stein.n_primes < 1:
        problems.append("n_primes must be >= 1")

    for f_ in cfg.ladder.scan_fractions:
        n = f_ * l.steps
        if not 0 < f_ <= 1:
            problems.append(f"scan fraction {f_} outside (0, 1]")
        elif abs(n - round(n)) > 1e-9:
            problems.append(f"scan fraction {f_} does not hit a grid step (steps={l.steps})")

    t = cfg.tolerances
    if t.quad_rel <= 0:
        problems.append("quadrature tolerance must be positive")
    if t.spectral_cutoff is not None:
        nyq = l.points / (2.0 * l.length)
        if nyq <= t.spectral_cutoff:
            problems.append(
                f"lattice Nyquist {nyq:g} does not exceed spectral cutoff {t.spectral_cutoff:g}"
            )
    if t.ks_slack <= 0:
        problems.append("ks_slack must be positive")

    if cfg.mode == "scan":
        sc = cfg.scan
        if sc.dimension < 1:
            problems.append("scan dimension must be positive")
        for eps in sc.epsilons:
            if not 0 < eps < sc.dimension:
                problems.append(f"scan epsilon {eps} outside (0, d={sc.dimension})")
        for opk in sc.operators:
            if opk not in ("heat", "wave"):
                problems.append(f"scan operator {opk!r} unknown")

    if problems:
        raise ValidationError(problems)
    return cfg


def with_overrides(cfg, seed=None, n_paths=None, workers=None, out_dir=None):
    """Apply CLI flag overrides without mutating the original config."""
    if seed is not None or n_paths is not None or workers is not None:
        s = cfg.sampling
        cfg = replace(
            cfg,
            sampling=SamplingConfig(
                n_paths=n_paths if n_paths is not None else s.n_paths,
                seed=seed if seed is not None else s.seed,
                chunk=s.chunk,
                workers=workers if workers is not None else s.workers,
            ),
        )
    if out_dir is not None:
        cfg = replace(cfg, output=OutputConfig(directory=out_dir))
    return cfg
