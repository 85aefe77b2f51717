"""Run configuration: nested dataclasses that round-trip through JSON."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

from .surrogate import TrainOptions


class ConfigError(ValueError):
    pass


MODEL_DEFAULTS = {
    "benchmark": {},
    "diffusion": {"sigma": 0.42, "threshold": 0.19, "sensor": (0.5, 0.5), "coef_floor": 0.01},
    "helmholtz": {"sigma": 0.1, "threshold": 1.09, "sensor": (0.7264, 0.4912)},
}


@dataclass
class ModelSpec:
    kind: str = "benchmark"
    beta: float = 3.5
    n: int = 50
    grid: int = 65
    a0: float = 1.0
    sigma: float | None = None
    corr_len: float = 0.8
    kl_terms: int = 48
    threshold: float | None = None
    sensor: list | None = None
    xi: str = "uniform"
    k0: float = 3.7
    coef_floor: float | None = None

    def validate(self):
        if self.kind not in MODEL_DEFAULTS:
            raise ConfigError(f"model.kind must be one of {sorted(MODEL_DEFAULTS)}, got {self.kind!r}")
        if self.kind == "benchmark":
            if self.n < 1:
                raise ConfigError("model.n must be >= 1")
            return
        if self.grid < 3:
            raise ConfigError("model.grid must be >= 3")
        if self.kl_terms < 1 or self.kl_terms > self.grid ** 2:
            raise ConfigError("model.kl_terms must lie in [1, grid^2]")
        if not self.corr_len > 0:
            raise ConfigError("model.corr_len must be positive")
        if self.sigma is not None and self.sigma < 0:
            raise ConfigError("model.sigma must be nonnegative")
        if self.xi not in ("uniform", "normal"):
            raise ConfigError("model.xi must be 'uniform' or 'normal'")
        if self.coef_floor is not None and not self.coef_floor > 0:
            raise ConfigError("model.coef_floor must be positive")
        if self.sensor is not None:
            if len(self.sensor) != 2 or not all(0 <= c <= 1 for c in self.sensor):
                raise ConfigError("model.sensor must be a point in the unit square")

    def resolved(self, key):
        v = getattr(self, key)
        return MODEL_DEFAULTS[self.kind].get(key) if v is None else v


@dataclass
class HierarchySpec:
    depths: list = field(default_factory=lambda: [2, 4, 6])
    width: int = 32
    train_size: int = 1000
    val_fraction: float = 0.2
    data_seed: int = 1000
    activation: str = "tanh"
    train: TrainOptions = field(default_factory=lambda: TrainOptions(
        epochs=1000, learning_rate=3e-2, weight_decay=1e-3, cv_folds=0))

    def validate(self):
        d = self.depths
        if not d or any(int(p) != p or p < 1 for p in d):
            raise ConfigError("hierarchy.depths must be a nonempty list of positive integers")
        if any(b <= a for a, b in zip(d[:-1], d[1:])):
            raise ConfigError(f"hierarchy.depths must be strictly ascending, got {d}")
        if self.width < 1:
            raise ConfigError("hierarchy.width must be >= 1")
        if self.train_size < 2:
            raise ConfigError("hierarchy.train_size must be >= 2")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("hierarchy.val_fraction must be in [0, 1)")
        if self.activation not in ("tanh", "identity", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")


@dataclass
class EstimationSpec:
    samples: int = 1_000_000
    delta_m: int = 500
    eps_opt: float | None = None
    eta: float | None = None
    seed: int = 0
    signed_eps: bool = False
    reference: float | str | None = None

    def validate(self):
        if self.samples < 1:
            raise ConfigError("estimation.samples must be >= 1")
        if not 1 <= self.delta_m <= self.samples:
            raise ConfigError("estimation.delta_m must lie in [1, samples]")
        if self.eps_opt is not None and not self.eps_opt > 0:
            raise ConfigError("estimation.eps_opt must be positive")
        if self.eta is not None and not self.eta >= 0:
            raise ConfigError("estimation.eta must be nonnegative")


@dataclass
class McSpec:
    samples: int = 1_000_000
    seed: int = 7

    def validate(self):
        if self.samples < 1:
            raise ConfigError("mc_reference.samples must be >= 1")


@dataclass
class CompareSpec:
    samples: list = field(default_factory=lambda: [10_000, 100_000, 1_000_000])
    seed: int = 11

    def validate(self):
        if not self.samples or any(m < 1 for m in self.samples):
            raise ConfigError("compare.samples must be a nonempty list of positive counts")


@dataclass
class DiagnoseSpec:
    samples: int = 10_000
    seed: int = 13
    C: float = 2.0
    a: float = 2.0
    rho: float = 0.1
    epsilon: float = 1e-3
    n_eta: int = 25

    def validate(self):
        if self.samples < 1:
            raise ConfigError("diagnose.samples must be >= 1")
        if not (self.C > 1 and self.a > 1 and 0 < self.rho < 1 and self.epsilon > 0):
            raise ConfigError("diagnose needs C > 1, a > 1, 0 < rho < 1, epsilon > 0")


@dataclass
class RunConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    hierarchy: HierarchySpec = field(default_factory=HierarchySpec)
    estimation: EstimationSpec = field(default_factory=EstimationSpec)
    mc_reference: McSpec = field(default_factory=McSpec)
    compare: CompareSpec = field(default_factory=CompareSpec)
    diagnose: DiagnoseSpec = field(default_factory=DiagnoseSpec)
    out: str = "runs/default"

    def validate(self) -> "RunConfig":
        for f in dataclasses.fields(self):
            part = getattr(self, f.name)
            if hasattr(part, "validate"):
                part.validate()
        return self

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        sub = _NESTED.get((cls, k))
        kwargs[k] = _build(sub, v, f"{where}.{k}") if sub else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


_NESTED = {
    (RunConfig, "model"): ModelSpec,
    (RunConfig, "hierarchy"): HierarchySpec,
    (RunConfig, "estimation"): EstimationSpec,
    (RunConfig, "mc_reference"): McSpec,
    (RunConfig, "compare"): CompareSpec,
    (RunConfig, "diagnose"): DiagnoseSpec,
    (HierarchySpec, "train"): TrainOptions,
}


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "config").validate()


def load_config(path) -> RunConfig:
    """Read a config file; a run manifest is accepted too (its ``config`` entry is used)."""
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(data, dict) and "manifest_version" in data:
        data = data["config"]
    return config_from_dict(data)


def save_config(cfg: RunConfig, path) -> None:
    from .surrogate import atomic_write_bytes

    atomic_write_bytes(path, (cfg.dumps() + "\n").encode())


# --- model construction ---------------------------------------------------

@lru_cache(maxsize=8)
def _kl_field(a0, sigma, corr_len, n, d):
    from .models.grid import Grid2D
    from .models.kl import kl_build

    return kl_build(a0, sigma, corr_len, Grid2D.square(n), d)


def build_model(spec: ModelSpec):
    """Limit-state model for a spec (PDE models come wrapped as ``threshold - u(sensor)``)."""
    from .models import BenchmarkModel, DiffusionModel, HelmholtzModel, model_as_limit_state

    spec.validate()
    if spec.kind == "benchmark":
        return BenchmarkModel(spec.beta, spec.n)
    field_ = _kl_field(float(spec.a0), float(spec.resolved("sigma")), float(spec.corr_len),
                       int(spec.grid), int(spec.kl_terms))
    sensor = tuple(spec.resolved("sensor"))
    threshold = float(spec.resolved("threshold"))
    if spec.kind == "diffusion":
        model = DiffusionModel(field_, threshold, sensor, spec.xi, coef_floor=spec.resolved("coef_floor"))
    else:
        model = HelmholtzModel(field_, spec.k0, threshold, sensor, spec.xi)
    return model_as_limit_state(model)


def reference_value(spec: EstimationSpec, model, base: Path | None = None):
    """Resolve ``estimation.reference``: a number, ``"exact"`` or a reference-file path."""
    ref = spec.reference
    if ref is None:
        return None
    if isinstance(ref, (int, float)):
        return float(ref)
    if ref == "exact":
        if not hasattr(model, "exact_failure_probability"):
            raise ConfigError("reference 'exact' is only available for the benchmark model")
        return model.exact_failure_probability()
    path = Path(ref)
    if base is not None and not path.is_absolute() and not path.exists():
        path = base / path
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"reference file {path} not found") from None
    p = data["estimate"]["p_hat"] if "estimate" in data else data["p_hat"]
    if not math.isfinite(p):
        raise ConfigError("reference value is not finite")
    return float(p)
