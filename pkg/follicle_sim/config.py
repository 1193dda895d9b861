import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

from dotenv import load_dotenv

from .errors import ConfigError
from .model import ModelParams

# Load .env file
load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_LOG_LEVEL = os.getenv("FOLLICLE_LOG_LEVEL", "INFO")
DEFAULT_OUTPUT_DIR = os.getenv("FOLLICLE_OUTPUT_DIR", "output")


def default_threads() -> int:
    """Worker threads from ``FOLLICLE_THREADS``, falling back to the core count."""
    raw = os.getenv("FOLLICLE_THREADS")
    if raw:
        try:
            value = int(raw)
        except ValueError as exc:
            raise ConfigError("FOLLICLE_THREADS must be an integer", value=raw) from exc
        if value < 1:
            raise ConfigError("FOLLICLE_THREADS must be >= 1", value=value)
        return value
    return os.cpu_count() or 1


@dataclass(frozen=True)
class TestHooks:
    """Test-only switches. None of them is active in a production run."""

    __test__ = False  # keep pytest from collecting this class

    zero_loss: bool = False
    disable_mitosis: bool = False
    closed_domain: bool = False
    jacobian_perturbation: float = 0.0

    @property
    def mitosis_factor(self) -> float:
        return 1.0 if self.disable_mitosis else 2.0


@dataclass(frozen=True)
class SolverSettings:
    dt_ctrl: Optional[float] = None
    rk4_step: Optional[float] = None
    quad_order: int = 7
    quad_strips: int = 1
    quad_rtol: float = 1e-7
    quad_atol: float = 1e-13
    quad_max_level: int = 3
    fp_tol: float = 1e-10
    fp_max_iter: int = 200
    window_safety: float = 0.9
    k1_inflation: float = 1.05
    k2_deflation: float = 0.95
    constants_grid: int = 64
    contraction_pairs: int = 1
    max_composed_windows: int = 8
    resample_resolution: int = 1024
    threads: int = field(default_factory=default_threads)
    chunk_size: int = 4096
    seed: int = 0

    def __post_init__(self):
        for name in ("quad_order", "quad_strips", "fp_max_iter", "constants_grid", "max_composed_windows", "resample_resolution", "threads", "chunk_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"solver setting {name} must be >= 1")
        if not 0 < self.window_safety <= 1:
            raise ConfigError("window_safety must lie in (0, 1]")
        for name in ("dt_ctrl", "rk4_step"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ConfigError(f"solver setting {name} must be positive")

    def control_spacing(self, delta: float) -> float:
        return self.dt_ctrl if self.dt_ctrl is not None else delta / 8.0

    def integrator_step(self, delta: float, horizon: float) -> float:
        if self.rk4_step is not None:
            return self.rk4_step
        return min(self.control_spacing(delta), 1e-3 * horizon)

    def with_changes(self, **changes) -> "SolverSettings":
        return replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], **overrides) -> "SolverSettings":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError("unknown solver settings", unknown=unknown)
        merged = dict(data)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**merged)


@dataclass(frozen=True)
class VerifySettings:
    contraction_pairs: int = 20
    jacobian_segments: int = 100
    weak_test_functions: int = 10
    bound_samples: int = 10000
    trace_samples: int = 64
    fv_resolution: int = 32
    fv_steps: int = 20

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "VerifySettings":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError("unknown verify settings", unknown=unknown)
        return cls(**data)


RUN_KEYS = {"params", "initial_data", "method", "output_resolution", "output_times", "seed", "solver", "hooks", "verify"}
HOOK_KEYS = {"freeze_controls", "disable_mitosis", "zero_loss", "closed_domain", "jacobian_perturbation"}
METHODS = ("char", "fv", "both")


@dataclass(frozen=True)
class RunConfig:
    params: ModelParams
    initial_data: List[Dict[str, Any]]
    method: str = "char"
    output_resolution: int = 32
    output_times: List[float] = field(default_factory=list)
    seed: int = 0
    solver: SolverSettings = field(default_factory=SolverSettings)
    hooks: TestHooks = field(default_factory=TestHooks)
    freeze_controls: Optional[Path] = None
    verify: VerifySettings = field(default_factory=VerifySettings)
    source: Optional[Path] = None

    def with_changes(self, **changes) -> "RunConfig":
        return replace(self, **changes)


def _read_json(path: Path) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return json.load(handle)
    except FileNotFoundError as exc:
        raise ConfigError("file not found", path=str(path)) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc.msg}", path=str(path), line=exc.lineno) from exc


def load_params(path) -> ModelParams:
    """Load a strict parameter file.

    Args:
        path: JSON file with exactly one key per ``ModelParams`` field.

    Returns:
        ModelParams: the validated parameter set.
    """
    data = _read_json(Path(path))
    if not isinstance(data, dict):
        raise ConfigError("parameter file must hold a JSON object", path=str(path))
    data = {k: v for k, v in data.items() if not k.startswith("$")}
    return ModelParams.from_mapping(data)


def load_run_config(path, **solver_overrides) -> RunConfig:
    """Load a run configuration; ``solver_overrides`` come from CLI flags."""
    path = Path(path)
    data = _read_json(path)
    if not isinstance(data, dict):
        raise ConfigError("run config must hold a JSON object", path=str(path))
    unknown = sorted(set(data) - RUN_KEYS)
    if unknown:
        raise ConfigError("unknown run config keys", unknown=unknown)
    if "params" not in data or "initial_data" not in data:
        raise ConfigError("run config needs 'params' and 'initial_data'")

    base = path.parent
    params_path = base / data["params"]
    params = load_params(params_path)

    method = data.get("method", "char")
    if method not in METHODS:
        raise ConfigError("method must be one of char, fv, both", method=method)

    times = [float(t) for t in data.get("output_times", [params.T])]
    if any(t < 0 or t > params.T for t in times):
        raise ConfigError("output times must lie in [0, T]", output_times=times, T=params.T)

    hooks_data = data.get("hooks", {})
    unknown_hooks = sorted(set(hooks_data) - HOOK_KEYS)
    if unknown_hooks:
        raise ConfigError("unknown hooks", unknown=unknown_hooks)
    freeze = hooks_data.get("freeze_controls")
    freeze_path = None
    if freeze:
        freeze_path = base / freeze
        if not freeze_path.exists():
            raise ConfigError("frozen control file not found", path=str(freeze_path))
    hooks = TestHooks(
        zero_loss=bool(hooks_data.get("zero_loss", False)),
        disable_mitosis=bool(hooks_data.get("disable_mitosis", False)),
        closed_domain=bool(hooks_data.get("closed_domain", False)),
        jacobian_perturbation=float(hooks_data.get("jacobian_perturbation", 0.0)),
    )

    seed = int(data.get("seed", 0))
    solver = SolverSettings.from_mapping(data.get("solver", {}), seed=seed, **solver_overrides)
    resolution = int(data.get("output_resolution", 32))
    if resolution < 1:
        raise ConfigError("output_resolution must be >= 1")

    initial_data = data["initial_data"]
    if not isinstance(initial_data, list):
        raise ConfigError("initial_data must be a list of component specs")

    return RunConfig(
        params=params,
        initial_data=initial_data,
        method=method,
        output_resolution=resolution,
        output_times=sorted(times),
        seed=seed,
        solver=solver,
        hooks=hooks,
        freeze_controls=freeze_path,
        verify=VerifySettings.from_mapping(data.get("verify", {})),
        source=path,
    )


def parse_resolutions(values: Sequence[str]) -> List[int]:
    try:
        resolutions = sorted({int(v) for v in values})
    except ValueError as exc:
        raise ConfigError("resolutions must be integers", values=list(values)) from exc
    if len(resolutions) < 3:
        raise ConfigError("a convergence study needs at least three resolutions", resolutions=resolutions)
    return resolutions
