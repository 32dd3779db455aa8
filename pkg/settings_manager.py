"""
settings_manager.py
Per-user defaults (output directory, thread cap, run retention, structure thresholds) kept in a
JSON settings file, and parsing of the run configuration JSON into validated dataclasses.
"""

import json
import os
import sys
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Mapping, Optional, Tuple

from dotenv import load_dotenv

from design import ModelSpec, reject_unknown_keys
from dlm_core import ContractError
from imputers import ImputationConfig
from missingness import MechanismSpec
from simulation import GridSpec, ScenarioSpec

# --- Settings file location strategy ---
# Settings live in a per-user configuration directory:
#
# Windows: %LOCALAPPDATA%/ssmimpute/settings.json
# Other platforms:
#   - macOS: ~/Library/Application Support/ssmimpute/settings.json
#   - Linux/other: ~/.config/ssmimpute/settings.json
#
# SSMIMPUTE_SETTINGS (environment or .env) names a settings file directly; otherwise a
# pointer file next to the default location can redirect to another path.

APP_NAME = "ssmimpute"
_SETTINGS_BASENAME = "settings.json"
_POINTER_BASENAME = "settings.loc"  # stores absolute path to settings.json (override)
_SETTINGS_ENV = "SSMIMPUTE_SETTINGS"
_THREADS_ENV = "SSMIMPUTE_THREADS"
_CACHED_SETTINGS_PATH = None  # memoize resolved path

DEFAULT_OUT_DIR = "runs"
DEFAULT_RUNS_TO_KEEP = 0  # 0 keeps every run directory

load_dotenv(override=False)


class ConfigError(ContractError):
    """Invalid run configuration; the message names the offending key path."""


def _default_settings_dir() -> str:
    """Return the platform-specific default settings directory (no overrides)."""
    try:
        if os.name == "nt":  # Windows
            base = os.environ.get("LOCALAPPDATA") or os.path.expanduser("~")
            return os.path.join(base, APP_NAME)
        elif sys.platform == "darwin":  # macOS
            return os.path.join(os.path.expanduser("~"), "Library", "Application Support", APP_NAME)
        else:  # Linux / other Unix
            return os.path.join(os.path.expanduser("~"), ".config", APP_NAME)
    except Exception:
        try:
            return os.path.abspath(os.getcwd())
        except Exception:
            return "."


def _pointer_file_path() -> str:
    return os.path.join(_default_settings_dir(), _POINTER_BASENAME)


def _read_settings_pointer() -> Optional[str]:
    """Return absolute path to settings.json from pointer file if present, else None."""
    try:
        p = _pointer_file_path()
        if os.path.exists(p):
            with open(p, "r", encoding="utf-8") as f:
                line = f.readline().strip()
                if line:
                    return line
    except Exception:
        pass
    return None


def _write_settings_pointer(settings_full_path: str):
    """Persist absolute path to settings.json in pointer file under default dir."""
    try:
        d = _default_settings_dir()
        os.makedirs(d, exist_ok=True)
        with open(_pointer_file_path(), "w", encoding="utf-8") as f:
            f.write(os.path.abspath(settings_full_path))
    except Exception:
        pass


def _resolve_settings_path() -> str:
    global _CACHED_SETTINGS_PATH
    if _CACHED_SETTINGS_PATH:
        return _CACHED_SETTINGS_PATH
    env_path = os.environ.get(_SETTINGS_ENV, "").strip()
    override_path = env_path or _read_settings_pointer()
    if override_path:
        new_path = os.path.abspath(override_path)
    else:
        new_path = os.path.join(_default_settings_dir(), _SETTINGS_BASENAME)
    _CACHED_SETTINGS_PATH = new_path
    return new_path


def reset_settings_cache():
    """Forget the resolved settings path (the environment may have changed)."""
    global _CACHED_SETTINGS_PATH
    _CACHED_SETTINGS_PATH = None


def get_settings_file_path() -> str:
    """Return absolute path to the current settings.json file."""
    return os.path.abspath(_resolve_settings_path())


def load_settings() -> Dict[str, Any]:
    path = _resolve_settings_path()
    try:
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
                if isinstance(data, dict):
                    return data
    except Exception:
        pass
    return {}


def save_settings(settings: Dict[str, Any]):
    path = _resolve_settings_path()
    try:
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(settings, f, indent=2, sort_keys=True)
    except Exception:
        pass


def set_settings_file_path(full_path: str):
    """Persistently switch settings.json location to the given absolute path.

    This writes a pointer file under the default settings directory so the new
    location is honored across runs. Also updates the in-memory cache.
    """
    if not isinstance(full_path, str) or not full_path:
        return
    try:
        os.makedirs(os.path.dirname(os.path.abspath(full_path)), exist_ok=True)
        _write_settings_pointer(os.path.abspath(full_path))
        global _CACHED_SETTINGS_PATH
        _CACHED_SETTINGS_PATH = os.path.abspath(full_path)
    except Exception:
        pass


# --- Output directory ---
def get_default_out_dir() -> str:
    s = load_settings()
    val = s.get("out_dir")
    if isinstance(val, str) and val:
        return val
    return DEFAULT_OUT_DIR


def set_default_out_dir(path: str):
    if not isinstance(path, str) or not path:
        return
    s = load_settings()
    s["out_dir"] = path
    save_settings(s)


# --- Parallelism ---
def get_thread_cap() -> int:
    """Worker cap for joblib: SSMIMPUTE_THREADS, else settings "threads", else 1.

    Clamped to [1, cpu count]. One worker keeps outputs identical across machines.
    """
    raw = os.environ.get(_THREADS_ENV, "").strip() or load_settings().get("threads", 1)
    try:
        val = int(raw)
    except Exception:
        val = 1
    cpus = os.cpu_count() or 1
    if val < 1:
        val = 1
    elif val > cpus:
        val = cpus
    return val


def set_thread_cap(n: int):
    try:
        val = int(n)
    except Exception:
        return
    s = load_settings()
    s["threads"] = max(1, val)
    save_settings(s)


# --- Run directory retention ---
def get_runs_to_keep() -> int:
    """How many timestamped run directories ``evaluate`` keeps under --out. 0 keeps all; clamped [0, 999]."""
    s = load_settings()
    try:
        val = int(s.get("runs_to_keep", DEFAULT_RUNS_TO_KEEP))
    except Exception:
        val = DEFAULT_RUNS_TO_KEEP
    if val < 0:
        val = 0
    elif val > 999:
        val = 999
    return val


def set_runs_to_keep(n: int):
    try:
        val = int(n)
    except Exception:
        return
    s = load_settings()
    s["runs_to_keep"] = max(0, min(999, val))
    save_settings(s)


# --- Structure-learning thresholds ---
_THRESHOLD_KEYS = ("min_seg", "split_threshold", "invariance_ratio", "allow_ar")


def get_structure_defaults() -> Dict[str, Any]:
    """User defaults for the structure thresholds; only well-typed entries are returned."""
    s = load_settings()
    raw = s.get("structure", {}) or {}
    out: Dict[str, Any] = {}
    if not isinstance(raw, dict):
        return out
    try:
        if "min_seg" in raw:
            out["min_seg"] = max(2, int(raw["min_seg"]))
        for key in ("split_threshold", "invariance_ratio"):
            if key in raw and float(raw[key]) > 0:
                out[key] = float(raw[key])
        if "allow_ar" in raw:
            out["allow_ar"] = bool(raw["allow_ar"])
    except Exception:
        return {}
    return out


def set_structure_defaults(**kwargs):
    s = load_settings()
    current = s.get("structure", {}) or {}
    for k, v in kwargs.items():
        if k in _THRESHOLD_KEYS and v is not None:
            current[k] = v
    s["structure"] = current
    save_settings(s)


# --- Run configuration ------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """One run's configuration document.

    ``models`` holds named candidates for ranking; ``model`` is the primary specification
    (the first candidate when only ``models`` is given).
    """

    model: ModelSpec = field(default_factory=ModelSpec)
    models: Tuple[Tuple[str, ModelSpec], ...] = ()
    imputation: ImputationConfig = field(default_factory=ImputationConfig)
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    mechanism: MechanismSpec = field(default_factory=MechanismSpec)
    grid: GridSpec = field(default_factory=GridSpec)
    method: Optional[str] = None
    data: Optional[str] = None
    out: Optional[str] = None
    seed: Optional[int] = None

    def candidates(self) -> Tuple[Tuple[str, ModelSpec], ...]:
        return self.models or (("model", self.model),)

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        """Apply a run seed everywhere a seed is consumed."""
        if seed is None:
            return self
        return replace(
            self,
            seed=seed,
            imputation=replace(self.imputation, seed=seed),
            scenario=replace(self.scenario, seed=seed),
            mechanism=replace(self.mechanism, seed=seed),
            grid=replace(self.grid, seed=seed),
        )


_RUN_KEYS = {
    "model",
    "models",
    "imputation",
    "scenario",
    "mechanism",
    "grid",
    "method",
    "io",
    "seed",
}


def _imputation_defaults() -> Dict[str, Any]:
    return dict(get_structure_defaults())


def parse_run_config(doc: Mapping[str, Any]) -> RunConfig:
    """Validate a configuration document; any problem raises ConfigError naming the key path."""
    try:
        reject_unknown_keys(doc, _RUN_KEYS, "config")
        kw: Dict[str, Any] = {}
        if "model" in doc:
            kw["model"] = ModelSpec.from_dict(doc["model"], "config.model")
        if "models" in doc:
            models = doc["models"]
            if not isinstance(models, Mapping) or not models:
                raise ContractError("config.models must be a nonempty object keyed by candidate name")
            kw["models"] = tuple(
                (str(name), ModelSpec.from_dict(m, f"config.models.{name}")) for name, m in models.items()
            )
            kw.setdefault("model", kw["models"][0][1])
        imputation = dict(_imputation_defaults())
        if "imputation" in doc:
            block = doc["imputation"]
            if not isinstance(block, Mapping):
                raise ContractError("config.imputation must be an object")
            imputation.update(block)
        kw["imputation"] = ImputationConfig.from_dict(imputation, "config.imputation")
        if "scenario" in doc:
            kw["scenario"] = ScenarioSpec.from_dict(doc["scenario"], "config.scenario")
        if "mechanism" in doc:
            kw["mechanism"] = MechanismSpec.from_dict(doc["mechanism"], "config.mechanism")
        if "grid" in doc:
            grid = GridSpec.from_dict(doc["grid"], "config.grid")
            kw["grid"] = replace(grid, imputation=kw["imputation"])
        else:
            kw["grid"] = GridSpec(imputation=kw["imputation"])
        if "method" in doc:
            kw["method"] = str(doc["method"])
        if "io" in doc:
            io = doc["io"]
            reject_unknown_keys(io, {"data", "out"}, "config.io")
            kw["data"] = io.get("data")
            kw["out"] = io.get("out")
        cfg = RunConfig(**kw)
        if "seed" in doc:
            cfg = cfg.with_seed(int(doc["seed"]))
        return cfg
    except ConfigError:
        raise
    except (ContractError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_run_config(path: Optional[str]) -> RunConfig:
    """Read and validate a configuration file; no path gives the defaults."""
    if not path:
        return parse_run_config({})
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_run_config(doc)
