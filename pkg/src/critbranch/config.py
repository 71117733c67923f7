import hashlib
import json
import math
from pathlib import Path
from typing import List, Optional, TypedDict, Union, cast

import numpy as np
import tomlkit
from platformdirs import user_config_path, user_data_path
from tomlkit.exceptions import TOMLKitError
from tomlkit.toml_file import TOMLFile

from critbranch import models
from critbranch.utils.exceptions import ConfigurationError, DomainError

FILENAMES = [".critbranch.toml", "critbranch.toml"]
APP_NAME = "critbranch"
SCHEMA_VERSION = 1

TASKS = ("spectral", "solve", "simulate", "audit", "verify-kolmogorov", "verify-yaglom")
MODEL_KINDS = ("gw", "multitype-gw", "diffusion", "stable-csbp", "multitype-csbp")
METHODS = ("direct", "spine")
SOURCES = ("deterministic", "monte_carlo")
FORMATS = ("csv", "jsonl")

TOP_KEYS = {"task", "model", "numeric", "rng", "io"}
MODEL_KEYS = {
    "gw": {"kind", "beta", "offspring"},
    "multitype-gw": {"kind", "beta", "offspring", "displacement"},
    "diffusion": {"kind", "d", "beta", "offspring", "mesh", "grid_critical"},
    "stable-csbp": {"kind", "kappa", "alpha", "c"},
    "multitype-csbp": {"kind", "b", "c", "nu", "beta", "gamma_tilde", "jumps", "pi"},
}
OFFSPRING_KEYS = {"slack": {"law", "alpha", "c", "mean", "k_max"}, "finite": {"law", "probabilities"}}
TAIL_KEYS = {"scale", "alpha", "cutoff"}
NUMERIC_KEYS = {
    "T", "dt", "t_grid", "theta_grid", "n_reps", "cap", "method", "init", "f_dir",
    "source", "tolerance", "sigmas", "t", "mass", "deltas", "sim_dt", "block_size",
}
RNG_KEYS = {"seed", "threads"}
IO_KEYS = {"out", "formats"}

# rng.threads and io.out never change a result table
RUNTIME_FIELDS = (("rng", "threads"), ("io", "out"))


class Numeric(TypedDict, total=False):
    T: float
    dt: float
    t_grid: List[float]
    theta_grid: List[float]
    n_reps: int
    cap: int
    method: str
    init: Union[int, float, List[float]]
    f_dir: Union[float, List[float]]
    source: str
    tolerance: float
    sigmas: float
    t: float
    mass: Optional[float]
    deltas: Optional[List[float]]
    sim_dt: float
    block_size: Optional[int]


class Rng(TypedDict, total=False):
    seed: int
    threads: Optional[int]


class Io(TypedDict, total=False):
    out: Optional[str]
    formats: List[str]


class ExperimentConfig(TypedDict, total=False):
    task: str
    model: dict
    numeric: Numeric
    rng: Rng
    io: Io


def default_out_dir() -> Path:
    return user_data_path(appname=APP_NAME, appauthor=False) / "runs"


class ConfigFile:
    def __init__(self, path: Path) -> None:
        self.path = path
        self.toml_file = TOMLFile(path)
        try:
            self.toml_doc = self.toml_file.read()
            self.configs = cast(dict, self.toml_doc.unwrap())
        except OSError:
            self.toml_doc = tomlkit.document()
            self.configs = {}
        except TOMLKitError as e:
            raise ConfigurationError(f"Invalid TOML in {path}: {e}") from e

    def write(self, config: ExperimentConfig) -> None:
        """Write a validated config; unset optional fields are dropped."""
        doc = tomlkit.document()
        doc.add("task", config["task"])
        for block in ("model", "numeric", "rng", "io"):
            doc.add(block, _drop_none(config.get(block, {})))
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.toml_file.write(doc)
        self.configs = dict(config)


def _drop_none(value):
    if isinstance(value, dict):
        return {k: _drop_none(v) for k, v in value.items() if v is not None}
    if isinstance(value, list):
        return [_drop_none(v) for v in value]
    return value


def search_cwd() -> Path | None:
    """Find config file in current working directory"""
    directory = Path.cwd()
    for f in FILENAMES:
        if (directory / f).exists():
            return directory / f
    return None


def search_config() -> Path | None:
    """Find config file in user's default config directory"""
    try:
        directory = user_config_path(appname=APP_NAME, appauthor=False)
        if not directory.is_dir():
            return None
        for f in FILENAMES:
            config_path = directory / f
            if config_path.is_file():
                return config_path
    except OSError:
        return None
    return None


def find_config_file(config_path: Path | None) -> Path:
    if config_path is not None:
        if not config_path.exists():
            raise ConfigurationError(f"Configuration file not found: {config_path}")
        return config_path
    for search in (search_cwd, search_config):
        found = search()
        if found:
            return found
    raise ConfigurationError(
        f"No experiment config given and none of {', '.join(FILENAMES)} found in the working "
        "directory or the user config directory"
    )


def load_config(
    config_path: Path | None,
    task: Optional[str] = None,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
    out: Optional[Path] = None,
    source: Optional[str] = None,
    cap: Optional[int] = None,
) -> ExperimentConfig:
    """
    Read, override and validate. CLI flags and CRITBRANCH_* variables arrive
    here already merged by typer; they win over the file.
    """
    path = find_config_file(config_path)
    raw = ConfigFile(path).configs
    return apply_overrides(raw, task=task, seed=seed, threads=threads, out=out, source=source, cap=cap)


def apply_overrides(
    raw: dict,
    task: Optional[str] = None,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
    out: Optional[Path] = None,
    source: Optional[str] = None,
    cap: Optional[int] = None,
) -> ExperimentConfig:
    raw = json.loads(json.dumps(raw))
    if task is not None:
        raw["task"] = task
    if seed is not None:
        raw.setdefault("rng", {})["seed"] = seed
    if threads is not None:
        raw.setdefault("rng", {})["threads"] = threads
    if out is not None:
        raw.setdefault("io", {})["out"] = str(out)
    if source is not None:
        raw.setdefault("numeric", {})["source"] = source
    if cap is not None:
        raw.setdefault("numeric", {})["cap"] = cap
    return validate_config(raw)


def canonical_json(config: ExperimentConfig) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 over the canonical config without runtime-only fields."""
    stripped = json.loads(json.dumps(config))
    for block, key in RUNTIME_FIELDS:
        stripped.get(block, {}).pop(key, None)
    stripped["schema_version"] = SCHEMA_VERSION
    return hashlib.sha256(canonical_json(stripped).encode()).hexdigest()


def _reject_unknown(block: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(block) - allowed)
    if unknown:
        raise ConfigurationError(f"Unknown key '{unknown[0]}' in {where}", field=f"{where}.{unknown[0]}")


def _table(value, where: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigurationError(f"'{where}' must be a table", field=where)
    return value


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _number(
    value,
    where: str,
    positive: bool = False,
    non_negative: bool = False,
    integer: bool = False,
    upper: Optional[float] = None,
) -> Union[int, float]:
    if not _is_number(value) or (integer and not isinstance(value, int)):
        kind = "an integer" if integer else "a number"
        raise ConfigurationError(f"'{where}' must be {kind}, got {value!r}", field=where)
    if not math.isfinite(value):
        raise ConfigurationError(f"'{where}' must be finite", field=where)
    if positive and value <= 0:
        raise ConfigurationError(f"'{where}' must be positive, got {value}", field=where)
    if non_negative and value < 0:
        raise ConfigurationError(f"'{where}' must be non-negative, got {value}", field=where)
    if upper is not None and value > upper:
        raise ConfigurationError(f"'{where}' must be at most {upper}, got {value}", field=where)
    return value if integer else float(value)


def _numbers(values, where: str, length: Optional[int] = None, **checks) -> list:
    if not isinstance(values, list) or not values:
        raise ConfigurationError(f"'{where}' must be a non-empty list", field=where)
    if length is not None and len(values) != length:
        raise ConfigurationError(f"'{where}' must have {length} entries, got {len(values)}", field=where)
    return [_number(v, f"{where}[{i}]", **checks) for i, v in enumerate(values)]


def _matrix(values, where: str, n: int) -> list:
    if not isinstance(values, list) or len(values) != n:
        raise ConfigurationError(f"'{where}' must be a {n} x {n} matrix", field=where)
    return [_numbers(row, f"{where}[{i}]", length=n, non_negative=True) for i, row in enumerate(values)]


def _choice(value, where: str, options) -> str:
    if value not in options:
        raise ConfigurationError(f"'{where}' must be one of {', '.join(options)}, got {value!r}", field=where)
    return value


def _offspring(block, where: str) -> dict:
    block = _table(block, where)
    law = _choice(block.get("law"), f"{where}.law", tuple(OFFSPRING_KEYS))
    _reject_unknown(block, OFFSPRING_KEYS[law], where)
    if law == "finite":
        return {"law": law, "probabilities": _numbers(block.get("probabilities"), f"{where}.probabilities", non_negative=True)}
    return {
        "law": law,
        "alpha": _number(block.get("alpha"), f"{where}.alpha", positive=True, upper=1.0),
        "c": _number(block.get("c"), f"{where}.c", positive=True),
        "mean": _number(block.get("mean", 1.0), f"{where}.mean", positive=True),
        "k_max": _number(block.get("k_max", models.DEFAULT_K_MAX), f"{where}.k_max", positive=True, integer=True),
    }


def _tail(block, where: str) -> dict:
    block = _table(block, where)
    _reject_unknown(block, TAIL_KEYS, where)
    return {
        "scale": _number(block.get("scale", 0.0), f"{where}.scale", non_negative=True),
        "alpha": _number(block.get("alpha", 0.5), f"{where}.alpha", positive=True, upper=1.0),
        "cutoff": _number(block.get("cutoff", 0.0), f"{where}.cutoff", non_negative=True),
    }


def _per_type(value, where: str, n: int, **checks) -> list:
    if isinstance(value, list):
        return _numbers(value, where, length=n, **checks)
    return [_number(value, where, **checks)] * n


def _validate_model(block) -> dict:
    block = _table(block, "model")
    kind = _choice(block.get("kind"), "model.kind", MODEL_KINDS)
    _reject_unknown(block, MODEL_KEYS[kind], "model")
    out = {"kind": kind}
    if kind == "gw":
        out["beta"] = _number(block.get("beta", 1.0), "model.beta", positive=True)
        out["offspring"] = _offspring(block.get("offspring"), "model.offspring")
    elif kind == "multitype-gw":
        beta = _numbers(block.get("beta"), "model.beta", positive=True)
        n = len(beta)
        offspring = block.get("offspring")
        laws = offspring if isinstance(offspring, list) else [offspring] * n
        if len(laws) != n:
            raise ConfigurationError(f"'model.offspring' needs {n} laws", field="model.offspring")
        out["beta"] = beta
        out["offspring"] = [_offspring(law, f"model.offspring[{i}]") for i, law in enumerate(laws)]
        out["displacement"] = _matrix(block.get("displacement"), "model.displacement", n)
    elif kind == "diffusion":
        out["d"] = _number(block.get("d"), "model.d", positive=True)
        out["beta"] = None if block.get("beta") is None else _number(block["beta"], "model.beta", positive=True)
        out["offspring"] = _offspring(block.get("offspring"), "model.offspring")
        out["mesh"] = _number(block.get("mesh", 200), "model.mesh", positive=True, integer=True)
        grid_critical = block.get("grid_critical", True)
        if not isinstance(grid_critical, bool):
            raise ConfigurationError("'model.grid_critical' must be a boolean", field="model.grid_critical")
        out["grid_critical"] = grid_critical
    elif kind == "stable-csbp":
        out["kappa"] = _number(block.get("kappa"), "model.kappa", positive=True)
        out["alpha"] = _number(block.get("alpha"), "model.alpha", positive=True, upper=1.0)
        out["c"] = _number(block.get("c", 0.0), "model.c", non_negative=True)
    else:
        b = _numbers(block.get("b"), "model.b")
        n = len(b)
        out["b"] = b
        out["c"] = _per_type(block.get("c", 0.0), "model.c", n, non_negative=True)
        out["beta"] = _per_type(block.get("beta", 0.0), "model.beta", n, non_negative=True)
        out["gamma_tilde"] = _per_type(block.get("gamma_tilde", 0.0), "model.gamma_tilde", n, non_negative=True)
        out["pi"] = _matrix(block.get("pi"), "model.pi", n)
        for name in ("nu", "jumps"):
            tails = block.get(name, [{}] * n)
            if not isinstance(tails, list) or len(tails) != n:
                raise ConfigurationError(f"'model.{name}' needs {n} tables", field=f"model.{name}")
            out[name] = [_tail(tail, f"model.{name}[{i}]") for i, tail in enumerate(tails)]
    return out


def model_size(model_cfg: dict) -> int:
    kind = model_cfg["kind"]
    if kind in ("gw", "stable-csbp"):
        return 1
    if kind == "diffusion":
        return model_cfg["mesh"] - 1
    if kind == "multitype-gw":
        return len(model_cfg["beta"])
    return len(model_cfg["b"])


def _increasing(values: list, where: str) -> list:
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ConfigurationError(f"'{where}' must be strictly increasing", field=where)
    return values


def _validate_init(value, model_cfg: dict):
    kind = model_cfg["kind"]
    if kind == "diffusion":
        x0 = _number(model_cfg["d"] / 2.0 if value is None else value, "numeric.init", positive=True)
        if x0 >= model_cfg["d"]:
            raise ConfigurationError("'numeric.init' must lie inside (0, d)", field="numeric.init")
        return x0
    if kind == "stable-csbp":
        return _number(1.0 if value is None else value, "numeric.init", positive=True)
    n = model_size(model_cfg)
    if value is None:
        return 0
    if isinstance(value, list):
        integer = kind in ("gw", "multitype-gw")
        counts = _numbers(value, "numeric.init", length=n, non_negative=True, integer=integer)
        if sum(counts) <= 0:
            raise ConfigurationError("'numeric.init' must not be empty", field="numeric.init")
        return counts
    index = _number(value, "numeric.init", non_negative=True, integer=True)
    if index >= n:
        raise ConfigurationError(f"'numeric.init' is not a type index below {n}", field="numeric.init")
    return index


def _validate_numeric(block, model_cfg: dict) -> Numeric:
    block = _table(block, "numeric")
    _reject_unknown(block, NUMERIC_KEYS, "numeric")
    T = _number(block.get("T", 100.0), "numeric.T", positive=True)
    n = model_size(model_cfg)
    default_grid = [float(t) for t in np.geomspace(1.0, T, 9)] if T > 1.0 else [T]
    f_dir = block.get("f_dir", 1.0)
    mass = block.get("mass")
    deltas = block.get("deltas")
    block_size = block.get("block_size")
    return {
        "T": T,
        "dt": _number(block.get("dt", 0.01), "numeric.dt", positive=True),
        "t_grid": _increasing(_numbers(block.get("t_grid", default_grid), "numeric.t_grid", positive=True), "numeric.t_grid"),
        "theta_grid": _numbers(
            block.get("theta_grid", [float(x) for x in np.geomspace(0.1, 10.0, 13)]), "numeric.theta_grid", non_negative=True
        ),
        "n_reps": _number(block.get("n_reps", 10_000), "numeric.n_reps", positive=True, integer=True),
        "cap": _number(block.get("cap", 10**7), "numeric.cap", positive=True, integer=True),
        "method": _choice(block.get("method", "direct"), "numeric.method", METHODS),
        "init": _validate_init(block.get("init"), model_cfg),
        "f_dir": _per_type(f_dir, "numeric.f_dir", n, non_negative=True) if isinstance(f_dir, list) else _number(f_dir, "numeric.f_dir", positive=True),
        "source": _choice(block.get("source", "deterministic"), "numeric.source", SOURCES),
        "tolerance": _number(block.get("tolerance", 0.02), "numeric.tolerance", positive=True),
        "sigmas": _number(block.get("sigmas", 3.0), "numeric.sigmas", positive=True),
        "t": _number(block.get("t", T), "numeric.t", positive=True),
        "mass": None if mass is None else _number(mass, "numeric.mass", positive=True),
        "deltas": None if deltas is None else _numbers(deltas, "numeric.deltas", positive=True, upper=0.999999),
        "sim_dt": _number(block.get("sim_dt", 1e-3), "numeric.sim_dt", positive=True),
        "block_size": None if block_size is None else _number(block_size, "numeric.block_size", positive=True, integer=True),
    }


def validate_config(raw) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("Configuration must be a table")
    _reject_unknown(raw, TOP_KEYS, "config")
    task = _choice(raw.get("task"), "task", TASKS)
    model_cfg = _validate_model(raw.get("model"))
    numeric = _validate_numeric(raw.get("numeric", {}), model_cfg)

    rng = _table(raw.get("rng", {}), "rng")
    _reject_unknown(rng, RNG_KEYS, "rng")
    threads = rng.get("threads")
    rng_cfg: Rng = {
        "seed": _number(rng.get("seed", 0), "rng.seed", non_negative=True, integer=True, upper=2**64 - 1),
        "threads": None if threads is None else _number(threads, "rng.threads", positive=True, integer=True),
    }

    io = _table(raw.get("io", {}), "io")
    _reject_unknown(io, IO_KEYS, "io")
    formats = io.get("formats", list(FORMATS))
    if not isinstance(formats, list):
        raise ConfigurationError("'io.formats' must be a list", field="io.formats")
    io_cfg: Io = {
        "out": None if io.get("out") is None else str(io["out"]),
        "formats": [_choice(f, "io.formats", FORMATS) for f in formats],
    }

    particle = model_cfg["kind"] in ("gw", "multitype-gw", "diffusion")
    monte_carlo = task == "simulate" or numeric["source"] == "monte_carlo"
    if monte_carlo and not particle:
        raise ConfigurationError("Monte Carlo needs a particle model", field="model.kind")
    if monte_carlo and numeric["n_reps"] < 100:
        raise ConfigurationError("'numeric.n_reps' must be at least 100", field="numeric.n_reps")
    if task == "verify-yaglom" and monte_carlo and model_cfg["kind"] == "diffusion":
        raise ConfigurationError("Monte Carlo Yaglom verdicts need a finite type space", field="model.kind")
    return {"task": task, "model": model_cfg, "numeric": numeric, "rng": rng_cfg, "io": io_cfg}


def _build_offspring(block: dict):
    if block["law"] == "finite":
        return models.FiniteOffspring(tuple(block["probabilities"]))
    return models.SlackOffspring(alpha=block["alpha"], c=block["c"], mean=block["mean"], k_max=block["k_max"])


def _build_tail(block: dict):
    if block["scale"] == 0:
        return None
    return models.StableTail(scale=block["scale"], alpha=block["alpha"], cutoff=block["cutoff"])


def build_model(model_cfg: dict) -> models.Model:
    """Instantiate a validated model block; constructor errors name the block."""
    kind = model_cfg["kind"]
    try:
        if kind == "gw":
            return models.MultiTypeGW.single_type(model_cfg["beta"], _build_offspring(model_cfg["offspring"]))
        if kind == "multitype-gw":
            return models.MultiTypeGW(
                beta=np.array(model_cfg["beta"]),
                offspring=tuple(_build_offspring(b) for b in model_cfg["offspring"]),
                displacement=np.array(model_cfg["displacement"]),
            )
        if kind == "diffusion":
            return models.BranchingDiffusion1D(
                d=model_cfg["d"],
                offspring=_build_offspring(model_cfg["offspring"]),
                beta=model_cfg["beta"],
                mesh=model_cfg["mesh"],
                grid_critical=model_cfg["grid_critical"],
            )
        if kind == "stable-csbp":
            return models.StableCSBP(kappa=model_cfg["kappa"], alpha=model_cfg["alpha"], c=model_cfg["c"])
        return models.MultiTypeCSBP(
            b=np.array(model_cfg["b"]),
            c=np.array(model_cfg["c"]),
            nu=tuple(_build_tail(t) for t in model_cfg["nu"]),
            beta=np.array(model_cfg["beta"]),
            gamma_tilde=np.array(model_cfg["gamma_tilde"]),
            jumps=tuple(_build_tail(t) for t in model_cfg["jumps"]),
            pi=np.array(model_cfg["pi"]),
        )
    except DomainError as e:
        raise ConfigurationError(f"Invalid model: {e}", field="model") from e
