"""Run configuration: one JSON file, validated in full before any model call."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from .backend import REFLECTION, STUDENT, Backend, GenerationSettings, build_backend
from .contract import TaskContract, load_contract
from .errors import ConfigError, PromptCalError
from .metric import METRICS, ScoringPolicy
from .optimizer import OptimizerConfig

_KEYS = {"contract", "dataset", "split_sizes", "seed", "seeds", "budgets", "metric", "policy",
         "optimizer", "student", "reflection", "output_dir"}
_BACKEND_KEYS = {"kind", "script", "repeat", "model_id", "temperature", "max_tokens", "base_url",
                 "api_key_env", "wire_model", "timeout", "max_attempts"}


@dataclass
class RunConfig:
    base_dir: Path
    contract_path: Path
    dataset_path: Path
    split_sizes: tuple[int, int, int]
    seed: int
    seeds: tuple[int, ...]
    budgets: tuple[int, ...]
    metric: str
    policy: ScoringPolicy
    optimizer: dict[str, Any]
    student: dict[str, Any]
    reflection: dict[str, Any]
    output_dir: Path
    contract: TaskContract = field(init=False, repr=False)

    def optimizer_config(self, seed: int | None = None, budget: int | None = None) -> OptimizerConfig:
        data = dict(self.optimizer)
        data.setdefault("seed", self.seed)
        if seed is not None:
            data["seed"] = seed
        if budget is not None:
            data["max_full_evals"] = budget
        try:
            return OptimizerConfig.from_dict(data)
        except TypeError as exc:
            raise ConfigError(f"optimizer block: {exc}") from exc

    def settings(self, role: str) -> GenerationSettings:
        spec = self.student if role == STUDENT else self.reflection
        default_temp = 0.0 if role == STUDENT else 1.0
        default_max = None if role == STUDENT else 16000
        return GenerationSettings(spec.get("model_id", f"mock/{role}"),
                                  float(spec.get("temperature", default_temp)),
                                  spec.get("max_tokens", default_max), role)

    def make_backends(self) -> tuple[Backend, Backend]:
        """Fresh backend instances (mock scripts restart at call 0)."""
        return build_backend(self.student, self.base_dir), build_backend(self.reflection, self.base_dir)

    def backend_record(self) -> dict[str, Any]:
        """Backend specs safe to write to disk: never a key, only the variable's name."""
        return {role: {k: v for k, v in spec.items() if k in _BACKEND_KEYS}
                for role, spec in ((STUDENT, self.student), (REFLECTION, self.reflection))}

    def validate(self) -> None:
        self.contract = load_contract(self.contract_path)
        if not self.dataset_path.is_file():
            raise ConfigError(f"dataset not found: {self.dataset_path}")
        for role in (STUDENT, REFLECTION):
            self.settings(role)
        for budget in self.budgets or (None,):
            self.optimizer_config(budget=budget)
        for seed in self.seeds:
            self.optimizer_config(seed=seed)
        # constructing the backends checks script files and credentials up front
        self.make_backends()


def _resolve(base: Path, value: Any, key: str) -> Path:
    if not isinstance(value, str) or not value:
        raise ConfigError(f"config key {key!r} must be a path string")
    path = Path(value)
    return path if path.is_absolute() else base / path


def _int_list(value: Any, key: str) -> tuple[int, ...]:
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ConfigError(f"config key {key!r} must be a list of integers")
    return tuple(value)


def config_from_dict(data: Mapping[str, Any], base_dir: Path) -> RunConfig:
    unknown = set(data) - _KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    for key in ("contract", "dataset", "student", "reflection"):
        if key not in data:
            raise ConfigError(f"config is missing {key!r}")
    sizes = _int_list(data.get("split_sizes", [0, 0, 0]), "split_sizes")
    if len(sizes) != 3:
        raise ConfigError("split_sizes must have three entries (train, val, test)")
    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    metric = data.get("metric", "expanded")
    if metric not in METRICS:
        raise ConfigError(f"metric must be one of {METRICS}")
    try:
        policy = ScoringPolicy.from_dict(data.get("policy", {}))
    except (PromptCalError, TypeError) as exc:
        raise ConfigError(f"policy block: {exc}") from exc
    optimizer = dict(data.get("optimizer", {}))
    optimizer.setdefault("max_full_evals", 2)
    for role in ("student", "reflection"):
        spec = data[role]
        if not isinstance(spec, dict):
            raise ConfigError(f"{role} backend must be an object")
        bad = set(spec) - _BACKEND_KEYS
        if bad:
            raise ConfigError(f"{role} backend: unknown key(s) {', '.join(sorted(bad))}")
    return RunConfig(
        base_dir=base_dir,
        contract_path=_resolve(base_dir, data["contract"], "contract"),
        dataset_path=_resolve(base_dir, data["dataset"], "dataset"),
        split_sizes=sizes,  # type: ignore[arg-type]
        seed=seed,
        seeds=_int_list(data.get("seeds", [seed]), "seeds"),
        budgets=_int_list(data.get("budgets", [optimizer["max_full_evals"]]), "budgets"),
        metric=metric,
        policy=policy,
        optimizer=optimizer,
        student=dict(data["student"]),
        reflection=dict(data["reflection"]),
        output_dir=_resolve(base_dir, data.get("output_dir", "runs"), "output_dir"),
    )


def load_config(path: str | Path, *, validate: bool = True) -> RunConfig:
    """Read a config file; with ``validate=False`` the caller must call ``validate()`` after overrides."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc.msg} (line {exc.lineno})") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    cfg = config_from_dict(data, path.resolve().parent)
    if validate:
        cfg.validate()
    return cfg


def with_overrides(cfg: RunConfig, **changes: Any) -> RunConfig:
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return cfg
    new = replace(cfg, **changes)
    new.validate()
    return new
