"""Run configuration: one JSON file per run, with ``${VAR}`` interpolation."""
from __future__ import annotations

import hashlib
import json
import os
import re
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, ValidationError, field_validator

from config import settings

from .blueprint_gen import AcceptanceRule, GenerationSettings, PipelineBackends
from .context_sampler import SamplerKnobs
from .interplay_sim import EpisodeConfig, load_episode_templates
from .llm_gateway import BackendConfig, ModelConfig, build_backend

_VAR = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


def _judge_config() -> BackendConfig:
    return BackendConfig(model=ModelConfig(temperature=0.0))


class RoleBackends(BaseModel):
    generator: BackendConfig = Field(default_factory=BackendConfig)
    judges: List[BackendConfig] = Field(default_factory=lambda: [_judge_config() for _ in range(3)])
    reviewer: BackendConfig = Field(default_factory=BackendConfig)
    human: BackendConfig = Field(default_factory=BackendConfig)
    agent: BackendConfig = Field(default_factory=BackendConfig)
    bon_judge: BackendConfig = Field(default_factory=_judge_config)

    @field_validator("judges")
    @classmethod
    def _odd_committee(cls, value: List[BackendConfig]) -> List[BackendConfig]:
        if len(value) % 2 == 0:
            raise ValueError("the judge committee needs an odd number of members")
        return value


class RunKnobs(BaseModel):
    tasks: int = Field(default=3, ge=0)
    max_rounds: Optional[int] = Field(default=None, ge=1)
    min_total: int = Field(default=3, ge=0, le=4)
    require_correctness: bool = True
    reflection: bool = True
    recombinations: int = Field(default=0, ge=0)
    attempts: int = Field(default=3, ge=1)
    bon_n: int = Field(default=4, ge=1)
    max_turns: int = Field(default=30, ge=1)
    tool_cap: int = Field(default=10, ge=1)
    workers: int = Field(default=4, ge=1)
    sampler: SamplerKnobs = Field(default_factory=SamplerKnobs)


class RunConfig(BaseModel):
    domain_pack: Path
    personas: Optional[Path] = None
    prompt_dir: Optional[Path] = None
    output_dir: Path = Path("out")
    seed: int = 0
    backends: RoleBackends = Field(default_factory=RoleBackends)
    knobs: RunKnobs = Field(default_factory=RunKnobs)

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def acceptance_rule(self) -> AcceptanceRule:
        return AcceptanceRule(min_total=self.knobs.min_total, require_correctness=self.knobs.require_correctness)

    def generation_settings(self, reflection: Optional[bool] = None) -> GenerationSettings:
        return GenerationSettings(
            knobs=self.knobs.sampler,
            rule=self.acceptance_rule(),
            reflection=self.knobs.reflection if reflection is None else reflection,
        )

    def pipeline_backends(self) -> PipelineBackends:
        return PipelineBackends(
            generator=build_backend(self.backends.generator),
            judges=[build_backend(judge) for judge in self.backends.judges],
            reviewer=build_backend(self.backends.reviewer),
        )

    def episode_config(self) -> EpisodeConfig:
        knobs = self.knobs
        return EpisodeConfig(
            human=build_backend(self.backends.human),
            agent=build_backend(self.backends.agent),
            bon_judge=build_backend(self.backends.bon_judge),
            max_turns=knobs.max_turns,
            attempts=knobs.attempts,
            bon_n=knobs.bon_n,
            tool_cap=knobs.tool_cap,
            workers=knobs.workers,
            templates=load_episode_templates(self.prompt_dir),
        )


def interpolate(text: str, env: Optional[Dict[str, str]] = None) -> str:
    """Replace ``${VAR}`` with its environment value."""
    env = os.environ if env is None else env

    def _sub(match: re.Match) -> str:
        name = match.group(1)
        if name not in env:
            raise ConfigError(f"environment variable {name} is not set")
        return json.dumps(env[name])[1:-1]

    return _VAR.sub(_sub, text)


def _merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _resolve(path: Optional[Path], base: Path) -> Optional[Path]:
    if path is None or path.is_absolute():
        return path
    return base / path


def load_run_config(path: str | Path, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Read, interpolate, validate and resolve a run configuration.

    Relative paths resolve against the config file's directory. Raises
    ``ConfigError`` for unreadable files, unset variables, invalid values
    and referenced files that do not exist.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read run config {path}: {exc}") from exc
    try:
        data = json.loads(interpolate(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: run config must be a JSON object")
    data = _merge(data, overrides or {})
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    base = path.resolve().parent
    cfg.domain_pack = _resolve(cfg.domain_pack, base)
    cfg.personas = _resolve(cfg.personas, base) or settings.DATA_DIR / "personas.json"
    cfg.prompt_dir = _resolve(cfg.prompt_dir, base)
    cfg.output_dir = _resolve(cfg.output_dir, base)
    roles = cfg.backends
    for backend in [roles.generator, roles.reviewer, roles.human, roles.agent, roles.bon_judge, *roles.judges]:
        if backend.kind == "stub":
            if not backend.script:
                raise ConfigError("stub backends need a script")
            backend.script = str(_resolve(Path(backend.script), base))
            if not Path(backend.script).is_file():
                raise ConfigError(f"stub script not found: {backend.script}")

    if not cfg.domain_pack.is_dir():
        raise ConfigError(f"domain pack not found: {cfg.domain_pack}")
    if not cfg.personas.is_file():
        raise ConfigError(f"persona file not found: {cfg.personas}")
    if cfg.prompt_dir is not None and not cfg.prompt_dir.is_dir():
        raise ConfigError(f"prompt directory not found: {cfg.prompt_dir}")
    return cfg


def derive_seed(master: int, index: int) -> int:
    """Independent per-task seed from the run's master seed."""
    digest = hashlib.sha256(f"{master}:{index}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")
