"""Run configuration: a YAML file, a named preset, and command-line overrides.

Precedence is flags over file over preset over built-in defaults. String
values may reference environment variables as ``${NAME}``; secrets such as
API keys are meant to arrive that way, never on the command line.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional

import yaml

from .domain import BudgetConfig, DomainError
from .provider import (
    CompletionProvider,
    ConcurrencyLimiter,
    HttpChatProvider,
    RetryingProvider,
    RetryPolicy,
    Role,
    RoleRouter,
    ScriptedProvider,
    TokenMeter,
    api_key_from_env,
)
from .reward import RewardSpec


class ConfigError(ValueError):
    pass


PRESETS = {
    "default": {},
    "cmo2025": {
        "parallel_rollouts": 256,
        "max_rounds": 12,
        "verifier_samples": 8,
        "max_refinement_rounds": 24,
    },
}

API_KEY_ENV = "LEMMAFLOW_API_KEY"

_ENV_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def interpolate(value):
    """Replace ``${VAR}`` in every string of a nested structure; unset variables are an error."""
    if isinstance(value, str):
        def sub(m):
            name = m.group(1)
            if name not in os.environ:
                raise ConfigError(f"environment variable {name} is not set")
            return os.environ[name]

        return _ENV_RE.sub(sub, value)
    if isinstance(value, dict):
        return {k: interpolate(v) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate(v) for v in value]
    return value


@dataclass(frozen=True)
class EndpointConfig:
    url: Optional[str] = None
    model: str = "default"
    native_n: bool = True
    timeout: float = 600.0
    temperature: Optional[float] = None


@dataclass(frozen=True)
class CliConfig:
    config_path: Optional[str] = None
    preset: str = "default"
    seed: int = 0
    out: str = "runs"
    rollouts: int = 1
    templates: str = "v1"
    script: Optional[str] = None
    endpoint: EndpointConfig = EndpointConfig()
    roles: dict = field(default_factory=dict)  # role name -> EndpointConfig
    parallel_requests: int = 8
    retry: RetryPolicy = RetryPolicy()
    budget: BudgetConfig = BudgetConfig()
    reward: RewardSpec = RewardSpec()
    judge_runs: int = 8
    wellformed_bonus: float = 0.0
    credit_weighting: str = "uniform"

    def temperatures(self) -> dict:
        return {Role(r): e.temperature for r, e in self.roles.items() if e.temperature is not None}

    def describe(self) -> dict:
        """Resolved settings as plain data, for logs and ``--dry-run``."""
        b = self.budget
        return {
            "preset": self.preset,
            "seed": self.seed,
            "out": self.out,
            "rollouts": self.rollouts,
            "templates": self.templates,
            "provider": "scripted" if self.script else "http",
            "script": self.script,
            "endpoint": {"url": self.endpoint.url, "model": self.endpoint.model, "native_n": self.endpoint.native_n},
            "roles": {r: {"url": e.url, "model": e.model, "temperature": e.temperature} for r, e in sorted(self.roles.items())},
            "parallel_requests": self.parallel_requests,
            "retry": {"max_attempts": self.retry.max_attempts, "base_delay": self.retry.base_delay, "max_delay": self.retry.max_delay},
            "budget": {
                "parallel_rollouts": b.parallel_rollouts,
                "max_rounds": b.max_rounds,
                "verifier_samples": b.verifier_samples,
                "max_refinement_rounds": b.max_refinement_rounds,
                "max_output_tokens": b.max_output_tokens,
                "discount": b.discount,
                "lemma_confidence_threshold": str(b.lemma_confidence_threshold),
            },
            "reward": {"n": self.reward.n, "transform": self.reward.transform.value, "outcome_gate": self.reward.outcome_gate},
            "judge_runs": self.judge_runs,
            "credit_weighting": self.credit_weighting,
        }


_TOP_KEYS = {
    "preset", "seed", "out", "rollouts", "templates", "script", "provider", "roles",
    "parallel_requests", "retry", "budget", "reward", "judge_runs", "wellformed_bonus", "credit_weighting",
}


def _check_keys(section: str, data: dict, allowed) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a mapping")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config key {section + '.' if section else ''}{unknown[0]}")


def _names(cls) -> set:
    return {f.name for f in fields(cls)}


def _endpoint(section: str, data: dict, base: EndpointConfig = EndpointConfig()) -> EndpointConfig:
    _check_keys(section, data, _names(EndpointConfig))
    return replace(base, **data)


def load_config(path=None, preset: Optional[str] = None, overrides: Optional[dict] = None) -> CliConfig:
    """Build a CliConfig. ``overrides`` holds flag values; ``None`` entries are ignored."""
    data: dict = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        data = interpolate(data)
        _check_keys("", data, _TOP_KEYS)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}

    preset = overrides.pop("preset", None) or preset or data.get("preset", "default")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (known: {', '.join(sorted(PRESETS))})")

    try:
        budget_data = {**PRESETS[preset], **(data.get("budget") or {})}
        _check_keys("budget", budget_data, _names(BudgetConfig))
        if "lemma_confidence_threshold" in budget_data:
            budget_data["lemma_confidence_threshold"] = Fraction(str(budget_data["lemma_confidence_threshold"]))
        budget = BudgetConfig(**budget_data)

        reward_data = data.get("reward") or {}
        _check_keys("reward", reward_data, _names(RewardSpec))
        reward = RewardSpec(**reward_data)

        retry_data = data.get("retry") or {}
        _check_keys("retry", retry_data, _names(RetryPolicy))
        retry = RetryPolicy(**retry_data)

        endpoint = _endpoint("provider", data.get("provider") or {})
        roles_data = data.get("roles") or {}
        _check_keys("roles", roles_data, {r.value for r in Role})
        roles = {r: _endpoint(f"roles.{r}", v or {}, endpoint) for r, v in roles_data.items()}
    except (TypeError, ValueError, DomainError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(str(err)) from err

    cfg = CliConfig(
        config_path=None if path is None else str(path),
        preset=preset,
        seed=int(data.get("seed", 0)),
        out=str(data.get("out", "runs")),
        rollouts=int(data.get("rollouts", 1)),
        templates=str(data.get("templates", "v1")),
        script=data.get("script"),
        endpoint=endpoint,
        roles=roles,
        parallel_requests=int(data.get("parallel_requests", 8)),
        retry=retry,
        budget=budget,
        reward=reward,
        judge_runs=int(data.get("judge_runs", 8)),
        wellformed_bonus=float(data.get("wellformed_bonus", 0.0)),
        credit_weighting=str(data.get("credit_weighting", "uniform")),
    )
    if cfg.script and path is not None and not Path(cfg.script).is_absolute():
        cfg = replace(cfg, script=str(Path(path).parent / cfg.script))

    if "provider_url" in overrides:
        cfg = replace(cfg, endpoint=replace(cfg.endpoint, url=overrides.pop("provider_url")))
    for key in ("seed", "out", "rollouts", "script"):
        if key in overrides:
            cfg = replace(cfg, **{key: overrides.pop(key)})
    if overrides:
        raise ConfigError(f"unknown override {sorted(overrides)[0]}")
    if cfg.rollouts < 1:
        raise ConfigError("rollouts must be >= 1")
    if cfg.credit_weighting not in ("uniform", "occurrence"):
        raise ConfigError(f"unknown credit_weighting {cfg.credit_weighting!r}")
    return cfg


def build_provider(cfg: CliConfig) -> TokenMeter:
    """The provider stack for a config; the outer token meter reports usage per role."""
    if cfg.script:
        base: CompletionProvider = ScriptedProvider.from_file(cfg.script)
    else:
        if not cfg.endpoint.url and not (cfg.roles and all(e.url for e in cfg.roles.values())):
            raise ConfigError("no provider: give --provider-url, provider.url in the config, or a --script")
        key = api_key_from_env(API_KEY_ENV)

        def http(e: EndpointConfig) -> CompletionProvider:
            if not e.url:
                raise ConfigError("an endpoint is missing its url")
            inner = HttpChatProvider(
                e.url, e.model, key, e.timeout, e.native_n, cfg.parallel_requests, cfg.budget.max_output_tokens
            )
            return RetryingProvider(inner, cfg.retry)

        default = http(cfg.endpoint) if cfg.endpoint.url else None
        routes = {Role(r): http(e) for r, e in cfg.roles.items() if e.url and e.url != cfg.endpoint.url}
        if default is None:
            default = next(iter(routes.values()))
        base = RoleRouter(default, routes) if routes else default
    base.max_output_tokens = max(base.max_output_tokens, cfg.budget.max_output_tokens)
    limited = ConcurrencyLimiter(base, cfg.parallel_requests)
    return TokenMeter(limited)
