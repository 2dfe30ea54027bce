"""Experiment configuration: INI-style sections (or JSON) validated with pydantic."""

from __future__ import annotations

import configparser
import json
import re
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .learners import TrainConfig
from .potential import ResidualConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EnvSection(_Strict):
    name: str = "cournot"
    n_agents: int = Field(2, ge=1)
    # cournot
    alpha: float = 2.0
    beta: float = 1.0
    gamma_cost: float = 1.0
    caps: float = Field(1.0, gt=0)
    # routing: "braess", "random" or a JSON network file
    network: str = "braess"
    layers: int = Field(4, ge=2)
    width: int = Field(3, ge=1)
    net_seed: int = 0
    demand: Optional[float] = Field(None, gt=0)
    # navigation
    target: list[float] = [0.0, 0.0]
    repulsion: float = 0.1
    nav_eps: float = Field(0.01, gt=0)
    horizon: int = Field(25, ge=1)
    # modifiers
    team: bool = False
    ablation: Optional[Literal["noncoop_potential", "non_potential"]] = None
    c: float = Field(0.0, ge=0)


class AlgoSection(_Strict):
    name: Literal["spotac", "spotq", "independent"] = "spotac"
    lr_actor: float = Field(1e-4, gt=0)
    lr_critic: float = Field(1e-3, gt=0)
    batch: int = Field(256, ge=1)
    buffer: int = Field(4096, ge=1)
    gamma: float = Field(0.99, ge=0, lt=1)
    clip_norm: Optional[float] = 1.0
    steps: int = Field(20_000, ge=1)
    steps_per_iter: int = Field(1, ge=1)
    updates_per_iter: int = Field(1, ge=1)
    warmup: int = Field(256, ge=1)
    phi_refresh: int = Field(10, ge=1)
    refresh_iterations: int = Field(50, ge=1)
    tau: float = Field(0.01, gt=0, le=1)
    sigma_start: float = Field(0.1, ge=0)
    sigma_end: float = Field(0.01, ge=0)
    hidden: list[int] = [64, 64, 64]
    actor_hidden: list[int] = [64, 64, 64]
    max_proxy: Literal["actors", "sampling"] = "actors"
    proxy_samples: int = Field(64, ge=1)
    reeval_others: bool = False
    use_analytic_potential: bool = False
    residual_mode: Literal["gradient", "difference"] = "gradient"
    residual_iterations: int = Field(3000, ge=1)
    mc_actions: int = Field(4, ge=1)
    sigma_eps: float = Field(0.3, gt=0)
    consensus: bool = False
    topology: Literal["ring", "line", "complete"] = "ring"
    consensus_alpha: float = Field(1e-2, gt=0)
    consensus_rounds: int = Field(5000, ge=1)

    def residual_config(self) -> ResidualConfig:
        return ResidualConfig(mode=self.residual_mode, iterations=self.residual_iterations, mc_actions=self.mc_actions, sigma_eps=self.sigma_eps)

    def train_config(self, eval_every: int, eval_episodes: int = 10) -> TrainConfig:
        return TrainConfig(
            lr_actor=self.lr_actor,
            lr_critic=self.lr_critic,
            batch=self.batch,
            buffer=self.buffer,
            gamma=self.gamma,
            clip_norm=self.clip_norm,
            steps=self.steps,
            steps_per_iter=self.steps_per_iter,
            updates_per_iter=self.updates_per_iter,
            warmup=self.warmup,
            phi_refresh=self.phi_refresh,
            refresh_iterations=self.refresh_iterations,
            tau=self.tau,
            sigma_start=self.sigma_start,
            sigma_end=self.sigma_end,
            hidden=tuple(self.hidden),
            actor_hidden=tuple(self.actor_hidden),
            max_proxy=self.max_proxy,
            proxy_samples=self.proxy_samples,
            reeval_others=self.reeval_others,
            use_analytic_potential=self.use_analytic_potential,
            residual=self.residual_config(),
            eval_every=eval_every,
            eval_episodes=eval_episodes,
        )


class EvalSection(_Strict):
    eval_every: int = Field(1000, ge=1)
    eval_episodes: int = Field(100, ge=1)
    exploitability: bool = True
    exploitability_budget: int = Field(5000, ge=1)


class RunSection(_Strict):
    seeds: list[int] = [0]
    output_dir: str = "runs"
    record_wall_time: bool = True


class SweepSection(_Strict):
    key: str = "env.c"
    values: list[float] = []

    @field_validator("key")
    @classmethod
    def _known(cls, v: str) -> str:
        section, _, name = v.partition(".")
        model = {"env": EnvSection, "algo": AlgoSection, "eval": EvalSection}.get(section)
        if model is None or name not in model.model_fields:
            raise ValueError(f"cannot sweep over {v!r}")
        return v


class ExperimentConfig(_Strict):
    env: EnvSection = EnvSection()
    algo: AlgoSection = AlgoSection()
    eval: EvalSection = EvalSection()
    run: RunSection = RunSection()
    sweep: Optional[SweepSection] = None

    def runs(self) -> list[tuple[int, dict]]:
        """(seed, overrides) descriptors, one per sweep value and seed."""
        values = self.sweep.values if self.sweep and self.sweep.values else [None]
        out = []
        for v in values:
            over = {} if v is None else {self.sweep.key: v}
            for seed in self.run.seeds:
                out.append((seed, over))
        return out

    def with_override(self, key: str, value) -> "ExperimentConfig":
        section, _, name = key.partition(".")
        data = self.model_dump()
        data[section][name] = value
        return ExperimentConfig.model_validate(data)


_LIST = re.compile(r"^\s*\[.*\]\s*$")


def _coerce(raw: str):
    raw = raw.strip()
    if _LIST.match(raw):
        try:
            return json.loads(raw)
        except json.JSONDecodeError:
            return raw
    if raw.lower() in ("none", "null"):
        return None
    return raw


def _line_index(text: str) -> dict[tuple[str, ...], int]:
    lines: dict[tuple[str, ...], int] = {}
    section = None
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            lines[(section,)] = n
        elif section is not None:
            key = re.split(r"[=:]", s, maxsplit=1)[0].strip()
            lines[(section, key)] = n
    return lines


def parse_config(text: str) -> ExperimentConfig:
    """Parse INI-style ``key = value`` sections, or a JSON object."""
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(exc.msg, exc.lineno) from exc
        lines: dict = {}
    else:
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"), default_section="__defaults__")
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc).splitlines()[0], getattr(exc, "lineno", None)) from exc
        data = {sec: {k: _coerce(v) for k, v in cp[sec].items()} for sec in cp.sections()}
        lines = _line_index(text)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = tuple(str(p) for p in err["loc"])
        line = lines.get(loc[:2]) or lines.get(loc[:1])
        raise ConfigError(f"{'.'.join(loc)}: {err['msg']}", line) from exc


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())
