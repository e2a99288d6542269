"""YAML experiment configuration, validated with pydantic.

A config names the model and carries one block per command; the command to
run comes from the CLI (or a top-level ``command`` key).  Unknown keys are
rejected with a close-match suggestion.
"""

from __future__ import annotations

import difflib
from typing import Literal, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .models import FAMILIES, ModelSpec, model_from_dict

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "COMMANDS"]

COMMANDS = ("integrate", "equilibria", "simulate", "exit-times", "quasipotential", "verify", "sweep")
VERIFY_SUITES = ("erlang", "entropy", "hjb", "reversibility", "dirichlet", "conservation")

# y0 / y1: explicit vector, "uniform", "equilibrium", "equilibrium:<i>", "delta:<state>"
Point = Union[list[float], str]


class ConfigError(ValueError):
    """All problems found in a config, one message per entry."""

    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelBlock(_Strict):
    family: Literal["rerouting", "mobile", "mobile_split", "closed", "open"]
    capacity: int = Field(ge=1)
    lam: Union[float, list[float]]
    requirements: list[int] | None = None
    mu: list[float] | None = None
    gamma: list[float] | None = None

    def build(self) -> ModelSpec:
        data = self.model_dump(exclude_none=True)
        if self.family in ("mobile", "mobile_split"):
            missing = [k for k in ("requirements", "mu", "gamma") if k not in data]
            if missing:
                raise ValueError(f"{self.family} needs {', '.join(missing)}")
        else:
            extra = [k for k in ("requirements", "mu", "gamma") if k in data]
            if extra:
                raise ValueError(f"{self.family} takes no {', '.join(extra)}")
            if isinstance(self.lam, list):
                raise ValueError("single-class families take a scalar lam")
        return model_from_dict(data)


class IntegrateBlock(_Strict):
    y0: Point = "uniform"
    T: float = Field(10.0, gt=0)
    tol: float = Field(1e-9, gt=0)
    samples: int = Field(101, ge=2)


class EquilibriaBlock(_Strict):
    points: int = Field(4000, ge=2)
    per_axis: int = Field(24, ge=1)
    bounds: tuple[float, float] = (1e-3, 1e3)
    merge_radius: float = Field(1e-6, gt=0)


class SimulateBlock(_Strict):
    N: int = Field(ge=1)
    T: float = Field(gt=0)
    y0: Point = "equilibrium"
    samples: int = Field(101, ge=2)
    event_log: bool = False
    compare_ode: bool = False


class RegionBlock(_Strict):
    kind: Literal["ball", "slow_mode", "g_sublevel"] = "ball"
    radius: float | None = Field(None, gt=0)
    fraction: float | None = Field(None, gt=0, lt=1)
    delta: float | None = Field(None, gt=0)
    cap: float | None = Field(None, gt=0)


class ExitTimesBlock(_Strict):
    Ns: list[int] = Field(min_length=1)
    replicas: int = Field(200, ge=1)
    event_cap: int = Field(10**9, ge=1)
    equilibrium: int = Field(0, ge=0)
    region: RegionBlock = RegionBlock()
    attraction_samples: int = Field(100, ge=1)


class QuasipotentialBlock(_Strict):
    y0: Point = "equilibrium"
    y1: list[float]
    M: int = Field(8, ge=1)
    nodes: int = Field(3, ge=1)


class VerifyBlock(_Strict):
    suites: list[str] = Field(default_factory=lambda: list(VERIFY_SUITES))
    samples: int = Field(100, ge=1)

    @field_validator("suites")
    @classmethod
    def _known(cls, value):
        if not value:
            raise ValueError("suite selection is empty")
        for name in value:
            if name not in VERIFY_SUITES:
                hint = difflib.get_close_matches(name, VERIFY_SUITES, n=1)
                extra = f" (did you mean {hint[0]!r}?)" if hint else ""
                raise ValueError(f"unknown suite {name!r}{extra}")
        return value


class Range(_Strict):
    start: float
    stop: float
    num: int = Field(ge=1)


class SweepBlock(_Strict):
    parameter: Literal["lam"] = "lam"
    values: Union[list[float], Range]
    capacities: list[int] | None = None
    points: int = Field(2000, ge=2)
    per_axis: int = Field(16, ge=1)


class ExperimentConfig(_Strict):
    command: Literal[COMMANDS] | None = None  # type: ignore[valid-type]
    seed: int = Field(0, ge=0, lt=2**64)
    out: str | None = None
    threads: int | None = Field(None, ge=1)
    model: ModelBlock
    integrate: IntegrateBlock | None = None
    equilibria: EquilibriaBlock | None = None
    simulate: SimulateBlock | None = None
    exit_times: ExitTimesBlock | None = Field(None, alias="exit-times")
    quasipotential: QuasipotentialBlock | None = None
    verify: VerifyBlock | None = None
    sweep: SweepBlock | None = None

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    def block(self, command: str):
        attr = command.replace("-", "_")
        value = getattr(self, attr)
        if value is None:
            defaults = {"integrate": IntegrateBlock, "equilibria": EquilibriaBlock,
                        "verify": VerifyBlock}
            if command in defaults:
                return defaults[command]()
            raise ConfigError([f"{command}: block missing from config"])
        return value

    def build_model(self) -> ModelSpec:
        return self.model.build()


def _fields(model_cls) -> list[str]:
    names = []
    for name, info in model_cls.model_fields.items():
        names.append(info.alias or name)
    return names


def _resolve(loc) -> type | None:
    """Pydantic model class owning the field at ``loc`` (for suggestions)."""
    cls = ExperimentConfig
    for part in loc[:-1]:
        if not isinstance(part, str):
            continue
        field = None
        for name, info in cls.model_fields.items():
            if part in (name, info.alias):
                field = info
        if field is None:
            return None
        ann = field.annotation
        candidates = [ann, *getattr(ann, "__args__", ())]
        nxt = next((c for c in candidates if isinstance(c, type) and issubclass(c, BaseModel)), None)
        if nxt is None:
            return None
        cls = nxt
    return cls


def _describe(err) -> str:
    loc = tuple(err["loc"])
    where = ".".join(str(p) for p in loc) or "<root>"
    if err["type"] == "extra_forbidden":
        owner = _resolve(loc)
        hint = difflib.get_close_matches(str(loc[-1]), _fields(owner), n=1) if owner else []
        extra = f"; did you mean {hint[0]!r}?" if hint else ""
        return f"{where}: unknown key{extra}"
    msg = err["msg"]
    if msg.startswith("Value error, "):
        msg = msg[len("Value error, "):]
    return f"{where}: {msg}"


def parse_config(text: str, command: str | None = None) -> ExperimentConfig:
    """Parse and validate YAML text; raises :class:`ConfigError` with every problem."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"syntax error: {exc}"]) from None
    if not isinstance(data, dict):
        raise ConfigError(["top level must be a mapping"])
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError([_describe(e) for e in exc.errors()]) from None
    if command is not None:
        if command not in COMMANDS:
            raise ConfigError([f"unknown command {command!r}"])
        cfg.command = command
    if cfg.command is None:
        raise ConfigError(["no command given (CLI subcommand or top-level 'command')"])
    try:
        cfg.build_model()
    except (ValueError, TypeError) as exc:
        raise ConfigError([f"model: {exc}"]) from None
    if cfg.command != "sweep":
        cfg.block(cfg.command)
    elif cfg.sweep is None:
        raise ConfigError(["sweep: block missing from config"])
    return cfg


def known_families() -> list[str]:
    return sorted(FAMILIES)
