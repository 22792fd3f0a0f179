"""Line-oriented ``section.key = value`` configuration files.

Every key has a default in :data:`SCHEMA`; ``run.seed`` is the one key a file
must set.  Parsing rejects unknown keys, and :func:`render` prints a resolved
config back in a form that parses to the same values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Optional

from .advantages import ESTIMATOR_KINDS
from .controllers import CONTROLLER_KINDS, SCHEDULE_FAMILIES, ControllerConfig
from .tasks import TaskSpec
from .trainer import PolicyConfig, RunConfig, RunSettings, ScheduleConfig
from .update import OBJECTIVES, UpdateConfig

REQUIRED = ("run.seed",)


class ConfigError(ValueError):
    """Bad configuration; ``key`` names the offending entry when known."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _words(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _choice(options):
    def parse(text: str) -> str:
        word = text.strip()
        if word not in options:
            raise ValueError(f"{word!r} is not one of {', '.join(options)}")
        return word
    return parse


# key -> (parser, default).  Defaults for the simulator mirror the dataclasses.
SCHEMA: dict[str, tuple[Any, Any]] = {
    "task.kind": (_choice(("modular-sum", "parity")), "modular-sum"),
    "task.operand_count": (int, 2),
    "task.bit_count": (int, 3),
    "task.answer_length": (int, 1),

    "policy.variant": (_choice(("tabular", "mlp")), "tabular"),
    "policy.vocab_size": (int, 16),
    "policy.eos": (int, -1),
    "policy.window": (int, 2),
    "policy.positions": (int, 8),
    "policy.dim": (int, 32),
    "policy.max_context": (int, 16),
    "policy.init_scale": (float, 0.0),
    "policy.warmstart_steps": (int, 300),
    "policy.warmstart_lr": (float, 1.0),
    "policy.warmstart_noise": (float, 1.0),
    "policy.warmstart_noise_min": (float, 0.0),
    "policy.warmstart_distractors": (int, 1),
    "policy.warmstart_tail": (float, 0.01),

    "advantage.kind": (_choice(ESTIMATOR_KINDS), "group-normalized"),

    "controller.kind": (_choice(CONTROLLER_KINDS), "none"),
    "controller.gamma": (float, 10.0),
    "controller.beta": (float, 0.0),
    "controller.eps_high": (float, 0.28),
    "controller.clip_fraction": (float, 0.02),
    "controller.lam": (float, 0.1),
    "controller.alpha_gain": (float, 1.0),

    "schedule.family": (_choice(SCHEDULE_FAMILIES), "constant"),
    "schedule.start": (float, 0.8),
    "schedule.end": (float, 0.8),
    "schedule.band_halfwidth": (float, 0.05),

    "update.objective": (_choice(OBJECTIVES), "grpo-clipped"),
    "update.eps_low": (float, 0.2),
    "update.eps_high": (float, 0.2),
    "update.lr": (float, 0.1),
    "update.kl_coef": (float, 1e-3),
    "update.length_norm": (_bool, False),
    "update.sampler_lag": (int, 0),

    "run.seed": (int, None),
    "run.steps": (int, 2000),
    "run.prompts_per_step": (int, 32),
    "run.group_size": (int, 8),
    "run.max_len": (int, 2),
    "run.temperature": (float, 1.0),
    "run.eval_every": (int, 0),
    "run.eval_prompts": (int, 64),
    "run.eval_k": (int, 32),
    "run.eval_temperature": (float, 0.6),
    "run.checkpoint_every": (int, 0),
    "run.out_dir": (str, "out"),
    "run.figures": (_bool, False),
    # sweep-schedules
    "run.seeds": (_ints, (0, 1, 2)),
    "run.families": (_words, SCHEDULE_FAMILIES),
    "run.sweep_constant": (float, 0.8),
    "run.sweep_start": (float, 0.6),
    "run.sweep_end": (float, 0.2),
    # verify-theory
    "run.lr_grid": (_floats, (1e-2, 1e-3, 1e-4)),
    "run.trials": (int, 1000),
}

SECTIONS = ("task", "policy", "advantage", "controller", "schedule", "update", "run")


@dataclass
class Config:
    """Resolved key/value pairs plus the overrides that produced them."""

    values: dict[str, Any]
    overrides: list[str] = field(default_factory=list)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def section(self, name: str) -> dict[str, Any]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def with_values(self, **changes) -> "Config":
        vals = dict(self.values)
        for k, v in changes.items():
            vals[k.replace("__", ".")] = v
        return Config(vals, list(self.overrides))


def _assign(values: dict, key: str, raw: str, where: str) -> None:
    if key not in SCHEMA:
        raise ConfigError(f"{where}unknown key {key!r}", key)
    parser, _ = SCHEMA[key]
    try:
        values[key] = parser(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}bad value for {key}: {exc}", key) from None


def _split(line: str, where: str) -> tuple[str, str]:
    if "=" not in line:
        raise ConfigError(f"{where}expected 'section.key = value', got {line.strip()!r}")
    key, raw = line.split("=", 1)
    return key.strip(), raw


def parse_text(text: str, overrides: Iterable[str] = (), source: str = "<config>") -> Config:
    """Parse config text, apply ``key=value`` overrides, fill defaults."""
    values: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, raw = _split(stripped, f"{source}:{n}: ")
        _assign(values, key, raw, f"{source}:{n}: ")
    applied = []
    for item in overrides:
        key, raw = _split(item, "override: ")
        _assign(values, key, raw, "override: ")
        applied.append(f"{key}={raw.strip()}")
    for key in REQUIRED:
        if values.get(key) is None:
            raise ConfigError(f"missing required key {key}", key)
    for key, (_, default) in SCHEMA.items():
        values.setdefault(key, default)
    return Config(values, applied)


def load(path, overrides: Iterable[str] = ()) -> Config:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_text(text, overrides, str(path))


def format_entry(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(format_entry(v) for v in value)
    return str(value)


def render(cfg: Config) -> str:
    """Print every resolved key, grouped by section, in schema order."""
    lines = []
    current = None
    for key in SCHEMA:
        section = key.split(".", 1)[0]
        if section != current:
            if lines:
                lines.append("")
            lines.append(f"# {section}")
            current = section
        lines.append(f"{key} = {format_entry(cfg.values[key])}")
    return "\n".join(lines) + "\n"


def run_config(cfg: Config) -> RunConfig:
    """Build the trainer's configuration, turning validation errors into ConfigError."""
    def build(section, factory, **extra):
        kwargs = cfg.section(section)
        kwargs.update(extra)
        try:
            return factory(**kwargs)
        except ValueError as exc:
            raise ConfigError(f"invalid {section} settings: {exc}", section) from None

    upd = cfg.section("update")
    lag = upd.pop("sampler_lag")
    if lag not in (0, 1):
        raise ConfigError("update.sampler_lag must be 0 or 1", "update.sampler_lag")
    try:
        update = UpdateConfig(**upd)
    except ValueError as exc:
        raise ConfigError(f"invalid update settings: {exc}", "update") from None
    run_keys = {k: v for k, v in cfg.section("run").items()
                if k in RunSettings.__dataclass_fields__}
    try:
        run = RunSettings(**run_keys)
    except ValueError as exc:
        raise ConfigError(f"invalid run settings: {exc}", "run") from None
    rc = RunConfig(
        task=build("task", TaskSpec),
        policy=build("policy", PolicyConfig),
        estimator=cfg["advantage.kind"],
        controller=build("controller", ControllerConfig),
        schedule=ScheduleConfig(**cfg.section("schedule")),
        update=update,
        run=run,
        sampler_lag=lag,
    )
    try:
        rc.schedule.build(rc.policy.vocab_size)
    except ValueError as exc:
        raise ConfigError(f"invalid schedule settings: {exc}", "schedule") from None
    return rc
