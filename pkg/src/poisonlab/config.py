"""Experiment configs: sectioned key/value text resolved into a full plan.

Format: ``[section]`` headers, ``key = value`` lines, ``#`` comments. Every
key is typed and defaulted below; unknown keys or malformed values are
rejected with the offending key path and line number. Lists are
comma-separated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .attacks import ATTACK_KINDS
from .corruptions import DEFAULT_CATALOG, KINDS
from .data import StreamSpec
from .defense import STATISTICS
from .errors import ConfigError
from .methods import METHODS, MethodConfig

_SCHEMA = {
    "stream": {
        "classes": ("int", 8),
        "image_side": ("int", 16),
        "channels": ("int", 1),
        "task_classes": ("int_list", (4, 2, 2)),
        "train_per_class": ("int", 200),
        "val_per_class": ("int", 40),
        "test_per_class": ("int", 100),
        "grating_cycles": ("float", 3.5),
        "grating_cycles_max": ("float", 5.5),
        "noise_sigma": ("float", 0.05),
        "phase_jitter": ("float", 2.0 * math.pi),
        "shuffle_classes": ("bool", True),
    },
    "method": {
        "name": ("str", "LWF"),
        "lamb": ("float", None),
        "temperature": ("float", 2.0),
        "gamma": ("float", 0.5),
        "buffer_capacity": ("int", 200),
        "epochs": ("int", 50),
        "batch_size": ("int", 32),
        "lr": ("float", 0.05),
        "momentum": ("float", 0.9),
        "weight_decay": ("float", 1e-4),
        "lr_decay_epochs": ("int_list", (30, 40)),
        "lr_decay_factor": ("float", 0.1),
        "clip_norm": ("float", 0.5),
    },
    "attack": {
        "preset": ("str", None),
        "pcp": ("float", None),
        "pn": ("int", None),
        "pp": ("float", None),
        "severity": ("int", 5),
        "kinds": ("str_list", DEFAULT_CATALOG),
        "p": ("int", 1),
    },
    "defense": {
        "enabled": ("bool", False),
        "statistic": ("str", "P90"),
        "calibration_task": ("int", 1),
        "calibration_seeds": ("int_list", (101, 102, 103, 104, 105, 106, 107, 108)),
    },
    "harness": {
        "total_tasks": ("int", 25),
        "poisoned_fraction": ("float", 0.08),
        "attack": ("str", "BASE"),
        "severity": ("int", 5),
        "position": ("int", 4),
        "stream_length": ("int", 8),
        "classes_per_task": ("int", 2),
        "pool_classes": ("int", 32),
    },
    "run": {
        "seeds": ("int_list", (0, 1, 2, 3, 4)),
        "workers": ("int", 1),
        "out": ("str", None),
    },
}


@dataclass
class AttackConfig:
    preset: str | None  # None means no attack configured
    pcp: float | None
    pn: int | None
    pp: float | None
    severity: int
    kinds: tuple
    p: int

    @property
    def active(self) -> bool:
        return self.preset is not None or self.pcp is not None


@dataclass
class DefenseConfig:
    enabled: bool
    statistic: str
    calibration_task: int
    calibration_seeds: tuple


@dataclass
class HarnessMix:
    total_tasks: int
    poisoned_fraction: float
    attack: str
    severity: int
    position: int
    stream_length: int
    classes_per_task: int
    pool_classes: int

    @property
    def clean_fraction(self) -> float:
        return 1.0 - self.poisoned_fraction


@dataclass
class ExperimentPlan:
    stream: StreamSpec
    method: MethodConfig
    attack: AttackConfig
    defense: DefenseConfig
    harness: HarnessMix
    seeds: tuple
    workers: int = 1
    out: str | None = None


def _convert(raw: str, kind: str, path: str, line_no: int):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if kind == "int_list":
            return tuple(int(v.strip()) for v in raw.split(",") if v.strip())
        if kind == "str_list":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"line {line_no}: {path}: cannot parse {raw!r} as {kind}") from None


def _parse_sections(text: str) -> dict:
    values = {}
    section = None
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SCHEMA:
                raise ConfigError(f"line {line_no}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw_line.strip()!r}")
        if section is None:
            raise ConfigError(f"line {line_no}: key outside any [section]")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _SCHEMA[section]:
            raise ConfigError(f"line {line_no}: {section}.{key}: unknown key")
        kind, _ = _SCHEMA[section][key]
        values[(section, key)] = _convert(raw, kind, f"{section}.{key}", line_no)
    return values


def parse_config(text: str) -> ExperimentPlan:
    values = _parse_sections(text)

    def get(section, key):
        if (section, key) in values:
            return values[(section, key)]
        return _SCHEMA[section][key][1]

    stream = StreamSpec(
        class_pool_size=get("stream", "classes"),
        task_class_counts=get("stream", "task_classes"),
        image_side=get("stream", "image_side"),
        channels=get("stream", "channels"),
        train_per_class=get("stream", "train_per_class"),
        val_per_class=get("stream", "val_per_class"),
        test_per_class=get("stream", "test_per_class"),
        grating_cycles=get("stream", "grating_cycles"),
        grating_cycles_max=get("stream", "grating_cycles_max"),
        noise_sigma=get("stream", "noise_sigma"),
        phase_jitter=get("stream", "phase_jitter"),
        shuffle_classes=get("stream", "shuffle_classes"),
    )
    method_name = get("method", "name")
    if method_name not in METHODS:
        raise ConfigError(f"method.name: unknown method {method_name!r}")
    method = MethodConfig(
        method=method_name,
        lamb=get("method", "lamb"),
        temperature=get("method", "temperature"),
        gamma=get("method", "gamma"),
        buffer_capacity=get("method", "buffer_capacity"),
        epochs=get("method", "epochs"),
        batch_size=get("method", "batch_size"),
        lr=get("method", "lr"),
        momentum=get("method", "momentum"),
        weight_decay=get("method", "weight_decay"),
        lr_decay_epochs=get("method", "lr_decay_epochs"),
        lr_decay_factor=get("method", "lr_decay_factor"),
        clip_norm=get("method", "clip_norm"),
    )
    preset = get("attack", "preset")
    if preset is not None and preset not in ATTACK_KINDS:
        raise ConfigError(f"attack.preset: unknown preset {preset!r}")
    for kind_name in get("attack", "kinds"):
        if kind_name not in KINDS:
            raise ConfigError(f"attack.kinds: unknown corruption {kind_name!r}")
    attack = AttackConfig(
        preset=preset,
        pcp=get("attack", "pcp"),
        pn=get("attack", "pn"),
        pp=get("attack", "pp"),
        severity=get("attack", "severity"),
        kinds=get("attack", "kinds"),
        p=get("attack", "p"),
    )
    n_tasks = len(stream.task_class_counts)
    if attack.active and not 0 <= attack.p < n_tasks:
        raise ConfigError(f"attack.p: poisoned task index {attack.p} outside the "
                          f"{n_tasks}-task stream")
    if not 1 <= attack.severity <= 5:
        raise ConfigError(f"attack.severity: must be in [1, 5], got {attack.severity}")
    statistic = get("defense", "statistic")
    if statistic not in STATISTICS:
        raise ConfigError(f"defense.statistic: unknown statistic {statistic!r}")
    defense = DefenseConfig(
        enabled=get("defense", "enabled"),
        statistic=statistic,
        calibration_task=get("defense", "calibration_task"),
        calibration_seeds=get("defense", "calibration_seeds"),
    )
    if defense.enabled and not 0 <= defense.calibration_task < n_tasks:
        raise ConfigError(f"defense.calibration_task: index {defense.calibration_task} "
                          f"outside the {n_tasks}-task stream")
    if len(defense.calibration_seeds) < 2:
        raise ConfigError("defense.calibration_seeds: need at least 2 seeds")
    harness = HarnessMix(
        total_tasks=get("harness", "total_tasks"),
        poisoned_fraction=get("harness", "poisoned_fraction"),
        attack=get("harness", "attack"),
        severity=get("harness", "severity"),
        position=get("harness", "position"),
        stream_length=get("harness", "stream_length"),
        classes_per_task=get("harness", "classes_per_task"),
        pool_classes=get("harness", "pool_classes"),
    )
    if harness.attack not in ATTACK_KINDS:
        raise ConfigError(f"harness.attack: unknown preset {harness.attack!r}")
    if not 0 <= harness.poisoned_fraction < 1:
        raise ConfigError("harness.poisoned_fraction: must be in [0, 1)")
    if not 1 <= harness.position < harness.stream_length:
        raise ConfigError(f"harness.position: {harness.position} must be in "
                          f"[1, {harness.stream_length})")
    if harness.classes_per_task * harness.stream_length > harness.pool_classes:
        raise ConfigError("harness.stream_length: streams need "
                          f"{harness.classes_per_task * harness.stream_length} classes, pool has "
                          f"{harness.pool_classes}")
    seeds = get("run", "seeds")
    if not seeds:
        raise ConfigError("run.seeds: need at least one seed")
    workers = get("run", "workers")
    if workers < 1:
        raise ConfigError("run.workers: must be >= 1")
    return ExperimentPlan(stream=stream, method=method, attack=attack, defense=defense,
                          harness=harness, seeds=tuple(seeds), workers=workers,
                          out=get("run", "out"))


def load_config(path: str) -> ExperimentPlan:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
