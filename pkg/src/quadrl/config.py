"""Run configuration: strict TOML with line-numbered diagnostics.

Sections and keys::

    [run]        task, seed, output_dir
    [model]      RobotModel fields (optional, defaults otherwise)
    [actuator]   kp, kd, tau_max
    [env]        history_length, sim_dt, control_substeps, add_noise, alpha_ang, alpha_lin,
                 workers, episode_length, terminate_on_body_contact
    [noise]      lin_vel, ang_vel, joint_vel, joint_pos
    [weights]    one entry per cost term, all fifteen required
    [ppo]        PpoConfig fields
    [selector]   SelectorConfig fields (selector runs only)
    [behaviors]  self_righting, standing_up, locomotion: run directories, policy files,
                 or "scripted" (selector runs only)

Unknown sections or keys, wrong value types and missing weights are all rejected
before anything is computed. Relative output directories resolve against
``$QUADRL_OUTPUT_ROOT`` when it is set.
"""

from __future__ import annotations

import os
import re
from dataclasses import MISSING, asdict, dataclass, field, fields
from typing import Any

import numpy as np
import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .actuator import ActuatorConfig
from .dynamics import MODEL_KEYS, RobotModel
from .env import COST_NAMES, EnvConfig, NoiseConfig, Task, TaskKind
from .ppo import PpoConfig
from .selector import BEHAVIORS, SelectorConfig

OUTPUT_ROOT_ENV = "QUADRL_OUTPUT_ROOT"
SCRIPTED = "scripted"

RUN_KEYS = {"task": str, "seed": int, "output_dir": str}
TASK_ENV_KEYS = {"episode_length": int, "terminate_on_body_contact": bool}
SECTIONS = ("run", "model", "actuator", "env", "noise", "weights", "ppo", "selector", "behaviors")


class ConfigError(ValueError):
    """Invalid configuration. ``line`` is 1-based when the offending entry was located."""

    def __init__(self, message: str, source: str = "<config>", line: int | None = None):
        self.message = message
        self.source = source
        self.line = line
        where = f"{source}:{line}" if line else source
        super().__init__(f"{where}: {message}")


class _Locator:
    """Maps ``(section, key)`` to the line where it is written."""

    _header = re.compile(r"^\s*\[\s*([A-Za-z0-9_.\-]+)\s*\]")
    _key = re.compile(r"^\s*([A-Za-z0-9_\-]+|\"[^\"]*\")\s*=")

    def __init__(self, text: str):
        self.lines: dict = {}
        section = ""
        for no, line in enumerate(text.splitlines(), 1):
            m = self._header.match(line)
            if m:
                section = m.group(1)
                self.lines.setdefault((section, None), no)
                continue
            m = self._key.match(line)
            if m:
                self.lines.setdefault((section, m.group(1).strip('"')), no)

    def __call__(self, section, key=None):
        return self.lines.get((section, key)) or self.lines.get((section, None))


def _dataclass_types(cls) -> dict:
    return {f.name: None if f.default is MISSING else type(f.default) for f in fields(cls)}


def _check_value(value, expected, name):
    """Type check against the type of a field's default value."""
    if expected is bool:
        ok = isinstance(value, bool)
    elif expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif expected is str:
        ok = isinstance(value, str)
    elif expected in (tuple, list, np.ndarray):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise TypeError(f"'{name}' must be {expected.__name__}, got {type(value).__name__}")


@dataclass
class RunConfig:
    task: TaskKind
    seed: int = 0
    output_dir: str = "runs"
    model: RobotModel = field(default_factory=RobotModel)
    actuator: ActuatorConfig = field(default_factory=ActuatorConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    weights: dict = field(default_factory=dict)
    episode_length: int = 0
    terminate_on_body_contact: bool | None = None
    ppo: PpoConfig = field(default_factory=PpoConfig)
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    behaviors: dict = field(default_factory=dict)
    source: str = "<config>"

    def make_task(self, kind=None) -> Task:
        return Task(self.task if kind is None else kind, dict(self.weights), self.episode_length,
                    terminate_on_body_contact=self.terminate_on_body_contact)

    def resolved_output(self, override: str | None = None) -> str:
        out = override if override is not None else self.output_dir
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not os.path.isabs(out):
            out = os.path.join(root, out)
        return out

    def to_dict(self) -> dict:
        env = asdict(self.env)
        noise = env.pop("noise")
        env["episode_length"] = self.episode_length
        if self.terminate_on_body_contact is not None:
            env["terminate_on_body_contact"] = self.terminate_on_body_contact
        ppo = asdict(self.ppo)
        ppo["hidden"] = list(ppo["hidden"])
        out = {
            "run": {"task": self.task.value, "seed": self.seed, "output_dir": self.output_dir},
            "model": self.model.to_dict(),
            "actuator": asdict(self.actuator),
            "env": env,
            "noise": noise,
            "weights": {k: float(self.weights[k]) for k in COST_NAMES},
            "ppo": ppo,
        }
        if self.task == TaskKind.SELECTOR:
            out["selector"] = asdict(self.selector)
            out["behaviors"] = dict(self.behaviors)
        return out

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def write_snapshot(self, path) -> None:
        """Write the fully resolved configuration; loading it reproduces this run."""
        with open(path, "w") as fh:
            fh.write(self.dumps())


def _section(data, name, loc, source) -> dict:
    sec = data.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"'{name}' must be a table", source, loc(name))
    return sec


def _typed(sec: dict, types: dict, name: str, loc, source) -> dict:
    for key, value in sec.items():
        if key not in types:
            raise ConfigError(f"unknown key '{key}' in [{name}]", source, loc(name, key))
        try:
            _check_value(value, types[key], key)
        except TypeError as exc:
            raise ConfigError(f"[{name}] {exc}", source, loc(name, key)) from None
    return sec


def _build(cls, sec, name, loc, source):
    try:
        return cls(**sec)
    except (ValueError, TypeError) as exc:
        line = loc(name)
        for key in sec:
            if key in str(exc):
                line = loc(name, key)
                break
        raise ConfigError(f"[{name}] {exc}", source, line) from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse and fully validate a run configuration."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"TOML syntax error: {exc}", source, int(m.group(1)) if m else None) from None
    loc = _Locator(text)
    for name in data:
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]", source, loc(name))

    run = _typed(_section(data, "run", loc, source), RUN_KEYS, "run", loc, source)
    if "task" not in run:
        raise ConfigError("missing required key 'task' in [run]", source, loc("run"))
    try:
        task = TaskKind(run["task"])
    except ValueError:
        options = ", ".join(k.value for k in TaskKind)
        raise ConfigError(f"unknown task '{run['task']}' (expected one of {options})", source,
                          loc("run", "task")) from None

    model_sec = _section(data, "model", loc, source)
    for key, value in model_sec.items():
        if key not in MODEL_KEYS:
            raise ConfigError(f"unknown key '{key}' in [model]", source, loc("model", key))
        default = getattr(RobotModel, key, None)
        expected = type(default) if default is not None else list
        try:
            _check_value(value, expected, key)
        except TypeError as exc:
            raise ConfigError(f"[model] {exc}", source, loc("model", key)) from None
    model = _build(RobotModel, model_sec, "model", loc, source)

    act_sec = _typed(_section(data, "actuator", loc, source), _dataclass_types(ActuatorConfig),
                     "actuator", loc, source)
    actuator = _build(ActuatorConfig, act_sec, "actuator", loc, source)
    if actuator.tau_max > model.torque_limit:
        raise ConfigError(f"actuator tau_max {actuator.tau_max} exceeds the model torque limit "
                          f"{model.torque_limit}", source, loc("actuator", "tau_max"))

    env_types = {k: v for k, v in _dataclass_types(EnvConfig).items() if k != "noise"}
    env_types.update(TASK_ENV_KEYS)
    env_sec = dict(_typed(_section(data, "env", loc, source), env_types, "env", loc, source))
    episode_length = env_sec.pop("episode_length", 0)
    terminate = env_sec.pop("terminate_on_body_contact", None)
    noise_sec = _typed(_section(data, "noise", loc, source), _dataclass_types(NoiseConfig),
                       "noise", loc, source)
    noise = _build(NoiseConfig, noise_sec, "noise", loc, source)
    env = _build(EnvConfig, {**env_sec, "noise": noise}, "env", loc, source)

    if "weights" not in data:
        raise ConfigError("missing [weights] section", source)
    weights = _typed(_section(data, "weights", loc, source), {k: float for k in COST_NAMES},
                     "weights", loc, source)
    missing = [k for k in COST_NAMES if k not in weights]
    if missing:
        raise ConfigError(f"missing weight for: {', '.join(missing)}", source, loc("weights"))

    ppo_types = _dataclass_types(PpoConfig)
    ppo_sec = _typed(_section(data, "ppo", loc, source), ppo_types, "ppo", loc, source)
    ppo = _build(PpoConfig, ppo_sec, "ppo", loc, source)
    if ppo.workers != env.workers and "workers" in ppo_sec and "workers" in env_sec:
        raise ConfigError("[ppo] workers and [env] workers disagree", source, loc("ppo", "workers"))
    if "workers" in ppo_sec and "workers" not in env_sec:
        env = _build(EnvConfig, {**env_sec, "noise": noise, "workers": ppo.workers}, "env", loc,
                     source)

    sel_sec = _section(data, "selector", loc, source)
    beh_sec = _section(data, "behaviors", loc, source)
    if task != TaskKind.SELECTOR and (sel_sec or beh_sec):
        which = "selector" if sel_sec else "behaviors"
        raise ConfigError(f"[{which}] is only valid for task 'selector'", source, loc(which))
    selector = _build(SelectorConfig,
                      _typed(sel_sec, _dataclass_types(SelectorConfig), "selector", loc, source),
                      "selector", loc, source)
    behaviors = _typed(beh_sec, {k.value: str for k in BEHAVIORS}, "behaviors", loc, source)
    if task == TaskKind.SELECTOR:
        missing = [k.value for k in BEHAVIORS if k.value not in behaviors]
        if missing:
            raise ConfigError(f"missing behavior source for: {', '.join(missing)}", source,
                              loc("behaviors"))

    cfg = RunConfig(task, run.get("seed", 0), run.get("output_dir", f"runs/{task.value}"), model,
                    actuator, env, dict(weights), episode_length, terminate, ppo, selector,
                    dict(behaviors), source)
    try:
        cfg.make_task()
    except ValueError as exc:
        raise ConfigError(str(exc), source, loc("env")) from None
    return cfg


def load_config(path) -> RunConfig:
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from None
    return parse_config(text, path)


def default_config_path(task) -> str:
    """Path of the shipped config for ``task``."""
    return os.path.join(os.path.dirname(__file__), "configs", f"{TaskKind(task).value}.toml")


def snapshot_equal(a: RunConfig, b: RunConfig) -> bool:
    return a.dumps() == b.dumps()


def describe_keys() -> dict[str, Any]:
    """Accepted keys per section, for ``--help`` style listings."""
    return {
        "run": sorted(RUN_KEYS),
        "model": sorted(MODEL_KEYS),
        "actuator": sorted(_dataclass_types(ActuatorConfig)),
        "env": sorted([k for k in _dataclass_types(EnvConfig) if k != "noise"] + list(TASK_ENV_KEYS)),
        "noise": sorted(_dataclass_types(NoiseConfig)),
        "weights": list(COST_NAMES),
        "ppo": sorted(_dataclass_types(PpoConfig)),
        "selector": sorted(_dataclass_types(SelectorConfig)),
        "behaviors": [k.value for k in BEHAVIORS],
    }
