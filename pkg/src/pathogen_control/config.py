"""Experiment configuration: an INI file with fixed sections and typed keys.

Every key has a default, so an empty file yields the standard room setup.
Overrides use ``section.key=value``, or a bare ``key=value`` when the key
name is unique across sections. See ``SCHEMA`` for the full list.
"""
from __future__ import annotations

import configparser
import hashlib
import io
import math
from dataclasses import dataclass, field

from .envs import EpisodeSpec
from .mesh import MeshSpec
from .ppo import PPOConfig


class ConfigError(ValueError):
    pass


# check codes: "pos" > 0, "nonneg" >= 0, "unit" in (0, 1), "unit1" in (0, 1]
_F, _I, _S = float, int, str


def _B(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


_B.__name__ = "bool"

SCHEMA: dict[str, dict[str, tuple]] = {
    "room": {"lx": (_F, 8.0, "pos"), "ly": (_F, 4.0, "pos")},
    "mesh": {"nx": (_I, 80, "pos"), "ny": (_I, 40, "pos")},
    "physics": {
        "K": (_F, 0.022, "nonneg"), "K_hp": (_F, 0.022, "nonneg"),
        "lam": (_F, 0.0085, "nonneg"), "lam_hp": (_F, 0.0085, "nonneg"),
        "alpha1": (_F, 0.2, "nonneg"), "alpha2": (_F, 0.2, "nonneg"),
        "R": (_F, 2.5, "nonneg"), "R_hp": (_F, 2.5, "nonneg"),
        "eps": (_F, 0.1, "pos"), "wx": (_F, 1.0, "pos"),
        "vx": (_F, -0.015, None), "vy": (_F, 0.0, None),
    },
    "sources": {"source_x": (_F, 6.0, None), "source_y": (_F, 2.0, None),
                "hp_y": (_F, 3.0, None)},
    "episode": {
        "problem": (_S, "vortex", None), "T": (_F, 600.0, "pos"), "dt": (_F, 1.0, "pos"),
        "action_quantum": (_F, 0.0, "nonneg"),  # 0 disables quantisation
        "obs_nx": (_I, 16, "pos"), "obs_ny": (_I, 8, "pos"), "obs_ceiling": (_F, 10.0, "pos"),
    },
    "region": {"xmax": (_F, None, "pos")},  # empty: 2 m (vortex) or 4 m (hp)
    "sweep": {
        "l_min": (_F, 2.0, "pos"), "l_max": (_F, 5.0, "pos"), "l_step": (_F, 0.25, "pos"),
        "hp_min": (_F, 3.0, "pos"), "hp_max": (_F, 6.5, "pos"), "hp_step": (_F, 0.25, "pos"),
        "mesh_nx": (_S, "20,40,80,160", None), "mesh_l": (_F, 4.0, "pos"),
    },
    "ppo": {
        "learning_rate": (_F, 0.005, "pos"), "n_steps": (_I, 10, "pos"),
        "batch_size": (_I, 10, "pos"), "n_epochs": (_I, 10, "pos"),
        "gamma": (_F, 0.99, "unit1"), "gae_lambda": (_F, 0.95, "unit1"),
        "clip_range": (_F, 0.2, "unit"), "vf_coef": (_F, 0.5, "nonneg"),
        "ent_coef": (_F, 0.0, "nonneg"), "max_grad_norm": (_F, 0.5, "pos"),
        "log_std_init": (_F, 0.0, None), "reward_scale": (_F, 0.001, "pos"),
        "time_limit_bootstrap": (_B, False, None),
    },
    "run": {
        "seed": (_I, 0, "nonneg"), "seeds": (_I, 10, "pos"),
        "total_steps": (_I, 0, "nonneg"),  # 0: 6 episodes (vortex) or 8 (hp)
        "action": (_F, None, None),  # constant action for `simulate`; empty: bound midpoint
        "snapshot_every": (_I, 60, "pos"),
        "out": (_S, "runs", None),
        "workers": (_I, None, "pos"),  # empty: PATHOGEN_CONTROL_WORKERS, else 1
    },
}

# bookkeeping keys that never change results
NON_SEMANTIC = {("run", "out"), ("run", "workers")}


def _bare_index():
    index: dict[str, list[str]] = {}
    for section, keys in SCHEMA.items():
        for key in keys:
            index.setdefault(key, []).append(section)
    return index


_BARE = _bare_index()


def _parse_value(section, key, text):
    typ, _, check = SCHEMA[section][key]
    name = f"{section}.{key}"
    text = text.strip()
    if text == "":
        if SCHEMA[section][key][1] is None:
            return None
        raise ConfigError(f"{name}: empty value")
    try:
        value = typ(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {typ.__name__}") from None
    if typ is float and not math.isfinite(value):
        raise ConfigError(f"{name}: must be finite")
    bad = {
        "pos": lambda v: v <= 0,
        "nonneg": lambda v: v < 0,
        "unit": lambda v: not 0 < v < 1,
        "unit1": lambda v: not 0 < v <= 1,
    }.get(check)
    if bad is not None and bad(value):
        raise ConfigError(f"{name}: invalid value {value!r} ({check})")
    return value


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {
        (s, k): spec[1] for s, keys in SCHEMA.items() for k, spec in keys.items()})

    def __getitem__(self, name: str):
        return self.values[resolve_key(name)]

    def set(self, name: str, text: str):
        section, key = resolve_key(name)
        self.values[(section, key)] = _parse_value(section, key, text)

    def serialize(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for section, keys in SCHEMA.items():
            cp[section] = {k: _format_value(self.values[(section, k)]) for k in keys}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def config_hash(self) -> str:
        lines = [f"{s}.{k}={_format_value(v)}" for (s, k), v in sorted(self.values.items())
                 if (s, k) not in NON_SEMANTIC]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()

    def validate(self):
        """Cross-field checks; raises ConfigError naming the offending field."""
        v = self.values
        if v[("episode", "problem")] not in ("vortex", "hp"):
            raise ConfigError("episode.problem: must be 'vortex' or 'hp'")
        lx, ly = v[("room", "lx")], v[("room", "ly")]
        for key, hi in (("source_x", lx), ("source_y", ly), ("hp_y", ly)):
            if not 0 <= v[("sources", key)] <= hi:
                raise ConfigError(f"sources.{key}: outside the room")
        for lo_key, hi_key in (("l_min", "l_max"), ("hp_min", "hp_max")):
            if v[("sweep", lo_key)] > v[("sweep", hi_key)]:
                raise ConfigError(f"sweep.{lo_key}: larger than sweep.{hi_key}")
        self.mesh_nx_values()
        try:
            self.episode_spec()
            self.ppo_config()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def mesh_nx_values(self) -> list[int]:
        text = self.values[("sweep", "mesh_nx")]
        try:
            values = [int(t) for t in text.split(",") if t.strip()]
        except ValueError:
            raise ConfigError(f"sweep.mesh_nx: expected comma-separated integers, got {text!r}") from None
        if not values or any(n < 2 or n % 2 for n in values):
            raise ConfigError("sweep.mesh_nx: needs even values >= 2")
        return values

    def episode_spec(self, problem: str | None = None) -> EpisodeSpec:
        v = self.values
        quantum = v[("episode", "action_quantum")]
        return EpisodeSpec(
            problem=problem or v[("episode", "problem")],
            T=v[("episode", "T")], dt=v[("episode", "dt")],
            mesh=MeshSpec(v[("room", "lx")], v[("room", "ly")], v[("mesh", "nx")], v[("mesh", "ny")]),
            K=v[("physics", "K")], K_hp=v[("physics", "K_hp")],
            lam=v[("physics", "lam")], lam_hp=v[("physics", "lam_hp")],
            alpha1=v[("physics", "alpha1")], alpha2=v[("physics", "alpha2")],
            R=v[("physics", "R")], R_hp=v[("physics", "R_hp")], eps=v[("physics", "eps")],
            source=(v[("sources", "source_x")], v[("sources", "source_y")]),
            hp_y=v[("sources", "hp_y")], wx=v[("physics", "wx")],
            uniform_velocity=(v[("physics", "vx")], v[("physics", "vy")]),
            region_xmax=v[("region", "xmax")],
            obs_grid=(v[("episode", "obs_nx")], v[("episode", "obs_ny")]),
            obs_ceiling=v[("episode", "obs_ceiling")],
            action_quantum=quantum or None,
        )

    def ppo_config(self) -> PPOConfig:
        return PPOConfig(**{k: self.values[("ppo", k)] for k in SCHEMA["ppo"]})

    def total_steps(self, problem: str) -> int:
        n = self.values[("run", "total_steps")]
        if n:
            return n
        spec = self.episode_spec(problem)
        return (6 if problem == "vortex" else 8) * spec.n_steps


def resolve_key(name: str) -> tuple[str, str]:
    name = name.strip()
    if "." in name:
        section, key = name.split(".", 1)
        if section not in SCHEMA:
            raise ConfigError(f"unknown section {section!r}")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        return section, key
    sections = _BARE.get(name)
    if not sections:
        raise ConfigError(f"unknown key {name!r}")
    if len(sections) > 1:
        raise ConfigError(f"key {name!r} is ambiguous; use one of "
                          + ", ".join(f"{s}.{name}" for s in sections))
    return sections[0], name


def parse_config(text: str = "", overrides=(), source: str = "<config>") -> RunConfig:
    """Parse INI ``text`` then apply ``key=value`` overrides, in that order."""
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = RunConfig()
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in section [{section}]")
            cfg.values[(section, key)] = _parse_value(section, key, raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        cfg.set(key, value)
    return cfg.validate()


def load_config(path=None, overrides=()) -> RunConfig:
    if path is None:
        return parse_config("", overrides)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, overrides, source=str(path))
