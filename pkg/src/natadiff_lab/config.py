"""Sectioned key-value configuration and world files.

Parsing errors (syntax, unknown keys, unreadable values) raise ``ConfigError``
carrying a line and column. Building objects from a parsed configuration can
additionally raise the domain errors of the schedule and world modules; the
CLI maps the former to exit status 2 and the latter to 1.
"""

from __future__ import annotations

import configparser
import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import AttackConfig
from .errors import ConfigError
from .guidance import GuidanceParams
from .schedule import ScheduleTable
from .world import Component, MixtureWorld

__all__ = ["LabConfig", "load_config", "parse_config_text", "load_world", "parse_cov", "DATA_DIR"]

DATA_DIR = Path(__file__).with_name("data")


def _floats(text):
    return [float(v) for v in re.split(r"[,\s]+", text.strip()) if v]


def _ints(text):
    return [int(v) for v in re.split(r"[,\s]+", text.strip()) if v]


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_int(text):
    t = text.strip().lower()
    return None if t in ("", "none") else int(t)


def parse_cov(text, dim):
    """``iso(s)``, ``diag(a, b, ...)`` or a full matrix with rows separated by ``;``."""
    t = text.strip()
    m = re.fullmatch(r"(iso|diag)\((.*)\)", t)
    if m:
        vals = _floats(m.group(2))
        if m.group(1) == "iso":
            if len(vals) != 1:
                raise ValueError("iso() takes one standard deviation")
            return vals[0] ** 2 * np.eye(dim)
        if len(vals) != dim:
            raise ValueError(f"diag() needs {dim} variances")
        return np.diag(vals)
    rows = [_floats(r) for r in t.split(";") if r.strip()]
    cov = np.array(rows, dtype=np.float64)
    if cov.shape != (dim, dim):
        raise ValueError(f"cov must be {dim}x{dim}, got shape {cov.shape}")
    return cov


# section -> key -> (converter, default)
SCHEMA = {
    "schedule": {
        "num_timesteps": (int, 1000),
        "alpha_bar": (str, "linear(1.0, 1e-5)"),
        "sampling_times": (str, "uniform(201)"),
    },
    "world": {
        "include": (str, None),
        "name": (str, "world"),
        "num_classes": (int, None),
    },
    "denoiser": {
        "hidden": (_ints, [64, 64]),
        "t_embed": (int, 8),
        "c_embed": (int, 8),
        "activation": (str, "tanh"),
        "steps": (int, 6000),
        "batch_size": (int, 256),
        "learning_rate": (float, 3e-3),
        "drop_prob": (float, 0.1),
        "loss_weighting": (str, "eps"),
        "lr_decay": (_bool, True),
        "seed": (int, 0),
    },
    "victims": {
        "white_box": (str, "shortcut0"),
        "transfer": (str, "shortcut1"),
        "mlp_hidden": (_ints, [32, 32]),
        "train_steps": (int, 3000),
        "train_batch_size": (int, 128),
        "train_learning_rate": (float, 1e-2),
        "shortcut_samples": (int, 20000),
        "pgd_epsilon": (float, 1.0),
        "pgd_step_size": (float, 0.125),
        "pgd_steps": (int, 20),
        "adv_epsilon": (float, 0.5),
        "adv_step_size": (float, 0.18),
        "adv_steps": (int, 7),
        "adv_train_steps": (int, 1500),
        "seed": (int, 0),
    },
    "guidance": {
        "omega": (float, 7.5),
        "rho": (float, 7.5),
        "mu": (float, 0.2),
        "s": (float, 50.0),
        "c_l": (int, 0),
        "c_u": (int, 700),
        "transforms": (str, "default5"),
        "shift": (float, 0.1),
        "degrees": (float, 10.0),
        "reflect": (_bool, False),
    },
    "attack": {
        "R": (int, 5),
        "k": (int, 1),
        "r_l": (int, 500),
        "r_u": (int, 800),
        "S": (int, 5),
        "delta_mu": (float, 0.0),
        "delta_s": (float, 15.0),
        "mode": (str, "similarity"),
        "target_class": (_optional_int, None),
        "y": (_optional_int, None),
        "similarity_sense": (str, "most"),
        "num_samples": (int, 200),
        "seed": (int, 0),
    },
    "eval": {
        "victims": (lambda s: [v.strip() for v in s.split(",") if v.strip()], ["bayes"]),
        "reference": (str, "bayes"),
        "t_star": (int, 100),
        "mu_list": (_floats, [0.0, 0.2, 0.5]),
        "reference_samples": (int, 2000),
        "seed": (int, 0),
    },
}

COMPONENT_KEYS = {"mean", "cov", "weight", "labels"}


class _Parser(configparser.ConfigParser):
    def optionxform(self, optionstr):
        return optionstr  # keys are case-sensitive (R, S)


def _locate(text):
    """Map ``(section, key)`` to the 1-based ``(line, value column)`` where it is set."""
    where = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            where[(section, None)] = (lineno, line.index("[") + 1)
            continue
        m = re.match(r"(\s*)([^=:\s][^=:]*?)\s*[=:]\s*", line)
        if m and section is not None:
            where[(section, m.group(2))] = (lineno, m.end() + 1)
            where[(section, m.group(2), "key")] = (lineno, len(m.group(1)) + 1)
    return where


def _read(text, source):
    parser = _Parser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        parser.read_string(text, source=str(source))
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError(f"{source}: key outside any section", e.lineno, 1) from None
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as e:
        raise ConfigError(f"{source}: {e.message if hasattr(e, 'message') else e}", e.lineno, 1) from None
    except configparser.ParsingError as e:
        lineno, line = e.errors[0]
        raise ConfigError(f"{source}: cannot parse {line.strip()!r}", lineno, 1) from None
    return parser


def parse_world_text(text, source="<world>", defaults=None):
    """Parse ``[world]`` plus ``[component NAME]`` sections into a ``MixtureWorld``."""
    parser = _read(text, source)
    where = _locate(text)
    meta = dict(defaults or {})
    if parser.has_section("world"):
        meta.update(parser["world"])
    comps = []
    for sec in parser.sections():
        if sec == "world":
            continue
        if not sec.startswith("component"):
            raise ConfigError(f"{source}: unexpected section [{sec}] in world file", *where.get((sec, None), (None, None)))
        body = parser[sec]
        unknown = set(body) - COMPONENT_KEYS
        missing = COMPONENT_KEYS - set(body)
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(f"{source}: unknown key {key!r} in [{sec}]", *where.get((sec, key, "key"), (None, None)))
        if missing:
            raise ConfigError(f"{source}: [{sec}] is missing {sorted(missing)}", *where.get((sec, None), (None, None)))
        try:
            mean = _floats(body["mean"])
        except ValueError as e:
            raise ConfigError(f"{source}: [{sec}] mean: {e}", *where[(sec, "mean")]) from None
        values = {}
        for key, conv in (("cov", lambda s: parse_cov(s, len(mean))), ("weight", float), ("labels", _ints)):
            try:
                values[key] = conv(body[key])
            except ValueError as e:
                raise ConfigError(f"{source}: [{sec}] {key}: {e}", *where[(sec, key)]) from None
        comps.append(Component(mean, values["cov"], values["weight"], frozenset(values["labels"])))
    if "num_classes" in meta and meta["num_classes"] is not None:
        num_classes = int(meta["num_classes"])
    else:
        num_classes = 1 + max(max(c.labels) for c in comps) if comps else 0
    return MixtureWorld(comps, num_classes, name=str(meta.get("name", "world")))


def load_world(path):
    path = Path(path)
    return parse_world_text(path.read_text(), source=path.name)


@dataclass
class LabConfig:
    """Typed configuration values; ``build_*`` methods create the domain objects."""

    values: dict
    world_text: str | None = None
    world_source: str = "<inline>"
    text: str = ""
    source: str = "<config>"
    includes: list = field(default_factory=list)

    def section(self, name):
        return self.values[name]

    @property
    def digest(self) -> str:
        h = hashlib.sha256(self.text.encode())
        if self.world_text is not None:
            h.update(self.world_text.encode())
        return h.hexdigest()

    def build_schedule(self) -> ScheduleTable:
        s = self.values["schedule"]
        return ScheduleTable.from_spec(s["num_timesteps"], s["alpha_bar"], s["sampling_times"])

    def build_world(self) -> MixtureWorld:
        w = self.values["world"]
        defaults = {"name": w["name"], "num_classes": w["num_classes"]}
        return parse_world_text(self.world_text or "", self.world_source, defaults)

    def build_guidance(self) -> GuidanceParams:
        g = self.values["guidance"]
        return GuidanceParams(g["omega"], g["rho"], g["mu"], g["s"], g["c_l"], g["c_u"])

    def build_attack(self, **overrides) -> AttackConfig:
        a = dict(self.values["attack"])
        a.update({k: v for k, v in overrides.items() if v is not None})
        return AttackConfig(guidance=self.build_guidance(), **a)


def _convert(section, key, raw, where, source):
    conv, _ = SCHEMA[section][key]
    try:
        return conv(raw)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{source}: [{section}] {key}: {e}", *where.get((section, key), (None, None))) from None


def parse_config_text(text, source="<config>", base_dir=None) -> LabConfig:
    parser = _read(text, source)
    where = _locate(text)
    values = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    world_sections = []
    for sec in parser.sections():
        if sec.startswith("component"):
            world_sections.append(sec)
            continue
        if sec not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{sec}]", *where.get((sec, None), (None, None)))
        for key, raw in parser[sec].items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{sec}]",
                                  *where.get((sec, key, "key"), (None, None)))
            values[sec][key] = _convert(sec, key, raw, where, source)
    cfg = LabConfig(values, text=text, source=str(source))
    include = values["world"]["include"]
    if include:
        if world_sections:
            raise ConfigError(f"{source}: use either [world] include or inline components, not both",
                              *where[(world_sections[0], None)])
        path = Path(include)
        if not path.is_absolute():
            candidates = [Path(base_dir or ".") / path, DATA_DIR / path]
            path = next((p for p in candidates if p.exists()), candidates[0])
        if not path.exists():
            raise ConfigError(f"{source}: world file {include!r} not found", *where[("world", "include")])
        cfg.world_text = path.read_text()
        cfg.world_source = path.name
        cfg.includes.append(str(path))
    elif world_sections:
        lines = text.splitlines()
        # re-parse just the component sections so their line numbers stay meaningful
        keep = []
        current = None
        for line in lines:
            m = re.match(r"\s*\[([^\]]+)\]", line)
            if m:
                current = m.group(1).strip()
            keep.append(line if current in world_sections else "")
        cfg.world_text = "\n".join(keep)
        cfg.world_source = str(source)
    else:
        raise ConfigError(f"{source}: no world given (set [world] include or add [component ...] sections)")
    return cfg


def load_config(path) -> LabConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e.strerror}") from None
    return parse_config_text(text, source=path.name, base_dir=path.parent)
