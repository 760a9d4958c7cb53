"""Plain-text ``key = value`` configuration for the command line.

One flat namespace covers the simulation, solver, edge-test, detector,
trial-protocol and sweep settings; ``#`` and ``;`` start comments.  Every
key is also accepted as a ``--key`` command-line flag, which wins over the
file.  Example::

    # lagged-mode sweep over network size
    mode = lagged
    axis = n
    values = 10, 20, 30, 40, 50
    trials_per_point = 20
    lambda1 = 0.05
"""

from __future__ import annotations

import configparser
from dataclasses import fields

from .detect import DetectorConfig, EdgeTestConfig
from .errors import ConfigurationError
from .harness import SweepSpec, TrialProtocol, default_solver_config
from .simulate import SimConfig
from .solver import SolverConfig

_SECTION = "config"

# The edge threshold is tied to the simulated weight scale (delta / 2).
_SOLVER_EXCLUDED = {"edge_threshold"}

SWEEP_KEYS = {"axis": str, "values": tuple, "trials_per_point": int, "base_seed": int}
OUTPUT_KEYS = {"out_dir": str, "stem": str, "workers": int}

GROUPS = {
    "sim": SimConfig,
    "solver": SolverConfig,
    "edge": EdgeTestConfig,
    "detector": DetectorConfig,
    "protocol": TrialProtocol,
}


def _defaults():
    return {
        "sim": SimConfig(),
        "solver": default_solver_config(),
        "edge": EdgeTestConfig(),
        "detector": DetectorConfig(),
        "protocol": TrialProtocol(),
    }


def key_types():
    """Map every recognised key to ``(group, type)``."""
    out = {}
    for group, obj in _defaults().items():
        for f in fields(obj):
            if group == "solver" and f.name in _SOLVER_EXCLUDED:
                continue
            if f.name in out:
                raise RuntimeError(f"duplicate config key {f.name}")
            out[f.name] = (group, type(getattr(obj, f.name)))
    for k, t in SWEEP_KEYS.items():
        out[k] = ("sweep", t)
    for k, t in OUTPUT_KEYS.items():
        out[k] = ("output", t)
    return out


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def convert(key, raw, typ):
    raw = str(raw).strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is tuple:
            return tuple(float(v) for v in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {raw!r} (expected {typ.__name__})") from None


def parse_text(text):
    """Parse configuration text into a ``{key: typed value}`` dict."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive (T vs t_star)
    try:
        parser.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse config: {exc}") from None
    types = key_types()
    out = {}
    for key, raw in parser.items(_SECTION):
        if key not in types:
            raise ConfigurationError(f"unknown config key {key!r}")
        out[key] = convert(key, raw, types[key][1])
    return out


def load(path):
    try:
        with open(path) as fh:
            return parse_text(fh.read())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None


def build(values):
    """Assemble typed configuration objects from a flat key/value dict."""
    types = key_types()
    base = _defaults()
    per_group = {g: {} for g in list(GROUPS) + ["sweep", "output"]}
    for key, value in values.items():
        if key not in types:
            raise ConfigurationError(f"unknown config key {key!r}")
        per_group[types[key][0]][key] = value
    objs = {}
    for group, obj in base.items():
        kw = {f.name: getattr(obj, f.name) for f in fields(obj)}
        kw.update(per_group[group])
        objs[group] = GROUPS[group](**kw)
    sweep_kw = dict(per_group["sweep"])
    objs["sweep_kw"] = sweep_kw
    objs["output"] = {"out_dir": "results", "stem": None, "workers": None, **per_group["output"]}
    return objs


def sweep_spec(objs):
    kw = objs["sweep_kw"]
    spec_kw = dict(base=objs["sim"], solver=objs["solver"], edge=objs["edge"],
                   detector=objs["detector"], protocol=objs["protocol"])
    for k in ("axis", "values", "trials_per_point", "base_seed"):
        if k in kw:
            spec_kw[k] = kw[k]
    return SweepSpec(**spec_kw)


def dump(values):
    """Render a flat dict back to config text (sorted keys, deterministic)."""
    lines = []
    for k in sorted(values):
        v = values[k]
        if isinstance(v, tuple):
            v = ", ".join(format(x, "g") for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
