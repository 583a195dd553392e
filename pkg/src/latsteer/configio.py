"""Flat key=value configuration and deterministic file output.

Config files are line-oriented: `key = value`, `#` starts a comment,
arrays are comma-separated. Errors carry the offending line number.
CSV output uses 17 significant digits and LF endings; JSON output has
sorted keys and no timestamps, so identical inputs produce identical
bytes.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .dynamics import ControlSignal, IntegratorPolicy, Trajectory
from .potentials import harmonic, polynomial, quartic, shifted_odd, toda
from .system import LatticeConfig, LatticeSystem, State

__all__ = [
    "ConfigError",
    "Config",
    "parse_config_text",
    "parse_config_file",
    "system_from_config",
    "state_from_config",
    "policy_from_config",
    "write_trajectory_csv",
    "read_trajectory_csv",
    "write_control_csv",
    "parse_control_csv",
    "dump_json",
    "format_float",
]


class ConfigError(Exception):
    """Bad configuration: unparseable text, missing or mistyped keys."""


class Config:
    def __init__(self, entries: dict[str, tuple[str, int]], source: str):
        self._entries = entries
        self.source = source

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def echo(self) -> dict[str, str]:
        return {k: raw for k, (raw, _) in sorted(self._entries.items())}

    def _raw(self, key: str, default):
        if key in self._entries:
            return self._entries[key][0]
        if default is _REQUIRED:
            raise ConfigError(f"{self.source}: missing required config key '{key}'")
        return default

    def _line(self, key: str) -> int:
        return self._entries[key][1]

    def str(self, key: str, default=None) -> str | None:
        raw = self._raw(key, default)
        return raw

    def float(self, key: str, default=None) -> float | None:
        raw = self._raw(key, default)
        if raw is None or isinstance(raw, (int, float)):
            return raw
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(
                f"{self.source}:{self._line(key)}: key '{key}' expects a number, "
                f"got '{raw}'"
            ) from None

    def int(self, key: str, default=None) -> int | None:
        raw = self._raw(key, default)
        if raw is None or isinstance(raw, int):
            return raw
        try:
            val = float(raw)
            if val != int(val):
                raise ValueError
            return int(val)
        except ValueError:
            raise ConfigError(
                f"{self.source}:{self._line(key)}: key '{key}' expects an integer, "
                f"got '{raw}'"
            ) from None

    def bool(self, key: str, default=None) -> bool | None:
        raw = self._raw(key, default)
        if raw is None or isinstance(raw, bool):
            return raw
        low = raw.strip().lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(
            f"{self.source}:{self._line(key)}: key '{key}' expects true/false, "
            f"got '{raw}'"
        )

    def floats(self, key: str, default=None) -> list[float] | None:
        raw = self._raw(key, default)
        if raw is None or isinstance(raw, list):
            return raw
        try:
            return [float(tok) for tok in raw.split(",") if tok.strip() != ""]
        except ValueError:
            raise ConfigError(
                f"{self.source}:{self._line(key)}: key '{key}' expects "
                f"comma-separated numbers, got '{raw}'"
            ) from None

    def ints(self, key: str, default=None) -> list[int] | None:
        vals = self.floats(key, default)
        if vals is None or all(isinstance(v, int) for v in vals):
            return vals
        out = []
        for v in vals:
            if v != int(v):
                raise ConfigError(
                    f"{self.source}:{self._line(key)}: key '{key}' expects integers"
                )
            out.append(int(v))
        return out


_REQUIRED = object()
REQUIRED = _REQUIRED


def parse_config_text(text: str, source: str = "<config>") -> Config:
    entries: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(
                f"{source}:{lineno}: expected 'key = value', got '{body}'"
            )
        key, _, value = body.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in entries:
            raise ConfigError(
                f"{source}:{lineno}: duplicate key '{key}' "
                f"(first set on line {entries[key][1]})"
            )
        entries[key] = (value, lineno)
    return Config(entries, source)


def parse_config_file(path: str | Path) -> Config:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return Config(parse_config_text(text, source=str(path))._entries, str(path))


# ---------------------------------------------------------------------------
# domain object construction

def potential_from_config(cfg: Config):
    kind = cfg.str("potential", REQUIRED).lower().replace("_", "-")
    if kind == "toda":
        return toda()
    if kind == "harmonic":
        return harmonic()
    if kind == "quartic":
        return quartic()
    if kind == "polynomial":
        coeffs = cfg.floats("param.coeffs", REQUIRED)
        lower = cfg.float("param.lower_bound", None)
        grows = cfg.bool("param.grows", None)
        return polynomial(coeffs, lower_bound=lower, grows=grows)
    if kind == "shifted-odd":
        coeffs = cfg.floats("param.coeffs", REQUIRED)
        shift = cfg.float("param.shift", REQUIRED)
        offset = cfg.float("param.offset", 0.0)
        return shifted_odd(coeffs, shift, offset=offset)
    raise ConfigError(
        f"{cfg.source}: unknown potential '{kind}' (expected toda, harmonic, "
        f"quartic, polynomial, or shifted-odd)"
    )


def system_from_config(cfg: Config) -> LatticeSystem:
    n = cfg.int("n", 3)
    topology = cfg.str("topology", "periodic")
    sites = cfg.ints("control_sites", [1])
    pot = potential_from_config(cfg)
    try:
        config = LatticeConfig(n=n, topology=topology, control_sites=tuple(sites))
    except ValueError as exc:
        raise ConfigError(f"{cfg.source}: {exc}") from None
    return LatticeSystem(config, pot)


def state_from_config(cfg: Config, n: int, q_key: str = "q", p_key: str = "p") -> State:
    q = cfg.floats(q_key, None)
    p = cfg.floats(p_key, None)
    if q is None:
        q = [0.0] * n
    if p is None:
        p = [0.0] * n
    if len(q) != n or len(p) != n:
        raise ConfigError(
            f"{cfg.source}: '{q_key}'/'{p_key}' must have {n} entries each "
            f"(got {len(q)} and {len(p)})"
        )
    return State(np.asarray(q), np.asarray(p))


def policy_from_config(cfg: Config) -> IntegratorPolicy:
    try:
        return IntegratorPolicy(
            step=cfg.float("step", 1e-3),
            sample_stride=cfg.int("stride", 10),
            clamp=cfg.float("clamp", None),
        )
    except ValueError as exc:
        raise ConfigError(f"{cfg.source}: {exc}") from None


# ---------------------------------------------------------------------------
# CSV and JSON output

def format_float(x: float) -> str:
    return f"{float(x):.17g}"


def write_trajectory_csv(path: str | Path, traj: Trajectory) -> None:
    n = traj.states.shape[1] // 2
    cols = (
        ["t"]
        + [f"q{j}" for j in range(1, n + 1)]
        + [f"p{j}" for j in range(1, n + 1)]
        + [f"u{s}" for s in traj.sites]
    )
    lines = [",".join(cols)]
    for k in range(len(traj)):
        row = [traj.times[k], *traj.states[k], *traj.controls[k]]
        lines.append(",".join(format_float(v) for v in row))
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii"))


def read_trajectory_csv(path: str | Path) -> dict:
    text = Path(path).read_text(encoding="ascii")
    lines = [ln for ln in text.split("\n") if ln]
    names = lines[0].split(",")
    n = sum(1 for name in names if name.startswith("q"))
    sites = tuple(int(name[1:]) for name in names if name.startswith("u"))
    data = np.array([[float(tok) for tok in ln.split(",")] for ln in lines[1:]])
    return {
        "times": data[:, 0],
        "states": data[:, 1 : 1 + 2 * n],
        "controls": data[:, 1 + 2 * n :],
        "sites": sites,
    }


def write_control_csv(path: str | Path, signal: ControlSignal) -> None:
    cols = ["duration"] + [f"u{s}" for s in signal.sites]
    lines = [",".join(cols)]
    for duration, vals in signal.merged():
        lines.append(",".join(format_float(v) for v in (duration, *vals)))
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii"))


def parse_control_csv(path: str | Path) -> ControlSignal:
    try:
        text = Path(path).read_text(encoding="ascii")
    except OSError as exc:
        raise ConfigError(f"cannot read control file {path}: {exc}") from None
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if len(lines) < 2:
        raise ConfigError(f"{path}: control file needs a header and >= 1 row")
    names = lines[0].split(",")
    if names[0].strip() != "duration" or len(names) < 2:
        raise ConfigError(
            f"{path}:1: header must be 'duration,u<site>,...', got '{lines[0]}'"
        )
    try:
        sites = [int(name.strip()[1:]) for name in names[1:]]
    except ValueError:
        raise ConfigError(f"{path}:1: control columns must look like 'u3'") from None
    per_site: dict[int, list] = {s: [] for s in sites}
    for lineno, ln in enumerate(lines[1:], start=2):
        toks = ln.split(",")
        if len(toks) != len(names):
            raise ConfigError(f"{path}:{lineno}: expected {len(names)} fields")
        try:
            vals = [float(tok) for tok in toks]
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: non-numeric field") from None
        duration = vals[0]
        if not duration > 0:
            raise ConfigError(f"{path}:{lineno}: durations must be positive")
        for s, v in zip(sites, vals[1:]):
            per_site[s].append((duration, v))
    try:
        return ControlSignal.from_segments(per_site)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def dump_json(path: str | Path, obj) -> None:
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"
    Path(path).write_bytes(text.encode("utf-8"))
