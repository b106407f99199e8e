"""Run configuration: presets, the key=value file format and flag merging.

Config files hold one ``key = value`` per line; ``#`` starts a comment.
Precedence is preset < config file < command-line flags.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from qkdlink import optics
from qkdlink.metrics import DEFAULT_DUTY_CYCLE, DEFAULT_WINDOW_BYTES
from qkdlink.postproc.reconcile import PrivacyAmpParams, ReconcilePolicy

ROLES = ("alice", "bob", "loopback")
PRESET_NAMES = tuple(optics.PRESETS) + ("custom",)
PHYSICAL_KEYS = ("mu", "channel_loss_db", "detector_efficiency", "dark_count_prob", "visibility")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        where = f"{source or 'config'}:{line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


# key -> parser; anything else is rejected
KEYS = {
    "role": str,
    "preset": str,
    "address": str,
    "quantum_address": str,
    "sessions": int,
    "trains_per_session": int,
    "pulses_per_train": int,
    "seed": int,
    "out": str,
    "capture": str,
    "timeout": float,
    "mu": float,
    "channel_loss_db": float,
    "detector_efficiency": float,
    "dark_count_prob": float,
    "visibility": float,
    "dead_time_slots": int,
    "pulse_rate_hz": float,
    "inject_qber": _opt_float,
    "eps_pa": float,
    "qber_abort_threshold": float,
    "ec_efficiency_f": float,
    "epoch_blocks": int,
    "initial_qber": float,
    "max_iters": int,
    "duty_cycle": float,
    "window_bytes": int,
    "verbose": _bool,
}


def parse_config_text(text: str, source: str | None = None) -> dict:
    """Parse key=value lines into typed values; errors name the line."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise ConfigError(f"expected key = value, got {raw.strip()!r}", lineno, source)
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno, source)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", lineno, source)
        try:
            values[key] = KEYS[key](val)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno, source) from None
    return values


def load_config(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {p}: {exc}") from None
    return parse_config_text(text, str(p))


@dataclass
class RunConfig:
    role: str = "loopback"
    preset: str = "lab"
    address: str = "127.0.0.1:7741"
    quantum_address: str | None = None
    sessions: int = 1
    trains_per_session: int = 1000
    pulses_per_train: int = 2400
    seed: int | None = None
    out: str = "qkd-out"
    capture: str | None = None
    timeout: float = 60.0
    link: optics.LinkParams = field(default_factory=lambda: optics.PRESETS["lab"])
    inject_qber: float | None = None
    pa: PrivacyAmpParams = field(default_factory=PrivacyAmpParams)
    policy: ReconcilePolicy = field(default_factory=ReconcilePolicy)
    duty_cycle: float = DEFAULT_DUTY_CYCLE
    window_bytes: int = DEFAULT_WINDOW_BYTES
    verbose: bool = False

    @property
    def quantum_addr(self) -> str:
        """Second port for the simulated quantum link (public port + 1 by default)."""
        if self.quantum_address:
            return self.quantum_address
        host, _, port = self.address.rpartition(":")
        return f"{host}:{int(port) + 1}"

    def effective_link(self) -> optics.LinkParams:
        """Link parameters with any requested error injection folded in."""
        if self.inject_qber is None:
            return self.link
        return self.link.with_(excess_error=optics.excess_for_qber(self.link, self.inject_qber))


_LINK_FIELDS = {f.name for f in dataclasses.fields(optics.LinkParams)}
_PA_FIELDS = {f.name for f in dataclasses.fields(PrivacyAmpParams)}
_POLICY_FIELDS = {"epoch_blocks", "initial_qber", "max_iters"}


def build_config(preset: str | None = None, file_values: dict | None = None, flag_values: dict | None = None) -> RunConfig:
    """Merge preset, config-file values and flags (later wins)."""
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (flag_values or {}).items() if v is not None})
    name = merged.pop("preset", preset or "lab")
    if name not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    if name == "custom":
        missing = [k for k in PHYSICAL_KEYS if k not in merged]
        if missing:
            raise ConfigError(f"custom preset needs explicit {', '.join(missing)}")
    link_kw = {k: merged.pop(k) for k in list(merged) if k in _LINK_FIELDS}
    try:
        link = optics.LinkParams(**link_kw) if name == "custom" else optics.PRESETS[name].with_(**link_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    pa_kw = {k: merged.pop(k) for k in list(merged) if k in _PA_FIELDS}
    pol_kw = {k: merged.pop(k) for k in list(merged) if k in _POLICY_FIELDS}
    try:
        pa = PrivacyAmpParams(**pa_kw)
        policy = ReconcilePolicy(**pol_kw)
        cfg = RunConfig(preset=name, link=link, pa=pa, policy=policy, **merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    if cfg.role not in ROLES:
        raise ConfigError(f"role must be one of {', '.join(ROLES)}")
    for name in ("sessions", "trains_per_session", "pulses_per_train", "window_bytes"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be at least 1")
    if cfg.seed is not None and not 0 <= cfg.seed < 1 << 64:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    if not 0 < cfg.duty_cycle <= 1:
        raise ConfigError("duty_cycle must lie in (0, 1]")
    if cfg.timeout <= 0:
        raise ConfigError("timeout must be positive")
    if cfg.role != "loopback":
        host, _, port = cfg.address.rpartition(":")
        if not host or not port.isdigit():
            raise ConfigError(f"address must be host:port, got {cfg.address!r}")
    if cfg.inject_qber is not None:
        try:
            cfg.effective_link()
        except ValueError as exc:
            raise ConfigError(f"inject_qber: {exc}") from None
