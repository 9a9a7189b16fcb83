"""Run configuration: sectioned ``key = value`` text with typed defaults.

Grammar (the standard INI dialect read by :mod:`configparser` in strict mode)::

    [section]
    key = value        ; or '#' comments on their own line

Every key has a default (print them with ``--dump-config``).  Unknown sections
or keys are errors.  Values are overridden, in increasing precedence, by the
config file, environment variables named ``CONCEPTINV_<SECTION>_<KEY>`` and
command-line flags.
"""

from __future__ import annotations

import configparser
import copy
import io
import os
from typing import Any, Mapping

from .errors import ConfigError

ENV_PREFIX = "CONCEPTINV_"

DEFAULTS: dict[str, dict[str, Any]] = {
    "run": {
        "seed": 0,
        "domain": "rearrangement",
        "out": "runs/reference",
        "log_level": "INFO",
    },
    "diffusion": {
        "T": 100,
        "beta_start": 1e-4,
        "beta_end": 0.085,
        "hidden": "512,512",
        "time_dim": 32,
        "p_drop": 0.1,
        "batch_size": 256,
        "warmup": 200,
        "weight_decay": 0.0,
        "alpha": 0.5,
    },
    "rearrangement": {
        "train_steps": 10000,
        "lr": 1e-3,
        "vocab_seed": 7,
        "per_label": 917,
        "demos": 5,
        "k": 2,
        "omega": "learned",
        "eval_n": 50,
        "train_omega": 1.0,
    },
    "nav2d": {
        "train_steps": 8000,
        "lr": 2e-3,
        "vocab_seed": 7,
        "per_label": 225,
        "window_max": 12,
        "demos": 5,
        "k": 2,
        "omega": "1.2",
        "eval_n": 50,
        "train_omega": 1.0,
        "replan_every": 5,
        "lookahead": 5,
        "max_steps": 32,
        "rollout_n": 50,
    },
    "inversion": {
        "steps": 2000,
        "lr": 1e-2,
        "draws_per_demo": 16,
        "weight_decay": 0.01,
    },
    "baselines": {
        "bc_hidden": 512,
        "bc_lr": 6e-4,
        "bc_steps": 4000,
        "bc_batch_size": 256,
        "bc_eval_noise": 0.05,
        "cvae_latent": 16,
        "cvae_hidden": 512,
        "cvae_kl_weight": 1.0,
        "cvae_sigma": 0.05,
        "cvae_lr": 1e-3,
        "cvae_steps": 4000,
        "cvae_gen_noise": 0.1,
        "invert_steps": 1000,
        "invert_lr": 1e-2,
    },
}


class Config:
    """Typed view over sectioned settings; ``cfg["section"]["key"]`` or ``cfg.get``."""

    def __init__(self, values: Mapping[str, Mapping[str, Any]] | None = None):
        self._values = copy.deepcopy(DEFAULTS)
        if values:
            for sec, items in values.items():
                for key, val in items.items():
                    self.set(sec, key, val)

    def __getitem__(self, section: str) -> dict[str, Any]:
        if section not in self._values:
            raise ConfigError(f"unknown config section [{section}]")
        return self._values[section]

    def get(self, section: str, key: str) -> Any:
        sec = self[section]
        if key not in sec:
            raise ConfigError(f"unknown config key {section}.{key}")
        return sec[key]

    def set(self, section: str, key: str, value: Any) -> None:
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        self._values[section][key] = _coerce(section, key, value)

    def as_dict(self) -> dict[str, dict[str, Any]]:
        return copy.deepcopy(self._values)

    def dumps(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for sec, items in self._values.items():
            parser[sec] = {k: _format(v) for k, v in items.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def hidden(self, section: str = "diffusion") -> tuple[int, ...]:
        return parse_int_list(self.get(section, "hidden"))


def parse_int_list(text: str) -> tuple[int, ...]:
    try:
        out = tuple(int(p) for p in str(text).split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None
    if not out or min(out) < 1:
        raise ConfigError(f"widths must be positive, got {text!r}")
    return out


def parse_omega(text) -> str | float:
    """``"learned"`` or a finite positive guidance weight."""
    if isinstance(text, str) and text.strip().lower() == "learned":
        return "learned"
    try:
        w = float(text)
    except (TypeError, ValueError):
        raise ConfigError(f"omega must be 'learned' or a number, got {text!r}") from None
    if not w > 0 or w != w or w == float("inf"):
        raise ConfigError(f"omega must be positive and finite, got {text!r}")
    return w


def _coerce(section: str, key: str, value: Any) -> Any:
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                low = value.strip().lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return low in ("true", "1", "yes")
            return bool(value)
        if isinstance(default, int):
            f = float(value)
            if f != int(f):
                raise ValueError(value)
            return int(f)
        if isinstance(default, float):
            return float(value)
        text = str(value).strip()
        if key == "omega":
            parse_omega(text)
        return text
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{key}: cannot read {value!r} as {type(default).__name__}") from None


def _format(v: Any) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def load_config(path=None, env: Mapping[str, str] | None = None) -> Config:
    """Defaults, then the file at ``path`` (if any), then environment overrides."""
    cfg = Config()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, strict=True)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
        except configparser.Error as err:
            raise ConfigError(f"{path}: {err}") from None
        for sec in parser.sections():
            for key, val in parser[sec].items():
                cfg.set(sec, key, val)
    apply_env(cfg, os.environ if env is None else env)
    return cfg


def apply_env(cfg: Config, env: Mapping[str, str]) -> None:
    for name, val in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):]
        for sec in DEFAULTS:
            head = sec.upper() + "_"
            if rest.startswith(head):
                want = rest[len(head):]
                match = [k for k in DEFAULTS[sec] if k.upper() == want]
                if not match:
                    raise ConfigError(f"environment override {name} names no key in [{sec}]")
                cfg.set(sec, match[0], val)
                break
        else:
            raise ConfigError(f"environment override {name} names no config section")
