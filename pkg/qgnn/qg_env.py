import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Optional, cast

import regex

from qgnn.qg_error import ErrorCode
from qgnn.qg_handler import handler


class Env:
    """
    Layered key/value store. Each layer keeps a reference to the layer it
    overrides, and lookups walk up the chain. Layers are never mutated, so a
    configuration can be extended without disturbing the ones it was built from.
    """

    def __init__(self, parent: Optional["Env"] = None, vars: Optional[dict] = None):
        self.parent = parent
        self.vars: dict[str, Any] = {} if vars is None else dict(vars)

    def lookup(self, name: str) -> Any:
        try:
            return (
                self.vars[name]
                if name in self.vars
                else cast("Env", self.parent).lookup(name)
            )
        except AttributeError:
            raise handler.error(f"unknown key '{name}'", code=ErrorCode.CONFIG)

    def __getitem__(self, item):
        return self.lookup(item)

    def child(self, vars: dict[str, Any]) -> "Env":
        return Env(self, vars)


BITS_CHOICES = ("fp", "8", "4", "2")
BT_CHOICES = ("off", "bt", "bt-star")
MODEL_CHOICES = ("gcn", "smp")
SPLIT_CHOICES = ("random", "public")
ELEMENT_CLASSES = ("input", "weight", "message", "aggregate", "update")

DEFAULTS: dict[str, str] = {
    "model": "gcn",
    "bits": "fp",
    "bt": "off",
    "bt-source-bits": "8",
    "bt-classes": ",".join(ELEMENT_CLASSES),
    "layers": "2",
    "hidden": "64",
    "mu": "6",
    "delta0": "0.1",
    "eta-h": "",
    "eta-lambda": "1e-5",
    "eta-s": "1e-5",
    "lambda0": "0",
    "slack0": "1",
    "lr": "0.01",
    "wd": "5e-4",
    "lr-gamma": "0.001",
    "wd-gamma": "1e-4",
    "gamma0": "1.0",
    "dropout": "0.8",
    "epochs": "200",
    "seed": "0",
    "split": "random",
    "train-per-class": "20",
    "val-size": "500",
    "data": "",
    "synth-blocks": "2",
    "synth-nodes": "1000",
    "synth-p-in": "0.05",
    "synth-p-out": "0.005",
    "synth-dim": "16",
    "synth-sep": "1.0",
    "log-every": "20",
}


def defaults_env() -> Env:
    return Env(vars=DEFAULTS)


LINE = regex.compile(r"^\s*(?P<key>[a-z][a-z0-9-]*)\s*=\s*(?P<value>[^#]*?)\s*(?:#.*)?$")
BLANK = regex.compile(r"^\s*(?:#.*)?$")


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if BLANK.match(line):
            continue
        if not (m := LINE.match(line)):
            raise handler.error(f"malformed config line '{line.strip()}'", lineno, ErrorCode.CONFIG)
        key = m.group("key")
        if key not in DEFAULTS:
            raise handler.error(f"unknown config key '{key}'", lineno, ErrorCode.CONFIG)
        out[key] = m.group("value")
    return out


def _key(name: str) -> str:
    return name.replace("_", "-")


@dataclass(frozen=True)
class ExperimentConfig:
    model: str
    bits: str
    bt: str
    bt_source_bits: int
    bt_classes: tuple[str, ...]
    layers: int
    hidden: int
    mu: float
    delta0: float
    eta_h: Optional[float]
    eta_lambda: float
    eta_s: float
    lambda0: float
    slack0: float
    lr: float
    wd: float
    lr_gamma: float
    wd_gamma: float
    gamma0: float
    dropout: float
    epochs: int
    seed: int
    split: str
    train_per_class: int
    val_size: int
    data: str
    synth_blocks: int
    synth_nodes: int
    synth_p_in: float
    synth_p_out: float
    synth_dim: int
    synth_sep: float
    log_every: int

    @classmethod
    def from_env(cls, env: Env) -> "ExperimentConfig":
        values: dict[str, Any] = {}
        for f in fields(cls):
            key = _key(f.name)
            raw = str(env[key]).strip()
            values[f.name] = _coerce(key, raw, f.type)
        config = cls(**values)
        config.validate()
        return config

    @classmethod
    def from_text(cls, text: str, base: Optional[Env] = None) -> "ExperimentConfig":
        env = (base or defaults_env()).child(parse_config_text(text))
        return cls.from_env(env)

    @classmethod
    def default(cls) -> "ExperimentConfig":
        return cls.from_env(defaults_env())

    def to_env(self) -> Env:
        return Env(vars={_key(f.name): _render(getattr(self, f.name)) for f in fields(self)})

    def to_text(self) -> str:
        return "".join(f"{key}={value}\n" for key, value in self.to_env().vars.items())

    def replace(self, **changes) -> "ExperimentConfig":
        env = self.to_env().child({_key(k): _render(v) for k, v in changes.items()})
        return ExperimentConfig.from_env(env)

    @property
    def quant_bits(self) -> Optional[int]:
        return None if self.bits == "fp" else int(self.bits)

    @property
    def data_path(self) -> Optional[Path]:
        if not self.data:
            return None
        path = Path(self.data)
        if not path.is_absolute() and (root := os.environ.get("QGNN_DATA_DIR")):
            path = Path(root) / path
        return path

    def validate(self) -> None:
        def bad(name: str, msg: str):
            return handler.error(f"{_key(name)}: {msg}", code=ErrorCode.CONFIG)

        for name, choices in (
            ("model", MODEL_CHOICES),
            ("bits", BITS_CHOICES),
            ("bt", BT_CHOICES),
            ("split", SPLIT_CHOICES),
        ):
            if getattr(self, name) not in choices:
                raise bad(name, f"expected one of {', '.join(choices)}, got '{getattr(self, name)}'")
        if self.bt_source_bits not in (4, 8):
            raise bad("bt_source_bits", "must be 4 or 8")
        if self.bt != "off":
            if self.quant_bits is None:
                raise bad("bt", "truncation needs a quantized bit width")
            if self.quant_bits > self.bt_source_bits:
                raise bad("bt", f"cannot truncate {self.bt_source_bits} bits to {self.quant_bits}")
        for cls_name in self.bt_classes:
            if cls_name not in ELEMENT_CLASSES:
                raise bad("bt_classes", f"unknown element class '{cls_name}'")
        if self.model == "gcn" and self.layers < 1:
            raise bad("layers", "a GCN needs at least one layer")
        if self.layers < 0:
            raise bad("layers", "must be non-negative")
        for name in ("hidden", "train_per_class", "synth_blocks", "synth_nodes", "synth_dim", "log_every"):
            if getattr(self, name) < 1:
                raise bad(name, "must be at least 1")
        for name in ("epochs", "val_size"):
            if getattr(self, name) < 0:
                raise bad(name, "must be non-negative")
        for name in ("mu", "delta0", "eta_lambda", "eta_s", "lr", "gamma0"):
            if not getattr(self, name) > 0:
                raise bad(name, "must be positive")
        if self.eta_h is not None and not self.eta_h > 0:
            raise bad("eta_h", "must be positive")
        for name in ("wd", "wd_gamma", "lr_gamma", "synth_sep"):
            if getattr(self, name) < 0:
                raise bad(name, "must be non-negative")
        if self.lambda0 > 0:
            raise bad("lambda0", "the multiplier must be non-positive")
        if not 0.0 <= self.dropout < 1.0:
            raise bad("dropout", "must be in [0, 1)")
        if not 0.0 <= self.synth_p_out < self.synth_p_in <= 1.0:
            raise bad("synth_p_in", "need 0 <= p-out < p-in <= 1")


def _coerce(key: str, raw: str, kind) -> Any:
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == Optional[float]:
            return None if raw == "" else float(raw)
        if kind == tuple[str, ...]:
            return tuple(part.strip() for part in raw.split(",") if part.strip())
        return raw
    except ValueError:
        raise handler.error(f"{key}: cannot parse '{raw}'", code=ErrorCode.CONFIG)


def _render(value: Any) -> str:
    match value:
        case None:
            return ""
        case tuple() | list():
            return ",".join(value)
        case float():
            return repr(value)
        case _:
            return str(value)
