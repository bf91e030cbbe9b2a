"""Run configuration: ``key = value`` text files merged with CLI overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .network import NetworkConfig


@dataclass
class RunConfig:
    topology: str = "toy"
    fusion: str = "correlation"
    input_size: int = 64
    normalize_corr: bool = False
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0005
    batch_pairs: int = 10
    iterations: int = 5000
    seed: int = 0
    sigma: float = 0.5
    k: str = "all"
    augment: bool = True
    pretrain_iterations: int = 0
    pretrain_lr: float = 0.001
    pretrain_batch: int = 20
    checkpoint_every: int = 500
    eval_every: int = 0
    threads: int = 1
    data: str = ""
    out: str = ""

    def network_config(self) -> NetworkConfig:
        make = NetworkConfig.paper if self.topology == "paper" else NetworkConfig.toy
        if self.topology not in ("paper", "toy"):
            raise ValueError(f"unknown topology {self.topology!r}")
        cfg = make(fusion=self.fusion, normalize_corr=self.normalize_corr)
        if self.input_size != cfg.input_size:
            cfg = dataclasses.replace(cfg, input_size=self.input_size)
        return cfg

    def to_text(self) -> str:
        lines = ["# effective run configuration"]
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _TYPES:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file (if any), then non-None overrides."""
    values = {}
    if path:
        values.update(parse_config_text(Path(path).read_text()))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        values[key] = _coerce(key, str(value)) if isinstance(value, str) else value
    return RunConfig(**values)
