"""Experiment configuration: INI-style ``key = value`` files with ``[section]`` headers."""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError


def parse_grid(text: str) -> tuple[int, int]:
    try:
        rows, cols = (int(p) for p in text.lower().replace(" ", "").split("x"))
    except ValueError:
        raise ConfigError(f"grid must look like 2x2, got {text!r}") from None
    if rows < 1 or cols < 1:
        raise ConfigError(f"grid dimensions must be positive, got {text!r}")
    return rows, cols


@dataclass
class DataConfig:
    truth: str = "builtin:camera"
    size: int = 256
    xmax: float = 30.0
    seed: int = 1
    kernel_size: int = 3
    kernel_file: str = ""


@dataclass
class ModelConfig:
    kappa: float = 1.0
    alpha1_sq: float = 1.0
    alpha2_sq: float = 1.0
    beta1_sq: float = 1.0
    beta2_sq: float = 1.0
    gamma_factor: float = 0.99
    eta_factor: float = 0.99
    init: str = "backprojection"


@dataclass
class SamplerConfig:
    iterations: int = 5000
    burn_in: int = 2000
    thinning: int = 3
    seed: int = 7
    map_density: str = "target"
    checkpoint_every: int = 0
    resume_from: int = 0


@dataclass
class WorkersConfig:
    grid: str = "1x1"
    transport: str = "serial"
    schedule: str = "grid"
    hosts: str = ""
    timeout: float = 30.0


@dataclass
class OracleConfig:
    grids: str = "1x2,2x2"
    transports: str = "inproc"
    iterations: int = 50
    size: int = 64


@dataclass
class BenchConfig:
    grids: str = "1x1,1x2,2x2"
    iterations: int = 20
    repeats: int = 1


@dataclass
class OutputConfig:
    dir: str = "out"


_SECTIONS = {
    "data": DataConfig, "model": ModelConfig, "sampler": SamplerConfig,
    "workers": WorkersConfig, "oracle": OracleConfig, "bench": BenchConfig,
    "output": OutputConfig,
}


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    workers: WorkersConfig = field(default_factory=WorkersConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    source_text: str = ""

    @property
    def grid(self) -> tuple[int, int]:
        return parse_grid(self.workers.grid)

    @property
    def out_dir(self) -> Path:
        return Path(self.output.dir)

    def canonical(self) -> str:
        """Every setting except the output location and the resume point, one per line."""
        lines = []
        for name in _SECTIONS:
            if name == "output":
                continue
            section = getattr(self, name)
            for key, value in sorted(vars(section).items()):
                if (name, key) != ("sampler", "resume_from"):
                    lines.append(f"{name}.{key}={value!r}")
        return "\n".join(lines)

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def kernel(self) -> np.ndarray:
        from .deconv import gaussian_kernel
        from .linops import load_kernel
        if self.data.kernel_file:
            return load_kernel(self.data.kernel_file)
        return gaussian_kernel(self.data.kernel_size)

    def validate(self) -> None:
        s = self.sampler
        if s.iterations < 1 or s.burn_in < 0 or s.thinning < 1:
            raise ConfigError("iterations must be >= 1, burn_in >= 0 and thinning >= 1")
        if s.map_density not in ("target", "augmented"):
            raise ConfigError(f"map_density must be target or augmented, got {s.map_density!r}")
        if self.workers.transport not in ("serial", "inproc", "tcp"):
            raise ConfigError(f"transport must be serial, inproc or tcp, got {self.workers.transport!r}")
        if self.workers.schedule not in ("grid", "direct"):
            raise ConfigError(f"schedule must be grid or direct, got {self.workers.schedule!r}")
        if self.model.init not in ("backprojection", "zero"):
            raise ConfigError(f"init must be backprojection or zero, got {self.model.init!r}")
        if self.data.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        self.grid


def _convert(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = ExperimentConfig(source_text=text)
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        section = getattr(cfg, name)
        known = vars(section)
        for key, raw in parser.items(name):
            if key not in known:
                raise ConfigError(f"unknown key {name}.{key}")
            setattr(section, key, _convert(raw, known[key], f"{name}.{key}"))
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text())
