"""Run configuration: one JSON document drives every CLI mode.

Every default is materialized into the resolved dictionary that gets
written to run_meta.json, so a run can be reproduced bit-for-bit from its
own metadata file.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError

MODES = ("simulate", "match", "template")
MODELS = ("lagrangian", "langevin", "eulerian")

_POSITIVE = ("a0", "c", "gamma", "tau", "eps", "delta_mala", "delta_rmmala",
             "sigma_theta", "grid_mesh", "T", "kappa_mom", "kappa_pos",
             "pareto_s", "pareto_smin")


@dataclass
class RunConfig:
    mode: str
    seed: int
    model: str = "lagrangian"

    # model parameters
    a0: float = 1.0
    c: float = 1.0
    gamma: float = 0.1
    lam: float = 0.25
    tau: float = 0.5
    noise_centers: list | None = None  # explicit centers; None -> auto grid

    # observation / discretisation
    eps: float = 0.01
    T: float = 1.0
    grid_mesh: float = 0.01

    # sampler tuning
    eta: float = 0.9
    delta_mala: float = 0.01
    delta_rmmala: float = 0.001
    sigma_theta: float = 0.1
    iterations: int = 1000
    save_every: int = 10
    fix_theta: bool = False
    adapt: bool = False
    workers: int = 1

    # priors
    kappa_mom: float = 100.0
    kappa_pos: float = 100.0
    pareto_s: float = 0.1
    pareto_smin: float = 0.1

    # forward simulation
    num_paths: int = 1
    init_shape: dict = field(default_factory=lambda: {"kind": "ellipse", "n": 12,
                                                      "rx": 1.0, "ry": 0.5})
    init_momentum: dict = field(default_factory=lambda: {"kind": "zeros"})
    write_trajectories: bool = True

    # template initialisation
    template_init: dict = field(default_factory=lambda: {"shape_index": 0,
                                                         "rotate_deg": 0.0,
                                                         "stretch": 1.0})

    # file locations
    paths: dict = field(default_factory=dict)
    figures: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.seed is None:
            raise ConfigError("a seed is required (reproducibility is mandatory)")
        self.seed = int(self.seed)
        for name in _POSITIVE:
            if not getattr(self, name) > 0:
                raise ConfigError(f"config field {name!r} must be positive")
        if self.lam < 0:
            raise ConfigError("lam must be nonnegative")
        if self.iterations < 1:
            raise ConfigError("iterations must be at least 1")
        if self.save_every < 1:
            raise ConfigError("save_every must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must lie in [0, 1]")
        if not 0 < self.grid_mesh <= self.T:
            raise ConfigError("grid_mesh must satisfy 0 < h <= T")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "mode" not in data:
            raise ConfigError("config must set 'mode'")
        if "seed" not in data:
            raise ConfigError("config must set 'seed'")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(data)

    def resolved(self) -> dict:
        """All fields with defaults materialized (for run_meta.json)."""
        return asdict(self)

    def write_meta(self, out_dir) -> Path:
        out = Path(out_dir) / "run_meta.json"
        with open(out, "w") as fh:
            json.dump(self.resolved(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return out
