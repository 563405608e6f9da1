"""Run configuration with ``desk`` and ``paper`` profiles."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .model import MLPSpec
from .pde import get_benchmark

FAMILIES = ("sobolev", "poincare")
MODES = ("self_bounding", "bounding_aware")


@dataclass(frozen=True)
class RunConfig:
    benchmark: str = "wave1d"
    profile: str = "desk"
    seed: int = 0
    hidden: tuple = (32, 32)
    physics_sizes: tuple = (500, 1000, 1500, 2000)
    data_sizes: tuple = (0, 500, 1500, 2000)
    m_d: int | None = None  # unbalanced runs keep the first m_d posterior rows
    batch_size: int = 128
    n_iter_prior: int | None = None  # None: per-benchmark default
    n_iter_post: int = 1000
    lr_prior: float = 1e-3
    lr_post: float = 1e-5
    lr_decay: float = 0.95
    decay_every: int = 1000
    loss_weighting: str = "none"  # none | ntk_loss | ntk_residual
    ntk_every: int = 100
    checkpoint_every: int = 500
    delta: float = 0.05
    sigma2: float | None = None  # None: (3 sigma)^2 d_theta = 1
    family: str = "sobolev"
    mode: str | None = None  # None: self_bounding when balanced
    tau_min: float = 1.0
    tau_max: float = 1e4
    n_tau: int = 40
    k_smallest: int = 10
    n_draw: int = 10
    radii: tuple = (0.1, 0.25, 0.5, 1.0)
    lambda_min: float = 1e-4
    lambda_max: float = 1e1
    n_lambda: int = 20
    loss_clip: float = 100.0
    mc_draws: int = 100
    borrow_ic_constants_for_data: bool = False
    pooled_physics: bool = True
    delta_prime: float | None = None  # None: delta / 2
    label_noise: float = 0.0
    threads: int = 1

    def __post_init__(self):
        for name in ("hidden", "physics_sizes", "data_sizes", "radii"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        get_benchmark(self.benchmark)
        MLPSpec(self.hidden)
        if self.profile not in ("desk", "paper"):
            raise ContractError(f"unknown profile {self.profile!r}")
        if self.family not in FAMILIES:
            raise ContractError(f"family must be one of {FAMILIES}")
        if self.loss_weighting not in ("none", "ntk_loss", "ntk_residual"):
            raise ContractError(f"unknown loss_weighting {self.loss_weighting!r}")
        if self.ntk_every < 1 or self.decay_every < 1 or self.checkpoint_every < 1:
            raise ContractError("ntk_every, decay_every and checkpoint_every must be >= 1")
        if self.mode is not None and self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}")
        if not 0 < self.delta < 1:
            raise ContractError("delta must lie in (0, 1)")
        if self.delta_prime is not None and not 0 < self.delta_prime < self.delta:
            raise ContractError("delta_prime must lie in (0, delta)")
        if self.sigma2 is not None and not self.sigma2 > 0:
            raise ContractError("sigma2 must be positive")
        if len(self.physics_sizes) != 4 or len(self.data_sizes) != 4:
            raise ContractError("split sizes need four entries (prior, calibration, posterior, test)")
        if self.m_d is not None and not 1 <= self.m_d <= self.data_sizes[2]:
            raise ContractError(f"m_d must lie in [1, {self.data_sizes[2]}]")
        if any(not 0 < r <= 1 for r in self.radii):
            raise ContractError("constant-estimation radii must lie in (0, 1]")
        if self.batch_size < 1 or self.n_draw < 1 or self.mc_draws < 1:
            raise ContractError("batch_size, n_draw and mc_draws must be >= 1")
        if self.threads < 1:
            raise ContractError("threads must be >= 1")

    # derived values -------------------------------------------------------

    @property
    def spec(self) -> MLPSpec:
        return MLPSpec(self.hidden)

    @property
    def prior_iterations(self) -> int:
        if self.n_iter_prior is not None:
            return self.n_iter_prior
        base = 10_000 if self.benchmark == "reaction1d" else 30_000
        return base if self.profile == "paper" else base // 10

    @property
    def sigma_sq(self) -> float:
        if self.sigma2 is not None:
            return self.sigma2
        return 1.0 / (9.0 * self.spec.n_params)

    @property
    def balanced(self) -> bool:
        return self.m_d is None or self.m_d == self.data_sizes[2] == self.physics_sizes[2]

    @property
    def surrogate_mode(self) -> str:
        if self.mode is not None:
            return self.mode
        return "self_bounding" if self.balanced else "bounding_aware"

    @property
    def tau_grid(self) -> np.ndarray:
        return np.logspace(np.log10(self.tau_min), np.log10(self.tau_max), self.n_tau)

    @property
    def lambda_grid(self) -> np.ndarray:
        return np.logspace(np.log10(self.lambda_min), np.log10(self.lambda_max), self.n_lambda)

    @property
    def pooled_delta(self) -> float:
        return self.delta_prime if self.delta_prime is not None else self.delta / 2

    def sizes(self) -> dict:
        return {"physics": self.physics_sizes, "d": self.data_sizes}

    # serialisation ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in dataclasses.fields(self)}

    def digest(self) -> str:
        """Hash of every field that influences numeric outputs."""
        d = self.to_dict()
        d.pop("threads")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        profile = d.get("profile", "desk")
        base = profile_defaults(profile)
        base.update(d)
        try:
            return cls(**base)
        except TypeError as exc:
            raise ContractError(str(exc)) from None

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ContractError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ContractError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ContractError(f"{path}: config must be a JSON object")
        return cls.from_dict(d)


def profile_defaults(profile: str) -> dict:
    if profile == "desk":
        return {}
    if profile == "paper":
        return {
            "profile": "paper",
            "hidden": (256, 256, 256),
            "physics_sizes": (10_000, 20_000, 30_000, 40_000),
            "data_sizes": (0, 20_000, 30_000, 40_000),
            "batch_size": 300,
            "n_iter_post": 10_000,
            "lr_post": 1e-7,
            "sigma2": 1e-6,
            "loss_weighting": "ntk_residual",
        }
    raise ContractError(f"unknown profile {profile!r}")


def make_config(profile: str = "desk", **overrides) -> RunConfig:
    base = profile_defaults(profile)
    base.update(overrides)
    base["profile"] = profile
    return RunConfig(**base)
