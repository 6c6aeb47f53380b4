"""Dimension presets, space-set naming, and run configuration."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

SPACE_GLOBAL = "global"
SPACE_SEQUENTIAL = "sequential"
SPACE_ACTION = "action"

# Variant names follow the single / dual-S / dual-I / triple convention so
# ablation runs read like the usual results tables.
SPACE_SETS: dict[str, tuple[str, ...]] = {
    "single": (SPACE_GLOBAL,),
    "dual-S": (SPACE_GLOBAL, SPACE_SEQUENTIAL),
    "dual-I": (SPACE_GLOBAL, SPACE_ACTION),
    "triple": (SPACE_GLOBAL, SPACE_SEQUENTIAL, SPACE_ACTION),
}

FUSE_MODES = ("weighted", "average")


@dataclass(frozen=True)
class Dims:
    """Every architectural dimension, all configurable.

    Defaults are the production-scale values; ``small()`` is the test
    preset used throughout the suite and by the gradcheck command.
    """

    n_chunks: int = 20      # frames sampled per video
    grid: int = 7           # spatial grid side G
    c_global: int = 2048    # per-frame appearance feature width
    c_spatial: int = 2048   # grid cell channels
    c_action: int = 1024    # action vector width
    hidden: int = 512       # GRU/LSTM hidden size H
    embed_dim: int = 512    # joint space size D
    token_dim: int = 300    # token vector width E
    attn_dim: int = 512     # attention intermediate size (p, q)

    def __post_init__(self):
        for name, value in dataclasses.asdict(self).items():
            if value < 1:
                raise ValueError(f"Dims.{name} must be positive, got {value}")
        # the sequential head emits its LSTM hidden state directly
        if self.embed_dim != self.hidden:
            raise ValueError(
                f"sequential head requires embed_dim == hidden, got {self.embed_dim} != {self.hidden}"
            )

    @property
    def grid_cells(self) -> int:
        return self.grid * self.grid

    @property
    def grid_flat(self) -> int:
        return self.grid * self.grid * self.c_spatial

    @staticmethod
    def small() -> "Dims":
        return Dims(
            n_chunks=4, grid=2, c_global=32, c_spatial=32, c_action=16,
            hidden=16, embed_dim=16, token_dim=8, attn_dim=16,
        )


PRESETS = {"paper": Dims(), "small": Dims.small()}


def resolve_spaces(name: str) -> tuple[str, ...]:
    try:
        return SPACE_SETS[name]
    except KeyError:
        raise ValueError(f"unknown space set {name!r}; choose from {sorted(SPACE_SETS)}") from None


def space_set_name(spaces: tuple[str, ...]) -> str:
    for name, members in SPACE_SETS.items():
        if members == tuple(spaces):
            return name
    return "+".join(spaces)


@dataclass
class TripletConfig:
    """Training hyperparameters.

    The margin default of 0.2 and the plain-SGD settings are artifact
    choices (conventional for cosine-similarity triplet training), not
    claims from any experiment.
    """

    margin: float = 0.2
    negative_mode: str = "hardest"  # or "sum-all"
    learning_rate: float = 0.05
    epochs: int = 30
    batch_size: int = 8
    rng_seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if self.negative_mode not in ("sum-all", "hardest"):
            raise ValueError(f"negative_mode must be 'sum-all' or 'hardest', got {self.negative_mode!r}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2 (a batch needs a negative), got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")


@dataclass
class RunConfig:
    """Everything a CLI command needs; file values overridden by flags."""

    preset: str = "small"
    spaces: str = "single"
    fuse_mode: str = "weighted"
    seed: int = 0
    margin: float = 0.2
    negative_mode: str = "hardest"
    lr: float = 0.05
    epochs: int = 30
    batch_size: int = 8
    k: tuple[int, ...] = (1, 5, 10)
    out_dir: str = "out"
    data: str | None = None
    manifest: str | None = None
    checkpoint: str | None = None
    # synthesis knobs
    videos: int = 200
    sentences_per_video: int = 2
    rho: tuple[float, float, float] = (1.0, 0.0, 0.0)
    sigma: float = 0.05
    latent_total: int = 12
    sentence_mode: str = "full"
    train_fraction: float = 0.75

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        resolve_spaces(self.spaces)
        if self.fuse_mode not in FUSE_MODES:
            raise ValueError(f"unknown fuse mode {self.fuse_mode!r}; choose from {FUSE_MODES}")
        if any(x < 1 for x in self.k):
            raise ValueError(f"k values must be >= 1, got {self.k}")
        # delegates the rest
        self.triplet()

    def dims(self) -> Dims:
        return PRESETS[self.preset]

    def triplet(self) -> TripletConfig:
        return TripletConfig(
            margin=self.margin,
            negative_mode=self.negative_mode,
            learning_rate=self.lr,
            epochs=self.epochs,
            batch_size=self.batch_size,
            rng_seed=self.seed,
        )


_TUPLE_FIELDS = {"k": int, "rho": float}


def load_run_config(path: str | Path | None, overrides: dict) -> RunConfig:
    """Build a RunConfig from an optional JSON file plus flag overrides."""
    values: dict = {}
    if path is not None:
        raw = json.loads(Path(path).read_text())
        if not isinstance(raw, dict):
            raise ValueError(f"config file {path} must contain a JSON object")
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"config file {path} has unknown keys: {sorted(unknown)}")
        values.update(raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    for name, cast in _TUPLE_FIELDS.items():
        if name in values:
            values[name] = tuple(cast(x) for x in values[name])
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg
