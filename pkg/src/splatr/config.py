"""Pipeline configuration: one JSON document holding every tunable.

Each threshold used anywhere in the pipeline appears here exactly once,
with the default its home module documents, so an episode is fully
reproducible from (config, seed) and a saved config file is a complete
record of a run. Loading is strict: unknown keys are an error rather
than a silent typo.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

from .io import read_json, write_json
from .sim import DIFFICULTIES

MATCHERS = ("hungarian", "greedy")


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the walkthrough/unshuffle pipeline."""

    # episode definition
    seed: int = 0
    difficulty: str = "easy"
    shuffle_count: int = 3

    # exploration; step budgets mirror the 700/1200 benchmark limits,
    # map resolution matches the discrete agent's stride so traversed
    # cells are exactly the cells the agent can ever occupy
    walkthrough_step_budget: int = 700
    unshuffle_step_budget: int = 1200
    map_resolution: float = 0.25

    # splat training (iteration count is the synthetic-scale default;
    # the trainer's own module default targets full-scale scenes)
    sh_degree: int = 0
    voxel: float = 0.05
    train_iterations: int = 300
    ssim_weight: float = 0.2

    # change detection
    patch_size: int = 8
    tau_patch: float = 0.6
    min_patches: int = 2

    # object store
    tau_sim: float = 0.75
    delta: float = 0.5
    nn_dist_threshold: float = 0.05

    # matching
    matcher: str = "hungarian"

    # episode metrics
    eps_pos: float = 0.05
    eps_open: float = 0.05
    d_norm: float = 0.5

    def __post_init__(self) -> None:
        if self.difficulty not in DIFFICULTIES:
            raise ValueError(f"difficulty must be one of {DIFFICULTIES}")
        if self.matcher not in MATCHERS:
            raise ValueError(f"matcher must be one of {MATCHERS}")
        if self.shuffle_count < 0:
            raise ValueError("shuffle_count must be non-negative")
        for name in (
            "walkthrough_step_budget",
            "unshuffle_step_budget",
            "train_iterations",
            "patch_size",
            "min_patches",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in (
            "map_resolution",
            "voxel",
            "delta",
            "nn_dist_threshold",
            "eps_pos",
            "eps_open",
            "d_norm",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not -1.0 < self.tau_patch < 1.0:
            raise ValueError("tau_patch must lie in (-1, 1)")
        if not -1.0 <= self.tau_sim <= 1.0:
            raise ValueError("tau_sim must lie in [-1, 1]")
        if not 0.0 <= self.ssim_weight < 1.0:
            raise ValueError("ssim_weight must be in [0,1)")

    def with_overrides(self, **overrides) -> "PipelineConfig":
        """A copy with the given fields replaced (None values ignored)."""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def save_config(path, config: PipelineConfig) -> None:
    write_json(path, asdict(config))


def load_config(path) -> PipelineConfig:
    """Read a config document; unknown keys are an error, missing keys
    keep their defaults."""
    doc = read_json(path)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    known = {f.name for f in fields(PipelineConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ValueError(f"{path}: unknown config keys {unknown}")
    return PipelineConfig(**doc)
