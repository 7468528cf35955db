"""Pipeline configuration with JSON round-tripping and default merging."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass


@dataclass
class ReconConfig:
    seed_count: int = 200
    samples_per_cell: int = 100
    gamma: float = 10.0
    delta: float = 1e-3
    knn: int = 20
    # None means 100 * seed_count
    dense_sample_count: int | None = None
    # None means 1.5 x median nearest-neighbour spacing of the dense samples
    eps_udf: float | None = None
    eps_grad: float = 0.8
    # junction witness rule for dual triangles: "neighbors" or "clique"
    junction_witness: str = "neighbors"
    max_outer_iters: int = 30
    max_lbfgs_iters: int = 100
    lbfgs_memory: int = 10
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    rank_threshold: float = 0.1
    halfspace_neighbor_count: int = 12
    # seeds closer than this fraction of the median spacing are merged after each snap
    merge_fraction: float = 0.1
    admm_max_iters: int = 200
    admm_tol: float = 1e-8
    projection_tol: float = 1e-9
    projection_max_steps: int = 20
    max_component_faces: int = 10
    # trim faces of three-sided tets after tet pruning
    trim_fins: bool = True
    rng_seed: int = 0
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        counts = ["seed_count", "samples_per_cell", "knn", "max_outer_iters", "max_lbfgs_iters",
                  "lbfgs_memory", "halfspace_neighbor_count", "admm_max_iters",
                  "projection_max_steps", "max_component_faces", "threads"]
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.dense_sample_count is not None and self.dense_sample_count < 1:
            raise ValueError("dense_sample_count must be >= 1")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if not self.delta > 0:
            raise ValueError("delta must be > 0")
        if not 0 < self.rank_threshold < 1:
            raise ValueError("rank_threshold must lie in (0, 1)")
        if not 0 <= self.merge_fraction < 1:
            raise ValueError("merge_fraction must lie in [0, 1)")
        if self.junction_witness not in ("neighbors", "clique"):
            raise ValueError("junction_witness must be 'neighbors' or 'clique'")
        if self.eps_udf is not None and not self.eps_udf > 0:
            raise ValueError("eps_udf must be > 0")

    @property
    def effective_dense_count(self) -> int:
        return self.dense_sample_count if self.dense_sample_count is not None else 100 * self.seed_count

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict, base: "ReconConfig | None" = None) -> "ReconConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        merged = (base or cls()).to_dict()
        merged.update(data)
        return cls(**merged)

    @classmethod
    def load(cls, path) -> "ReconConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **changes) -> "ReconConfig":
        return dataclasses.replace(self, **changes)
