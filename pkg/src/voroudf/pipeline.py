"""End-to-end reconstruction driver and its run manifest."""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .config import ReconConfig
from .errors import VoroUDFWarning
from .gvd import SurfaceGraph, build_gvd_mesh
from .mesh import TriangleMesh
from .seed_opt import OptimizationResult, optimize
from .thinning import ThinningReport, thin
from .udf import AnalyticField, UdfField, spec_with_bounds

log = logging.getLogger(__name__)


@dataclass
class RunManifest:
    """Everything needed to rerun and audit one reconstruction.

    ``timings`` holds wall-clock seconds per stage. They are kept out of
    :meth:`to_json` so that reruns produce byte-identical manifests; use
    :meth:`timings_json` for the separate sidecar.
    """

    config: dict
    inputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    version: str = __version__

    @property
    def flagged(self) -> bool:
        return bool(self.warnings)

    def validate(self):
        assert all(v >= 0 for v in self.timings.values()), "negative timing"
        fr = self.counters.get("faces_removed", 0)
        tp = self.counters.get("tets_pruned", 0)
        assert fr == 2 * tp, "faces_removed must be twice tets_pruned"

    def to_dict(self, include_timings: bool = False) -> dict:
        d = {"version": self.version, "config": self.config, "inputs": self.inputs,
             "counters": self.counters, "warnings": self.warnings}
        if include_timings:
            d["timings"] = self.timings
        return d

    def to_json(self, include_timings: bool = False) -> str:
        return json.dumps(self.to_dict(include_timings), indent=2, sort_keys=True) + "\n"

    def timings_json(self) -> str:
        return json.dumps(self.timings, indent=2, sort_keys=True) + "\n"


@dataclass
class Reconstruction:
    mesh: TriangleMesh
    raw_mesh: TriangleMesh
    manifest: RunManifest
    optimization: OptimizationResult
    graph: SurfaceGraph
    thinning: ThinningReport


def _record(caught, sink):
    for w in caught:
        if issubclass(w.category, VoroUDFWarning):
            sink.append({"category": w.category.__name__, "message": str(w.message)})
        else:
            warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)


def reconstruct(field: UdfField, config: ReconConfig, inputs: dict | None = None,
                initial_seeds=None) -> Reconstruction:
    """Optimize seeds, extract the geodesic dual and thin it.

    Pipeline warnings are caught and recorded in the manifest rather than
    propagated; any recorded warning marks the run as flagged.
    """
    config.validate()
    rng = np.random.default_rng(config.rng_seed)
    man = RunManifest(config=config.to_dict(), inputs=dict(inputs or {}))
    if isinstance(field, AnalyticField):
        man.inputs.setdefault("field", spec_with_bounds(field))
    else:
        man.inputs.setdefault("field", {"type": type(field).__name__,
                                        "bounds": [np.asarray(b).tolist() for b in field.bounds]})

    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        opt = optimize(field, config, rng, initial=initial_seeds)
    _record(caught, man.warnings)
    man.timings["seed_opt"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        raw, graph = build_gvd_mesh(field, opt.positions, config.effective_dense_count, rng, config.knn,
                                    config.eps_udf, config.eps_grad, config.projection_tol,
                                    config.projection_max_steps, config.junction_witness)
    _record(caught, man.warnings)
    man.timings["gvd"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    rep = ThinningReport()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        mesh = thin(raw, field, config.max_component_faces, report=rep, fins=config.trim_fins)
    _record(caught, man.warnings)
    man.timings["thinning"] = time.perf_counter() - t0

    c = man.counters
    c["seeds"] = int(len(opt.positions))
    c["outer_iterations"] = int(opt.outer_iterations)
    c["inner_iterations"] = [int(i) for i in opt.inner_iterations]
    c["optimization_converged"] = bool(opt.converged)
    c.update({k: int(v) for k, v in opt.counters.items()})
    c["samples"] = int(graph.n_samples)
    c.update({f"graph_{k}": v for k, v in graph.counters.items()})
    c["raw_faces"] = int(raw.n_faces)
    c.update({k: v for k, v in rep.to_dict().items()})
    c["faces"] = int(mesh.n_faces)
    c["vertices"] = int(mesh.n_vertices)
    man.validate()
    for w in man.warnings:
        log.warning("%s: %s", w["category"], w["message"])
    return Reconstruction(mesh, raw, man, opt, graph, rep)
