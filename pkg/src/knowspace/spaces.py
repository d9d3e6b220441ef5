"""Dual dynamic knowledge spaces with anchor extraction and persistence.

A knowledge space is a labeled mixture posterior (feature space over fused
embeddings, trajectory space over flattened waypoint sequences) together with
its batch caches.  Component posterior means are exported as knowledge
anchors; spaces persist losslessly to a human-diffable JSON snapshot.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import BatchCache, FitReport, InferenceConfig, fit_stream
from .mixture import MixtureState, NIGHyper, SuffStats

SNAPSHOT_SCHEMA_VERSION = 1
_LABELS = ("feature", "trajectory")


@dataclass
class KnowledgeSpace:
    """A labeled mixture posterior plus its memoized batch caches.

    When `standardize` is set, incoming batches are shifted and scaled by the
    moments of the very first batch; anchors are always reported in the
    original input units.
    """

    label: str
    state: MixtureState
    caches: dict = field(default_factory=dict)
    anchor_weight_floor: float = 0.0
    standardize: bool = False
    norm_mean: np.ndarray | None = None
    norm_scale: np.ndarray | None = None
    auto_hyper: bool = False

    def __post_init__(self):
        if self.label not in _LABELS:
            raise ValueError(f"label must be one of {_LABELS}")
        if self.label == "trajectory" and self.state.dim % 2 != 0:
            raise ValueError("trajectory spaces need an even dim (waypoint pairs)")
        if self.anchor_weight_floor < 0:
            raise ValueError("anchor_weight_floor must be nonnegative")

    @property
    def dim(self) -> int:
        return self.state.dim


@dataclass(frozen=True)
class AnchorSet:
    """Posterior means of the qualifying components, in creation order."""

    anchors: np.ndarray        # (K_active, dim)
    weights: np.ndarray        # (K_active,), normalized
    created_task: np.ndarray   # (K_active,) int


@dataclass(frozen=True)
class DriftEntry:
    """Displacement of one anchor between two extractions."""

    created_task: int
    distance: float | None
    removed: bool


def make_space(label: str, dim: int, hyper: NIGHyper | None = None,
               anchor_weight_floor: float = 0.0,
               standardize: bool = False) -> KnowledgeSpace:
    """Empty knowledge space awaiting its first update."""
    if dim < 1:
        raise ValueError("dim must be positive")
    auto_hyper = hyper is None
    if auto_hyper:
        # placeholder; replaced by data-scaled moments at the first update
        hyper = NIGHyper(m0=np.zeros(dim), kappa0=1.0, a0=1.0,
                         b0=np.ones(dim), alpha=1.0)
    if hyper.dim != dim:
        raise ValueError("hyper dimension does not match dim")
    return KnowledgeSpace(label=label, state=MixtureState(hyper),
                          anchor_weight_floor=anchor_weight_floor,
                          standardize=standardize, auto_hyper=auto_hyper)


def _transform(space: KnowledgeSpace, batch: np.ndarray) -> np.ndarray:
    if not space.standardize:
        return batch
    return (batch - space.norm_mean) / space.norm_scale


def update_space(space: KnowledgeSpace, batches, config: InferenceConfig,
                 task_id: int) -> tuple[KnowledgeSpace, FitReport]:
    """Stream the batches into the space's posterior via the memoized engine."""
    items = []
    for i, entry in enumerate(batches):
        if isinstance(entry, tuple):
            bid, arr = entry
        else:
            bid, arr = f"t{task_id}/b{i}", entry
        items.append((str(bid), np.atleast_2d(np.asarray(arr, dtype=float))))
    if not items:
        raise ValueError("empty stream")

    norm_mean, norm_scale = space.norm_mean, space.norm_scale
    if space.standardize and norm_mean is None:
        first = items[0][1]
        norm_mean = first.mean(axis=0)
        norm_scale = np.maximum(first.std(axis=0), 1e-6)
    work = space if norm_mean is space.norm_mean else dataclasses.replace(
        space, norm_mean=norm_mean, norm_scale=norm_scale)

    stream = [(bid, _transform(work, arr)) for bid, arr in items]
    if work.auto_hyper and work.state.n_components == 0:
        # weak mean prior (small kappa0): new clusters may appear arbitrarily
        # far from the first task without paying a quadratic prior penalty
        hyper = NIGHyper.from_data(stream[0][1], kappa0=1e-3,
                                   alpha=work.state.hyper.alpha)
        work = dataclasses.replace(work, state=MixtureState(hyper),
                                   auto_hyper=False)
    state, caches, report = fit_stream(work.state, work.caches, stream,
                                       config, task_id)
    return dataclasses.replace(work, state=state, caches=caches), report


def extract_anchors(space: KnowledgeSpace) -> AnchorSet:
    """Qualifying component means with normalized expected stick weights."""
    state = space.state
    if state.n_components == 0:
        raise ValueError("no components: update the space before extracting anchors")
    weights = state.expected_weights()
    keep = np.flatnonzero(weights >= space.anchor_weight_floor)
    anchors = state.m[keep]
    if space.standardize and space.norm_mean is not None:
        anchors = anchors * space.norm_scale + space.norm_mean
    w = weights[keep]
    total = w.sum()
    if total > 0:
        w = w / total
    return AnchorSet(anchors=anchors, weights=w,
                     created_task=state.created_task[keep].copy())


def anchor_drift(before: AnchorSet, after: AnchorSet) -> list[DriftEntry]:
    """Per-anchor Euclidean displacement, matched by provenance.

    Anchors are paired by created_task, in creation order within each task;
    before-anchors with no surviving counterpart are reported as removed.
    """
    pools: dict[int, list[np.ndarray]] = {}
    for task, row in zip(after.created_task, after.anchors):
        pools.setdefault(int(task), []).append(row)
    entries = []
    for task, row in zip(before.created_task, before.anchors):
        pool = pools.get(int(task))
        if pool:
            entries.append(DriftEntry(int(task),
                                      float(np.linalg.norm(row - pool.pop(0))),
                                      False))
        else:
            entries.append(DriftEntry(int(task), None, True))
    return entries


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _vec(x) -> list:
    return np.asarray(x, dtype=float).tolist()


def save_snapshot(space: KnowledgeSpace, destination) -> dict:
    """Write the space to a JSON snapshot and return the document.

    Floats are serialized with Python's shortest round-trip representation
    (at most 17 significant digits), so loading reproduces every posterior
    parameter bitwise.
    """
    state = space.state
    h = state.hyper
    doc = {
        "schema_version": SNAPSHOT_SCHEMA_VERSION,
        "label": space.label,
        "dim": state.dim,
        "anchor_weight_floor": space.anchor_weight_floor,
        "standardize": space.standardize,
        "auto_hyper": space.auto_hyper,
        "norm_mean": None if space.norm_mean is None else _vec(space.norm_mean),
        "norm_scale": None if space.norm_scale is None else _vec(space.norm_scale),
        "hyper": {"m0": _vec(h.m0), "kappa0": h.kappa0, "a0": h.a0,
                  "b0": _vec(h.b0), "alpha": h.alpha},
        "components": [
            {"m": _vec(state.m[k]), "kappa": float(state.kappa[k]),
             "a": float(state.a[k]), "b": _vec(state.b[k]),
             "soft_count": float(state.soft_count[k]),
             "created_task": int(state.created_task[k])}
            for k in range(state.n_components)
        ],
        "sticks": [
            {"eta1": float(state.eta1[k]), "eta0": float(state.eta0[k])}
            for k in range(state.n_components)
        ],
        "caches": [
            {"batch_id": bid,
             "count": _vec(c.stats.count),
             "sum": [_vec(row) for row in c.stats.sum],
             "sumsq": [_vec(row) for row in c.stats.sumsq],
             "resp_entropy": float(c.resp_entropy)}
            for bid, c in sorted(space.caches.items())
        ],
    }
    Path(destination).write_text(json.dumps(doc, indent=1))
    return doc


def load_snapshot(source) -> KnowledgeSpace:
    """Rebuild a knowledge space from a snapshot written by save_snapshot."""
    try:
        doc = json.loads(Path(source).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed snapshot document: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValueError("malformed snapshot document: not an object")
    for section in ("schema_version", "label", "dim", "hyper",
                    "components", "sticks", "caches"):
        if section not in doc:
            raise ValueError(f"snapshot missing section '{section}'")
    if doc["schema_version"] != SNAPSHOT_SCHEMA_VERSION:
        raise ValueError(
            f"unsupported schema_version {doc['schema_version']}; "
            f"expected {SNAPSHOT_SCHEMA_VERSION}")
    if len(doc["components"]) != len(doc["sticks"]):
        raise ValueError("components and sticks sections disagree in length")

    h = doc["hyper"]
    hyper = NIGHyper(m0=np.asarray(h["m0"], dtype=float), kappa0=h["kappa0"],
                     a0=h["a0"], b0=np.asarray(h["b0"], dtype=float),
                     alpha=h["alpha"])
    comps, sticks = doc["components"], doc["sticks"]
    dim = int(doc["dim"])
    K = len(comps)
    state = MixtureState(
        hyper,
        m=np.array([c["m"] for c in comps], dtype=float).reshape(K, dim),
        kappa=np.array([c["kappa"] for c in comps], dtype=float),
        a=np.array([c["a"] for c in comps], dtype=float),
        b=np.array([c["b"] for c in comps], dtype=float).reshape(K, dim),
        soft_count=np.array([c["soft_count"] for c in comps], dtype=float),
        created_task=np.array([c["created_task"] for c in comps], dtype=int),
        eta1=np.array([s["eta1"] for s in sticks], dtype=float),
        eta0=np.array([s["eta0"] for s in sticks], dtype=float),
    )
    caches = {}
    for entry in doc["caches"]:
        stats = SuffStats(np.asarray(entry["count"], dtype=float),
                          np.asarray(entry["sum"], dtype=float),
                          np.asarray(entry["sumsq"], dtype=float))
        caches[entry["batch_id"]] = BatchCache(entry["batch_id"], stats,
                                               entry["resp_entropy"])
    norm_mean = doc.get("norm_mean")
    norm_scale = doc.get("norm_scale")
    return KnowledgeSpace(
        label=doc["label"], state=state, caches=caches,
        anchor_weight_floor=doc.get("anchor_weight_floor", 0.0),
        standardize=doc.get("standardize", False),
        auto_hyper=doc.get("auto_hyper", False),
        norm_mean=None if norm_mean is None else np.asarray(norm_mean, dtype=float),
        norm_scale=None if norm_scale is None else np.asarray(norm_scale, dtype=float),
    )
