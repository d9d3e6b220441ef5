"""Deterministic synthetic driving-maneuver generator.

Five maneuver archetypes (emergency braking, stopping for a traffic sign,
merging, overtaking, giving way) each define a 10-waypoint template in the
ego frame (forward = +x, meters) and a pseudo-feature embedding center.
Tasks draw templates plus independent Gaussian jitter, giving desk-scale
streams with exact ground-truth labels for clustering and decoding tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

N_WAYPOINTS = 10
DEFAULT_FEATURE_DIM = 16

# data volume per sequential task, shrinking over the curriculum
DEFAULT_VOLUME_PROFILE = (184, 146, 92, 78, 11)
MIN_TASK_COUNT = 20


@dataclass(frozen=True)
class ManeuverArchetype:
    """A maneuver template plus its pseudo-feature embedding."""

    name: str
    template: np.ndarray          # (10, 2) waypoints, meters, ego frame
    feature_center: np.ndarray    # (d,) embedding center
    waypoint_noise_sigma: float = 0.1
    feature_noise_sigma: float = 0.5

    def __post_init__(self):
        t = np.asarray(self.template, dtype=float)
        object.__setattr__(self, "template", t)
        object.__setattr__(self, "feature_center",
                           np.asarray(self.feature_center, dtype=float))
        if t.shape != (N_WAYPOINTS, 2):
            raise ValueError(f"template must be ({N_WAYPOINTS}, 2)")
        if not np.all(np.isfinite(t)):
            raise ValueError("template must be finite")
        if self.waypoint_noise_sigma < 0 or self.feature_noise_sigma < 0:
            raise ValueError("noise sigmas must be nonnegative")


@dataclass(frozen=True)
class TaskSpec:
    """One sequential task: a mixture of archetypes with sample counts."""

    task_id: int
    archetypes: tuple  # of (ManeuverArchetype, count)
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "archetypes", tuple(self.archetypes))
        if not self.archetypes:
            raise ValueError("task needs at least one archetype")
        if any(count < 1 for _, count in self.archetypes):
            raise ValueError("archetype counts must be >= 1")


def _waypoints(x, y) -> np.ndarray:
    return np.column_stack([np.asarray(x, dtype=float),
                            np.asarray(y, dtype=float)])


def _feature_center(index: int, dim: int) -> np.ndarray:
    """Well-separated archetype embedding, deterministic per (index, dim)."""
    rng = np.random.default_rng(97 + index)
    center = rng.normal(size=dim)
    return 8.0 * center / np.linalg.norm(center)


def default_archetypes(feature_dim: int = DEFAULT_FEATURE_DIM,
                       waypoint_noise_sigma: float = 0.1,
                       feature_noise_sigma: float = 0.5
                       ) -> tuple[ManeuverArchetype, ...]:
    """The five stock maneuvers, in curriculum order."""
    t = np.arange(N_WAYPOINTS, dtype=float)
    zeros = np.zeros(N_WAYPOINTS)

    # hard deceleration: forward spacing compresses quadratically to a stop
    brake_x = 20.0 * (1.0 - (1.0 - t / 9.0) ** 2)
    # smooth stop at a sign: gentler compression, longer approach
    sign_x = 30.0 * np.sin(0.5 * np.pi * t / 9.0)
    # lane merge: steady forward progress with a 3.5 m lateral S-curve
    merge_x = 3.0 * t
    merge_y = 3.5 * 0.5 * (1.0 - np.cos(np.pi * t / 9.0))
    # overtake: fast progress, pull out and back (half lateral excursion each way)
    over_x = 4.0 * t
    over_y = 3.5 * np.sin(np.pi * t / 9.0)
    # give way: crawl forward while yielding
    give_x = 0.8 * t

    specs = [
        ("emergency_brake", _waypoints(brake_x, zeros)),
        ("traffic_sign_stop", _waypoints(sign_x, zeros)),
        ("merge", _waypoints(merge_x, merge_y)),
        ("overtake", _waypoints(over_x, over_y)),
        ("give_way", _waypoints(give_x, zeros)),
    ]
    return tuple(
        ManeuverArchetype(name=name, template=template,
                          feature_center=_feature_center(i, feature_dim),
                          waypoint_noise_sigma=waypoint_noise_sigma,
                          feature_noise_sigma=feature_noise_sigma)
        for i, (name, template) in enumerate(specs))


def generate_task(spec: TaskSpec):
    """Draw the task's samples: (trajectories (n, 20), features (n, d),
    labels (n,) archetype indices within the spec)."""
    rng = np.random.default_rng(spec.seed)
    trajs, feats, labels = [], [], []
    for idx, (arch, count) in enumerate(spec.archetypes):
        flat = arch.template.reshape(-1)
        trajs.append(flat + rng.normal(scale=arch.waypoint_noise_sigma,
                                       size=(count, flat.size))
                     if arch.waypoint_noise_sigma > 0
                     else np.tile(flat, (count, 1)))
        feats.append(arch.feature_center
                     + rng.normal(scale=arch.feature_noise_sigma,
                                  size=(count, arch.feature_center.size))
                     if arch.feature_noise_sigma > 0
                     else np.tile(arch.feature_center, (count, 1)))
        labels.append(np.full(count, idx, dtype=int))
    return (np.vstack(trajs), np.vstack(feats), np.concatenate(labels))


def make_default_curriculum(volume_profile=DEFAULT_VOLUME_PROFILE,
                            feature_dim: int = DEFAULT_FEATURE_DIM,
                            seed: int = 0, reverse: bool = False,
                            min_count: int = MIN_TASK_COUNT
                            ) -> list[TaskSpec]:
    """One task per archetype, in curriculum order, with sample counts
    proportional to the volume profile (floored at min_count)."""
    archs = default_archetypes(feature_dim=feature_dim)
    if len(volume_profile) > len(archs):
        raise ValueError(f"volume profile longer than the {len(archs)} "
                         "stock archetypes")
    pairs = list(zip(archs, volume_profile))
    if reverse:
        pairs = pairs[::-1]
    return [TaskSpec(task_id=t + 1, archetypes=((arch, max(int(v), min_count)),),
                     seed=seed * 1000 + t)
            for t, (arch, v) in enumerate(pairs)]


def emit_jsonl(specs, destination) -> int:
    """Write every sample of the tasks as one JSON object per line:
    {task_id, label, trajectory[20], feature[d]}.  Returns the line count."""
    n = 0
    with open(destination, "w") as fh:
        for spec in specs:
            trajs, feats, labels = generate_task(spec)
            names = [arch.name for arch, _ in spec.archetypes]
            for traj, feat, lab in zip(trajs, feats, labels):
                fh.write(json.dumps({
                    "task_id": spec.task_id,
                    "label": names[int(lab)],
                    "trajectory": traj.tolist(),
                    "feature": feat.tolist(),
                }) + "\n")
                n += 1
    return n
