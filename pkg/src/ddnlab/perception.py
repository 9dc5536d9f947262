"""Synthetic detector: k candidate detections per frame plus a global feature.

Each visible object yields one detection with its exact projected box, a
noisy object logit around 3, and a visual embedding drawn in the shared
text/vision space. Remaining slots are filled with clutter: random boxes,
logits around 0, and unstructured embeddings. The two logit distributions
overlap rarely but not never, so downstream models must discriminate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .demands import Universe, embed_instance_visual
from .worldcore import (BBox, GridScene, Pose, CELL_M, IMAGE_SIZE,
                        MIN_BBOX_UNITS, project_bbox, visible_objects)

REAL_LOGIT_MEAN = 3.0
CLUTTER_LOGIT_MEAN = 0.0
CLUTTER_EMBED_SCALE = 0.5
GLOBAL_FEATURE_DIM = 22
WALL_CLIP_M = 2.0


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    logit_background: float
    logit_object: float
    embedding: np.ndarray            # (object_dim,)
    source_instance: int | None      # None for clutter

    @property
    def is_real(self) -> bool:
        return self.source_instance is not None


@dataclass(frozen=True)
class Observation:
    detections: tuple[Detection, ...]   # exactly k, sorted by object logit desc
    global_feature: np.ndarray          # (22,)
    demand_id: int | None
    pose: Pose                          # snapshot for oracle checks only
    step_count: int
    step_limit: int


def wall_distances(scene: GridScene, x: float, y: float) -> np.ndarray:
    """Free distance from (x, y) to the nearest blocked cell face along the
    four cardinal directions (+x, +y, -x, -y), clipped at 2 m."""
    ix, iy = scene.cell_of(x, y)
    out = np.empty(4)
    for d, (sx, sy) in enumerate(((1, 0), (0, 1), (-1, 0), (0, -1))):
        cx, cy = ix, iy
        while not scene.is_blocked(cx + sx, cy + sy):
            cx += sx
            cy += sy
        if sx > 0:
            dist = (cx + 1) * CELL_M - x
        elif sx < 0:
            dist = x - cx * CELL_M
        elif sy > 0:
            dist = (cy + 1) * CELL_M - y
        else:
            dist = y - cy * CELL_M
        out[d] = min(max(dist, 0.0), WALL_CLIP_M)
    return out


def build_global_feature(detections: tuple[Detection, ...], scene: GridScene,
                         pose: Pose, step_count: int,
                         step_limit: int) -> np.ndarray:
    embeds = np.stack([d.embedding for d in detections])
    parts = [
        embeds.mean(axis=0),
        wall_distances(scene, pose.x, pose.y) / WALL_CLIP_M,
        np.array([pose.pitch / 30.0]),
        np.array([step_count / step_limit]),
    ]
    return np.concatenate(parts)


def _clutter_bbox(rng: np.random.Generator) -> BBox:
    cx = float(rng.uniform(0.0, IMAGE_SIZE))
    cy = float(rng.uniform(0.0, IMAGE_SIZE))
    w = float(rng.uniform(MIN_BBOX_UNITS, 60.0))
    return BBox(x_min=max(0.0, cx - w / 2), y_min=max(0.0, cy - w / 2),
                x_max=min(IMAGE_SIZE, cx + w / 2), y_max=min(IMAGE_SIZE, cy + w / 2))


def detect(scene: GridScene, pose: Pose, universe: Universe,
           rng: np.random.Generator, *, demand_id: int | None = None,
           k: int = 16, sigma_logit: float = 0.5, sigma_align: float = 0.1,
           step_count: int = 0, step_limit: int = 100) -> Observation:
    """One synthetic detector frame: real detections for every visible object
    (top-k by logit if there are more than k), clutter for the rest."""
    real = []
    for obj, _dist, _bear in visible_objects(scene, pose):
        logit = REAL_LOGIT_MEAN + sigma_logit * float(rng.standard_normal())
        embedding = embed_instance_visual(universe, obj.category_id, rng,
                                          sigma_align=sigma_align)
        real.append(Detection(bbox=project_bbox(obj, pose),
                              logit_background=-logit, logit_object=logit,
                              embedding=embedding,
                              source_instance=obj.instance_id))
    if len(real) > k:
        real.sort(key=lambda d: -d.logit_object)
        real = real[:k]

    real_boxes = {(d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max)
                  for d in real}
    clutter = []
    while len(real) + len(clutter) < k:
        bbox = _clutter_bbox(rng)
        if (bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max) in real_boxes:
            continue
        logit = CLUTTER_LOGIT_MEAN + sigma_logit * float(rng.standard_normal())
        embedding = CLUTTER_EMBED_SCALE * rng.standard_normal(
            universe.config.object_dim)
        clutter.append(Detection(bbox=bbox, logit_background=-logit,
                                 logit_object=logit, embedding=embedding,
                                 source_instance=None))

    detections = tuple(sorted(real + clutter, key=lambda d: -d.logit_object))
    global_feature = build_global_feature(detections, scene, pose,
                                          step_count, step_limit)
    return Observation(detections=detections, global_feature=global_feature,
                       demand_id=demand_id, pose=pose,
                       step_count=step_count, step_limit=step_limit)
