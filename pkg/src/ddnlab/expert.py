"""Expert planning and demonstration collection.

The planner works on a cardinal lattice: cells of the occupancy grid, four
headings (0/90/180/270) and three pitches. MoveAhead advances one cell, a
90-degree turn expands to three 30-degree rotations and costs 3 actions,
pitch moves cost 1. Plans minimize action count, then rotation count, with a
deterministic alphabetical expansion order for stable replay.
"""

from __future__ import annotations

import heapq
import json
import math
import zlib
from dataclasses import dataclass

import numpy as np

from .demands import Universe, WGMapping, satisfies
from .errors import NoPath, NoSatisfier
from .perception import Observation, Detection, detect
from .worldcore import (Action, BBox, CELL_M, EpisodeState, FOV_HALF_DEG,
                        GridScene, PITCH_TO_BAND, Pose, VISIBILITY_RANGE_M,
                        cell_center, line_of_sight, step)

CARDINAL_HEADINGS = (0, 90, 180, 270)
PITCH_VALUES = (-30, 0, 30)
_STEP_WEIGHT = 10 ** 6  # lexicographic (steps, rotations) as one scalar cost


@dataclass(frozen=True)
class PlanState:
    ix: int
    iy: int
    heading_idx: int  # index into CARDINAL_HEADINGS
    pitch_idx: int    # index into PITCH_VALUES

    def pose(self) -> Pose:
        x, y = cell_center(self.ix, self.iy)
        return Pose(x=x, y=y, heading=CARDINAL_HEADINGS[self.heading_idx],
                    pitch=PITCH_VALUES[self.pitch_idx])


def snap_to_lattice(pose: Pose) -> PlanState:
    ix = int(math.floor(pose.x / CELL_M))
    iy = int(math.floor(pose.y / CELL_M))
    cx, cy = cell_center(ix, iy)
    if abs(cx - pose.x) > 1e-9 or abs(cy - pose.y) > 1e-9:
        raise ValueError(f"pose ({pose.x}, {pose.y}) is not on a cell center")
    if pose.heading not in CARDINAL_HEADINGS:
        raise ValueError(f"heading {pose.heading} is not cardinal")
    return PlanState(ix=ix, iy=iy,
                     heading_idx=CARDINAL_HEADINGS.index(pose.heading),
                     pitch_idx=PITCH_VALUES.index(pose.pitch))


# ---------------------------------------------------------------------------
# Per-scene visibility tables

class VisibilityIndex:
    """Vectorized view predicates for every (free cell, object) pair."""

    def __init__(self, scene: GridScene):
        self.scene = scene
        self.free_cells = scene.free_cells()
        self.cell_index = {c: i for i, c in enumerate(self.free_cells)}
        n, m = len(self.free_cells), len(scene.objects)
        self.dist = np.zeros((n, m))
        self.angle = np.zeros((n, m))   # world-frame angle to object, degrees
        self.los = np.zeros((n, m), dtype=bool)
        self.band_idx = np.array(
            [("low", "mid", "high").index(o.band) for o in scene.objects], dtype=int)
        self.category = np.array([o.category_id for o in scene.objects], dtype=int)
        for i, (ix, iy) in enumerate(self.free_cells):
            x, y = cell_center(ix, iy)
            for j, obj in enumerate(scene.objects):
                self.dist[i, j] = math.hypot(obj.x - x, obj.y - y)
                self.angle[i, j] = math.degrees(math.atan2(obj.y - y, obj.x - x))
                self.los[i, j] = line_of_sight(scene, x, y, obj.x, obj.y)

    def view_mask(self, heading: int, pitch: int) -> np.ndarray:
        """(n_cells, n_objects) bool: object visible from the cell under the
        given heading and pitch (range, FOV, band, line of sight)."""
        rel = (self.angle - heading + 180.0) % 360.0 - 180.0
        in_fov = np.abs(rel) <= FOV_HALF_DEG
        band_ok = self.band_idx[None, :] == ("low", "mid", "high").index(
            PITCH_TO_BAND[pitch])
        return (self.dist <= VISIBILITY_RANGE_M) & in_fov & band_ok & self.los


def visibility_index(scene: GridScene) -> VisibilityIndex:
    index = getattr(scene, "_vis_index", None)
    if index is None:
        index = VisibilityIndex(scene)
        scene._vis_index = index
    return index


def _satisfying_instances(scene: GridScene, universe: Universe,
                          demand_id: int) -> list[int]:
    return [o.instance_id for o in scene.objects
            if satisfies(universe, demand_id, o.category_id)]


def success_states(scene: GridScene, universe: Universe, demand_id: int,
                   margin: float = 1.0,
                   instances: list[int] | None = None) -> frozenset[PlanState]:
    """All lattice states from which a target object is visible within the
    planning margin. Raises NoSatisfier when the scene holds no satisfying
    object at all; an unreachable satisfier yields an empty set."""
    cache = getattr(scene, "_success_cache", None)
    if cache is None:
        cache = {}
        scene._success_cache = cache
    key = (demand_id, tuple(sorted(instances)) if instances is not None else None,
           round(margin, 9))
    if key in cache:
        return cache[key]

    sats = _satisfying_instances(scene, universe, demand_id)
    if not sats:
        raise NoSatisfier(f"no object in {scene.scene_id} satisfies demand {demand_id}")
    targets = sats if instances is None else [i for i in sats if i in set(instances)]
    if not targets:
        raise NoSatisfier("requested instances do not satisfy the demand")

    index = visibility_index(scene)
    target_cols = [j for j, o in enumerate(scene.objects)
                   if o.instance_id in set(targets)]
    near = index.dist[:, target_cols] < margin
    states = set()
    for h_idx, heading in enumerate(CARDINAL_HEADINGS):
        for p_idx, pitch in enumerate(PITCH_VALUES):
            mask = index.view_mask(heading, pitch)[:, target_cols] & near
            for cell_i in np.nonzero(mask.any(axis=1))[0].tolist():
                ix, iy = index.free_cells[cell_i]
                states.add(PlanState(ix=ix, iy=iy, heading_idx=h_idx,
                                     pitch_idx=p_idx))
    result = frozenset(states)
    cache[key] = result
    return result


def success_cells(scene: GridScene, universe: Universe, demand_id: int,
                  margin: float = 1.0) -> frozenset[tuple[int, int]]:
    return frozenset((s.ix, s.iy)
                     for s in success_states(scene, universe, demand_id, margin))


# ---------------------------------------------------------------------------
# Planning

def _neighbors(scene: GridScene, state: PlanState):
    """Successors in alphabetical action order; yields (state, actions, steps, rots)."""
    # LookDown
    if state.pitch_idx > 0:
        yield (PlanState(state.ix, state.iy, state.heading_idx, state.pitch_idx - 1),
               [Action.LookDown], 1, 0)
    # LookUp
    if state.pitch_idx < len(PITCH_VALUES) - 1:
        yield (PlanState(state.ix, state.iy, state.heading_idx, state.pitch_idx + 1),
               [Action.LookUp], 1, 0)
    # MoveAhead
    heading = CARDINAL_HEADINGS[state.heading_idx]
    dx, dy = {0: (1, 0), 90: (0, 1), 180: (-1, 0), 270: (0, -1)}[heading]
    if not scene.is_blocked(state.ix + dx, state.iy + dy):
        yield (PlanState(state.ix + dx, state.iy + dy, state.heading_idx,
                         state.pitch_idx), [Action.MoveAhead], 1, 0)
    # RotateLeft (-90 deg as three 30-deg rotations)
    yield (PlanState(state.ix, state.iy, (state.heading_idx - 1) % 4,
                     state.pitch_idx), [Action.RotateLeft] * 3, 3, 3)
    # RotateRight
    yield (PlanState(state.ix, state.iy, (state.heading_idx + 1) % 4,
                     state.pitch_idx), [Action.RotateRight] * 3, 3, 3)


def plan(scene: GridScene, start: Pose,
         goal_states: frozenset[PlanState] | set[PlanState]) -> list[Action]:
    """A* over the lattice graph; returns the primitive action list (no Done).

    Optimal in action count; among equal-cost plans the one with fewer
    rotations wins, with a deterministic alphabetical tie-break beyond that.
    """
    if not goal_states:
        raise NoPath("empty goal set")
    start_state = snap_to_lattice(start)
    goal_cells = {(g.ix, g.iy) for g in goal_states}
    goals = frozenset(goal_states)

    def h(s: PlanState) -> int:
        return min(abs(s.ix - gx) + abs(s.iy - gy) for gx, gy in goal_cells)

    best: dict[PlanState, int] = {start_state: 0}
    parent: dict[PlanState, tuple[PlanState, list[Action]]] = {}
    counter = 0
    frontier = [(h(start_state) * _STEP_WEIGHT, counter, start_state)]
    settled: set[PlanState] = set()
    while frontier:
        _f, _c, state = heapq.heappop(frontier)
        if state in settled:
            continue
        settled.add(state)
        if state in goals:
            actions: list[Action] = []
            node = state
            while node != start_state:
                node, acts = parent[node][0], parent[node][1]
                actions = acts + actions
            return actions
        g = best[state]
        for nxt, acts, steps, rots in _neighbors(scene, state):
            if nxt in settled:
                continue
            cand = g + steps * _STEP_WEIGHT + rots
            if cand < best.get(nxt, math.inf):
                best[nxt] = cand
                parent[nxt] = (state, acts)
                counter += 1
                heapq.heappush(frontier, (cand + h(nxt) * _STEP_WEIGHT, counter, nxt))
    raise NoPath("goal set unreachable from start")


def shortest_translation(scene: GridScene, universe: Universe, demand_id: int,
                         start: Pose, margin: float = 1.0) -> float:
    """Minimum MoveAhead distance (meters) to reach any success cell.

    Rotations and pitch moves are free here, so this is a plain 4-connected
    BFS over cells.
    """
    goals = success_cells(scene, universe, demand_id, margin)
    if not goals:
        raise NoPath("no reachable success cell")
    start_cell = scene.cell_of(start.x, start.y)
    if start_cell in goals:
        return 0.0
    from collections import deque
    dist = {start_cell: 0}
    queue = deque([start_cell])
    while queue:
        cx, cy = queue.popleft()
        for nx, ny in ((cx + 1, cy), (cx - 1, cy), (cx, cy + 1), (cx, cy - 1)):
            if scene.is_blocked(nx, ny) or (nx, ny) in dist:
                continue
            dist[(nx, ny)] = dist[(cx, cy)] + 1
            if (nx, ny) in goals:
                return dist[(nx, ny)] * CELL_M
            queue.append((nx, ny))
    raise NoPath("no reachable success cell")


# ---------------------------------------------------------------------------
# Trajectory collection

@dataclass
class Trajectory:
    scene_id: str
    demand_id: int
    start: Pose
    actions: list[Action]            # ends with Done
    observations: list[Observation]  # one per action
    target_instance: int
    translation_m: float
    rng_key: tuple[int, ...]         # entropy used for start/target/detector draws


def trajectory_rngs(rng_key: tuple[int, ...]) -> tuple[np.random.Generator,
                                                       np.random.Generator]:
    """(setup rng, observation rng) for a trajectory's stored key."""
    children = np.random.SeedSequence(rng_key).spawn(2)
    return np.random.default_rng(children[0]), np.random.default_rng(children[1])


def sample_start_pose(scene: GridScene, rng: np.random.Generator) -> Pose:
    """Uniform lattice start: free cell center, cardinal heading, level pitch."""
    free = scene.free_cells()
    ix, iy = free[int(rng.integers(len(free)))]
    x, y = cell_center(ix, iy)
    heading = CARDINAL_HEADINGS[int(rng.integers(4))]
    return Pose(x=x, y=y, heading=heading, pitch=0)


def collect_trajectories(scenes: list[GridScene], universe: Universe,
                         wg: WGMapping, *, per_demand: int = 3, seed: int = 0,
                         k: int = 16, sigma_logit: float = 0.5,
                         sigma_align: float = 0.1, step_limit: int = 100,
                         margin: float = 1.0
                         ) -> tuple[list[Trajectory], dict[str, int]]:
    """Expert demonstrations for every satisfiable (scene, demand) pair.

    Start poses and target instances are sampled independently per
    trajectory. Pairs without a satisfying object or without a reachable
    goal are skipped and counted.
    """
    trajectories: list[Trajectory] = []
    skipped = {"no_satisfier": 0, "no_path": 0}
    for scene in sorted(scenes, key=lambda s: s.scene_id):
        scene_hash = zlib.crc32(scene.scene_id.encode())
        for demand_id in sorted(wg):
            sats = _satisfying_instances(scene, universe, demand_id)
            if not sats:
                skipped["no_satisfier"] += 1
                continue
            for t_i in range(per_demand):
                key = (seed, scene_hash, demand_id, t_i)
                rng_setup, rng_obs = trajectory_rngs(key)
                start = sample_start_pose(scene, rng_setup)
                target = sats[int(rng_setup.integers(len(sats)))]
                goals = success_states(scene, universe, demand_id,
                                       margin=margin, instances=[target])
                if not goals:
                    skipped["no_path"] += 1
                    continue
                try:
                    actions = plan(scene, start, goals) + [Action.Done]
                except NoPath:
                    skipped["no_path"] += 1
                    continue
                state = EpisodeState(pose=start)
                observations = []
                moves = 0
                for action in actions:
                    observations.append(detect(
                        scene, state.pose, universe, rng_obs,
                        demand_id=demand_id, k=k, sigma_logit=sigma_logit,
                        sigma_align=sigma_align, step_count=state.steps,
                        step_limit=step_limit))
                    state, collided = step(state, action, scene)
                    assert not collided, "expert plans never collide"
                    if action == Action.MoveAhead:
                        moves += 1
                assert snap_to_lattice(state.pose) in goals
                trajectories.append(Trajectory(
                    scene_id=scene.scene_id, demand_id=demand_id, start=start,
                    actions=actions, observations=observations,
                    target_instance=target, translation_m=moves * CELL_M,
                    rng_key=key))
    return trajectories, skipped


# ---------------------------------------------------------------------------
# Persistence

def _round6(values) -> list[float]:
    return [round(float(v), 6) for v in values]


def trajectory_to_dict(traj: Trajectory) -> dict:
    return {
        "scene_id": traj.scene_id,
        "demand_id": traj.demand_id,
        "start": {"x": round(traj.start.x, 6), "y": round(traj.start.y, 6),
                  "heading": traj.start.heading, "pitch": traj.start.pitch},
        "target_instance": traj.target_instance,
        "actions": [a.name for a in traj.actions],
        "frames": [
            {
                "detections": [
                    {"bbox": _round6(d.bbox.as_array()),
                     "logits": _round6([d.logit_background, d.logit_object]),
                     "embedding": _round6(d.embedding),
                     "source": -1 if d.source_instance is None else d.source_instance}
                    for d in obs.detections
                ],
                "global_feature": _round6(obs.global_feature),
            }
            for obs in traj.observations
        ],
        "translation_m": round(traj.translation_m, 6),
        "rng_key": list(traj.rng_key),
    }


def trajectory_from_dict(data: dict) -> Trajectory:
    start = Pose(x=data["start"]["x"], y=data["start"]["y"],
                 heading=data["start"]["heading"], pitch=data["start"]["pitch"])
    actions = [Action[name] for name in data["actions"]]
    observations = []
    n_frames = len(data["frames"])
    for step_i, frame in enumerate(data["frames"]):
        detections = tuple(
            Detection(bbox=BBox(*d["bbox"]), logit_background=d["logits"][0],
                      logit_object=d["logits"][1],
                      embedding=np.array(d["embedding"]),
                      source_instance=None if d["source"] < 0 else d["source"])
            for d in frame["detections"])
        observations.append(Observation(
            detections=detections,
            global_feature=np.array(frame["global_feature"]),
            demand_id=data["demand_id"], pose=start,  # pose snapshots not persisted
            step_count=step_i, step_limit=max(n_frames, 1)))
    return Trajectory(scene_id=data["scene_id"], demand_id=data["demand_id"],
                      start=start, actions=actions, observations=observations,
                      target_instance=data["target_instance"],
                      translation_m=data["translation_m"],
                      rng_key=tuple(data["rng_key"]))


def write_trajectories_jsonl(path: str, trajectories: list[Trajectory],
                             meta: dict | None = None) -> None:
    with open(path, "w") as fh:
        if meta is not None:
            fh.write(json.dumps({"_meta": meta}) + "\n")
        for traj in trajectories:
            fh.write(json.dumps(trajectory_to_dict(traj)) + "\n")


def read_trajectories_jsonl(path: str) -> tuple[list[Trajectory], dict | None]:
    trajectories = []
    meta = None
    with open(path) as fh:
        for line in fh:
            record = json.loads(line)
            if "_meta" in record:
                meta = record["_meta"]
                continue
            trajectories.append(trajectory_from_dict(record))
    return trajectories, meta
