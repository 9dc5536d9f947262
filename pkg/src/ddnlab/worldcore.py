"""Procedural 2-D rooms, agent kinematics and view geometry.

The world is an occupancy grid of 0.25 m cells. Agent positions are
continuous; headings are multiples of 30 degrees and pitch is one of
{-30, 0, +30}. Objects sit on free cells and are tagged with a vertical
band (low/mid/high) that must match the camera pitch to be seen.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np

from .config import SceneGenConfig
from .errors import GenerationFailed, NotVisible, SteppedAfterDone

CELL_M = 0.25
MOVE_STEP_M = 0.25
AGENT_RADIUS_M = 0.1
ROTATE_STEP_DEG = 30
PITCH_LIMIT_DEG = 30
FOV_HALF_DEG = 45.0
VISIBILITY_RANGE_M = 5.0
IMAGE_SIZE = 100.0
MIN_BBOX_UNITS = 2.0

BANDS = ("low", "mid", "high")
PITCH_TO_BAND = {-30: "low", 0: "mid", 30: "high"}


class Action(IntEnum):
    MoveAhead = 0
    RotateRight = 1
    RotateLeft = 2
    LookUp = 3
    LookDown = 4
    Done = 5


def _snap(value: float) -> float:
    """Clean up trig dirt so lattice motion stays exactly on the lattice."""
    for exact in (0.0, 0.5, -0.5, 1.0, -1.0):
        if abs(value - exact) < 1e-15:
            return exact
    return value


HEADING_VECTORS = {
    h: (_snap(math.cos(math.radians(h))), _snap(math.sin(math.radians(h))))
    for h in range(0, 360, ROTATE_STEP_DEG)
}


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: int  # degrees, multiple of 30
    pitch: int    # degrees, one of {-30, 0, +30}


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (0.0 <= self.x_min <= self.x_max <= IMAGE_SIZE
                and 0.0 <= self.y_min <= self.y_max <= IMAGE_SIZE):
            raise ValueError(f"invalid bbox {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max])


@dataclass(frozen=True)
class ObjectInstance:
    instance_id: int
    category_id: int
    x: float      # meters, cell center
    y: float
    size: float   # meters, in [0.3, 1.0]
    band: str     # "low" | "mid" | "high"


@dataclass
class GridScene:
    scene_id: str
    width: int    # cells
    height: int
    blocked: np.ndarray            # bool, shape (height, width), row-major [y][x]
    objects: list[ObjectInstance]

    def __post_init__(self):
        self.blocked = np.asarray(self.blocked, dtype=bool)
        if self.blocked.shape != (self.height, self.width):
            raise ValueError("blocked bitmap shape does not match dims")

    @property
    def category_set(self) -> frozenset[int]:
        return frozenset(o.category_id for o in self.objects)

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.width and 0 <= iy < self.height

    def is_blocked(self, ix: int, iy: int) -> bool:
        if not self.in_bounds(ix, iy):
            return True
        return bool(self.blocked[iy, ix])

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(math.floor(x / CELL_M)), int(math.floor(y / CELL_M))

    def free_cells(self) -> list[tuple[int, int]]:
        ys, xs = np.nonzero(~self.blocked)
        return list(zip(xs.tolist(), ys.tolist()))


@dataclass(frozen=True)
class EpisodeState:
    pose: Pose
    steps: int = 0
    terminated: bool = False


def cell_center(ix: int, iy: int) -> tuple[float, float]:
    return (ix + 0.5) * CELL_M, (iy + 0.5) * CELL_M


def wrap_angle(deg: float) -> float:
    """Map an angle to (-180, 180]."""
    wrapped = math.fmod(deg + 180.0, 360.0)
    if wrapped <= 0.0:
        wrapped += 360.0
    return wrapped - 180.0


def horizontal_distance(pose: Pose, obj: ObjectInstance) -> float:
    return math.hypot(obj.x - pose.x, obj.y - pose.y)


def bearing_to(pose: Pose, x: float, y: float) -> float:
    """Signed angle from the agent's heading to the point, in (-180, 180]."""
    angle = math.degrees(math.atan2(y - pose.y, x - pose.x))
    return wrap_angle(angle - pose.heading)


# ---------------------------------------------------------------------------
# Line geometry

def supercover_cells(x0: float, y0: float, x1: float, y1: float,
                     cell: float = CELL_M) -> list[tuple[int, int]]:
    """All grid cells touched by the closed segment.

    When the segment passes exactly through a cell corner, both corner-adjacent
    neighbours are included, so diagonal gaps between blocked cells do not
    leak visibility.
    """
    eps = 1e-12
    ax, ay = x0 / cell, y0 / cell
    bx, by = x1 / cell, y1 / cell
    ix, iy = int(math.floor(ax)), int(math.floor(ay))
    jx, jy = int(math.floor(bx)), int(math.floor(by))
    cells = [(ix, iy)]
    dx, dy = bx - ax, by - ay
    sx = 1 if dx > 0 else -1
    sy = 1 if dy > 0 else -1
    t_max_x = ((ix + (sx > 0)) - ax) / dx if dx != 0 else math.inf
    t_delta_x = abs(1.0 / dx) if dx != 0 else math.inf
    t_max_y = ((iy + (sy > 0)) - ay) / dy if dy != 0 else math.inf
    t_delta_y = abs(1.0 / dy) if dy != 0 else math.inf
    guard = 2 * (abs(jx - ix) + abs(jy - iy)) + 4
    while (ix, iy) != (jx, jy) and guard > 0:
        guard -= 1
        if abs(t_max_x - t_max_y) < eps:
            cells.append((ix + sx, iy))
            cells.append((ix, iy + sy))
            ix += sx
            iy += sy
            t_max_x += t_delta_x
            t_max_y += t_delta_y
        elif t_max_x < t_max_y:
            ix += sx
            t_max_x += t_delta_x
        else:
            iy += sy
            t_max_y += t_delta_y
        cells.append((ix, iy))
    return cells


def line_of_sight(scene: GridScene, x0: float, y0: float,
                  x1: float, y1: float) -> bool:
    return not any(scene.is_blocked(ix, iy)
                   for ix, iy in supercover_cells(x0, y0, x1, y1))


def _seg_seg_distance(p1, p2, p3, p4) -> float:
    """Minimum distance between segments p1-p2 and p3-p4."""
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(p3, p4, p1), orient(p3, p4, p2)
    d3, d4 = orient(p1, p2, p3), orient(p1, p2, p4)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)):
        return 0.0

    def point_seg(p, a, b):
        abx, aby = b[0] - a[0], b[1] - a[1]
        denom = abx * abx + aby * aby
        if denom == 0:
            return math.hypot(p[0] - a[0], p[1] - a[1])
        t = max(0.0, min(1.0, ((p[0] - a[0]) * abx + (p[1] - a[1]) * aby) / denom))
        return math.hypot(p[0] - (a[0] + t * abx), p[1] - (a[1] + t * aby))

    return min(point_seg(p1, p3, p4), point_seg(p2, p3, p4),
               point_seg(p3, p1, p2), point_seg(p4, p1, p2))


def _seg_rect_distance(x0, y0, x1, y1, rx0, ry0, rx1, ry1) -> float:
    """Minimum distance between segment (x0,y0)-(x1,y1) and an axis-aligned rect."""
    def inside(px, py):
        return rx0 <= px <= rx1 and ry0 <= py <= ry1

    if inside(x0, y0) or inside(x1, y1):
        return 0.0
    corners = [(rx0, ry0), (rx1, ry0), (rx1, ry1), (rx0, ry1)]
    return min(_seg_seg_distance((x0, y0), (x1, y1), corners[i], corners[(i + 1) % 4])
               for i in range(4))


def swept_collides(scene: GridScene, x0: float, y0: float,
                   x1: float, y1: float, radius: float = AGENT_RADIUS_M) -> bool:
    """True if a disc of the given radius swept along the segment hits a blocked cell."""
    lo_x = int(math.floor((min(x0, x1) - radius) / CELL_M))
    hi_x = int(math.floor((max(x0, x1) + radius) / CELL_M))
    lo_y = int(math.floor((min(y0, y1) - radius) / CELL_M))
    hi_y = int(math.floor((max(y0, y1) + radius) / CELL_M))
    for iy in range(lo_y, hi_y + 1):
        for ix in range(lo_x, hi_x + 1):
            if not scene.is_blocked(ix, iy):
                continue
            rx0, ry0 = ix * CELL_M, iy * CELL_M
            if _seg_rect_distance(x0, y0, x1, y1,
                                  rx0, ry0, rx0 + CELL_M, ry0 + CELL_M) < radius:
                return True
    return False


# ---------------------------------------------------------------------------
# Dynamics

def step(state: EpisodeState, action: Action,
         scene: GridScene) -> tuple[EpisodeState, bool]:
    """Apply one action. Returns the new state and a collision flag.

    MoveAhead translates 0.25 m along the heading unless the swept agent disc
    would touch a blocked cell, in which case the pose is unchanged and the
    collision flag is set. The step counter always advances; Done terminates.
    """
    if state.terminated:
        raise SteppedAfterDone("episode already terminated")
    pose = state.pose
    collided = False
    terminated = False
    if action == Action.MoveAhead:
        dx, dy = HEADING_VECTORS[pose.heading]
        nx, ny = pose.x + MOVE_STEP_M * dx, pose.y + MOVE_STEP_M * dy
        if swept_collides(scene, pose.x, pose.y, nx, ny):
            collided = True
        else:
            pose = replace(pose, x=nx, y=ny)
    elif action == Action.RotateRight:
        pose = replace(pose, heading=(pose.heading + ROTATE_STEP_DEG) % 360)
    elif action == Action.RotateLeft:
        pose = replace(pose, heading=(pose.heading - ROTATE_STEP_DEG) % 360)
    elif action == Action.LookUp:
        pose = replace(pose, pitch=min(pose.pitch + ROTATE_STEP_DEG, PITCH_LIMIT_DEG))
    elif action == Action.LookDown:
        pose = replace(pose, pitch=max(pose.pitch - ROTATE_STEP_DEG, -PITCH_LIMIT_DEG))
    elif action == Action.Done:
        terminated = True
    else:
        raise ValueError(f"unknown action {action!r}")
    return EpisodeState(pose=pose, steps=state.steps + 1, terminated=terminated), collided


# ---------------------------------------------------------------------------
# Visibility

def visible_objects(scene: GridScene,
                    pose: Pose) -> list[tuple[ObjectInstance, float, float]]:
    """Objects in view: within 45 deg of heading, 5 m range, matching band,
    with an unobstructed sightline. Sorted by ascending distance."""
    band = PITCH_TO_BAND[pose.pitch]
    out = []
    for obj in scene.objects:
        if obj.band != band:
            continue
        dist = horizontal_distance(pose, obj)
        if dist > VISIBILITY_RANGE_M:
            continue
        bear = bearing_to(pose, obj.x, obj.y)
        if abs(bear) > FOV_HALF_DEG:
            continue
        if not line_of_sight(scene, pose.x, pose.y, obj.x, obj.y):
            continue
        out.append((obj, dist, bear))
    out.sort(key=lambda t: (t[1], t[0].instance_id))
    return out


def project_bbox(obj: ObjectInstance, pose: Pose) -> BBox:
    """Deterministic square box on the 100x100 synthetic image.

    Horizontal center tracks bearing linearly across the FOV; width is
    50*size/distance clamped to [2, 100]. Raises NotVisible when the object
    fails the pose-only view predicates (FOV, range, band).
    """
    dist = horizontal_distance(pose, obj)
    bear = bearing_to(pose, obj.x, obj.y)
    if (dist > VISIBILITY_RANGE_M or abs(bear) > FOV_HALF_DEG
            or obj.band != PITCH_TO_BAND[pose.pitch]):
        raise NotVisible(f"object {obj.instance_id} outside view frustum")
    if dist <= 0.0:
        w = IMAGE_SIZE
    else:
        w = min(max(50.0 * obj.size / dist, MIN_BBOX_UNITS), IMAGE_SIZE)
    cx = 50.0 * (1.0 + bear / FOV_HALF_DEG)
    return BBox(
        x_min=max(0.0, cx - w / 2),
        y_min=max(0.0, 50.0 - w / 2),
        x_max=min(IMAGE_SIZE, cx + w / 2),
        y_max=min(IMAGE_SIZE, 50.0 + w / 2),
    )


# ---------------------------------------------------------------------------
# Scene generation

_MAX_SCENE_ATTEMPTS = 25


def _connected(blocked: np.ndarray) -> bool:
    free = ~blocked
    n_free = int(free.sum())
    if n_free == 0:
        return False
    ys, xs = np.nonzero(free)
    start = (int(xs[0]), int(ys[0]))
    seen = {start}
    queue = deque([start])
    h, w = blocked.shape
    while queue:
        cx, cy = queue.popleft()
        for nx, ny in ((cx + 1, cy), (cx - 1, cy), (cx, cy + 1), (cx, cy - 1)):
            if 0 <= nx < w and 0 <= ny < h and free[ny, nx] and (nx, ny) not in seen:
                seen.add((nx, ny))
                queue.append((nx, ny))
    return len(seen) == n_free


def generate_scene(config: SceneGenConfig, seed: int) -> GridScene:
    """Generate a connected room: blocked boundary, wall segments at the
    requested density, objects on distinct free cells. Deterministic per
    (config, seed)."""
    if config.width < 6 or config.height < 6:
        raise ValueError("scene dims must be at least 6x6 cells")
    if config.n_objects < 1:
        raise ValueError("at least one object required")
    if not config.category_pool:
        raise ValueError("category_pool must be non-empty")

    rng = np.random.default_rng(seed)
    w, h = config.width, config.height
    n_interior = (w - 2) * (h - 2)
    target_walls = int(round(config.wall_density * n_interior))

    for _ in range(_MAX_SCENE_ATTEMPTS):
        blocked = np.zeros((h, w), dtype=bool)
        blocked[0, :] = blocked[-1, :] = True
        blocked[:, 0] = blocked[:, -1] = True

        placed = 0
        tries = 0
        while placed < target_walls and tries < 60 * (target_walls + 1):
            tries += 1
            ix = int(rng.integers(1, w - 1))
            iy = int(rng.integers(1, h - 1))
            horizontal = bool(rng.integers(2))
            length = int(rng.integers(2, 7))
            for k in range(length):
                cx, cy = (ix + k, iy) if horizontal else (ix, iy + k)
                if not (1 <= cx < w - 1 and 1 <= cy < h - 1) or blocked[cy, cx]:
                    continue
                blocked[cy, cx] = True
                if _connected(blocked):
                    placed += 1
                else:
                    blocked[cy, cx] = False
                if placed >= target_walls:
                    break

        free = [(ix, iy) for iy in range(h) for ix in range(w) if not blocked[iy, ix]]
        if len(free) < config.n_objects:
            continue
        picks = rng.choice(len(free), size=config.n_objects, replace=False)
        objects = []
        for i, pick in enumerate(picks.tolist()):
            ix, iy = free[pick]
            x, y = cell_center(ix, iy)
            cat = int(config.category_pool[int(rng.integers(len(config.category_pool)))])
            size = float(rng.uniform(config.min_object_size, config.max_object_size))
            band = BANDS[int(rng.integers(3))]
            objects.append(ObjectInstance(instance_id=i, category_id=cat,
                                          x=x, y=y, size=size, band=band))
        return GridScene(scene_id=f"{config.id_prefix}-{seed:06d}",
                         width=w, height=h, blocked=blocked, objects=objects)
    raise GenerationFailed(
        f"could not place {config.n_objects} objects in a {w}x{h} scene (seed {seed})")


# ---------------------------------------------------------------------------
# Persistence

def scene_to_dict(scene: GridScene) -> dict:
    return {
        "id": scene.scene_id,
        "width": scene.width,
        "height": scene.height,
        "blocked": [int(v) for v in scene.blocked.reshape(-1).tolist()],
        "objects": [
            {
                "id": o.instance_id,
                "category": o.category_id,
                "x": round(o.x, 6),
                "y": round(o.y, 6),
                "size": round(o.size, 6),
                "band": o.band,
            }
            for o in scene.objects
        ],
    }


def scene_from_dict(data: dict) -> GridScene:
    blocked = np.array(data["blocked"], dtype=bool).reshape(data["height"], data["width"])
    objects = [
        ObjectInstance(instance_id=o["id"], category_id=o["category"],
                       x=o["x"], y=o["y"], size=o["size"], band=o["band"])
        for o in data["objects"]
    ]
    return GridScene(scene_id=data["id"], width=data["width"], height=data["height"],
                     blocked=blocked, objects=objects)
