"""Episode running, success criteria, and NSR/NSPL/SSR aggregation.

An episode succeeds at navigation when Done is emitted with a satisfying
object in view closer than c_navi (1.5 m). Selection success additionally
requires the grounder's box to overlap a qualifying object's projected box
with IoU above c_sele (0.5); it is only evaluated after navigation success.
Episodes that exhaust the step limit without Done fail both criteria.

Metrics are percentages aggregated per evaluation seed; the table reports
mean and sample standard deviation over seeds. Per-episode RNG streams are
derived from (seed, split, episode index), so results are identical whether
episodes run serially or on a thread pool.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass

import numpy as np

from .demands import Universe, satisfies
from .errors import EmptySplit
from .expert import sample_start_pose, shortest_translation
from .grounding import GrounderNet, grounder_forward
from .perception import detect
from .worldcore import (Action, BBox, EpisodeState, GridScene, Pose, CELL_M,
                        step, visible_objects)

SPLITS = ("ss", "su", "us", "uu")
SPLIT_LABELS = {
    "ss": "seen scene / seen instruction",
    "su": "seen scene / unseen instruction",
    "us": "unseen scene / seen instruction",
    "uu": "unseen scene / unseen instruction",
}
METRICS = ("NSR", "NSPL", "SSR")


def iou(a: BBox, b: BBox) -> float:
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def is_nav_success(scene: GridScene, pose: Pose, universe: Universe,
                   demand_id: int, c_navi: float = 1.5) -> bool:
    for obj, dist, _bear in visible_objects(scene, pose):
        if dist < c_navi and satisfies(universe, demand_id, obj.category_id):
            return True
    return False


def is_sel_success(chosen: BBox, scene: GridScene, pose: Pose,
                   universe: Universe, demand_id: int, c_navi: float = 1.5,
                   c_sele: float = 0.5) -> bool:
    from .worldcore import project_bbox
    for obj, dist, _bear in visible_objects(scene, pose):
        if dist >= c_navi or not satisfies(universe, demand_id, obj.category_id):
            continue
        if iou(chosen, project_bbox(obj, pose)) > c_sele:
            return True
    return False


@dataclass(frozen=True)
class EpisodeSpec:
    scene_id: str
    demand_id: int
    start: Pose
    step_limit: int = 100


@dataclass(frozen=True)
class EpisodeResult:
    nav_success: bool
    sel_success: bool
    steps: int
    path_length_m: float
    shortest_length_m: float
    chosen_bbox: BBox | None


def run_episode(agent, grounder: GrounderNet, spec: EpisodeSpec,
                scene: GridScene, universe: Universe,
                seed_seq: np.random.SeedSequence, *, k: int = 16,
                sigma_logit: float = 0.5, sigma_align: float = 0.1,
                c_navi: float = 1.5, c_sele: float = 0.5,
                planning_margin: float = 1.0) -> EpisodeResult:
    """Run one episode; the grounder is consulted through this single code
    path for every agent."""
    env_child, agent_child = seed_seq.spawn(2)
    rng_env = np.random.default_rng(env_child)
    rng_agent = np.random.default_rng(agent_child)
    demand_emb = universe.demand(spec.demand_id).embedding

    state = EpisodeState(pose=spec.start)
    agent_state = agent.reset(scene, spec.demand_id, spec.start, rng_agent)
    path_m = 0.0
    nav = sel = False
    chosen: BBox | None = None
    for _ in range(spec.step_limit):
        obs = detect(scene, state.pose, universe, rng_env,
                     demand_id=spec.demand_id, k=k, sigma_logit=sigma_logit,
                     sigma_align=sigma_align, step_count=state.steps,
                     step_limit=spec.step_limit)
        action, agent_state = agent.act(obs, demand_emb, agent_state)
        state, collided = step(state, action, scene)
        if action == Action.MoveAhead and not collided:
            path_m += CELL_M
        if action == Action.Done:
            nav = is_nav_success(scene, state.pose, universe, spec.demand_id,
                                 c_navi)
            if nav:
                _scores, idx = grounder_forward(grounder, obs, demand_emb)
                chosen = obs.detections[idx].bbox
                sel = is_sel_success(chosen, scene, state.pose, universe,
                                     spec.demand_id, c_navi, c_sele)
            break
    shortest = shortest_translation(scene, universe, spec.demand_id,
                                    spec.start, margin=planning_margin)
    return EpisodeResult(nav_success=nav, sel_success=sel, steps=state.steps,
                         path_length_m=path_m, shortest_length_m=shortest,
                         chosen_bbox=chosen)


def spl(results: list[EpisodeResult]) -> float:
    """Success weighted by path length; a success with zero reference length
    contributes 1."""
    if not results:
        return 0.0
    total = 0.0
    for r in results:
        if not r.nav_success:
            continue
        if r.shortest_length_m == 0.0:
            total += 1.0
        else:
            total += r.shortest_length_m / max(r.path_length_m,
                                               r.shortest_length_m)
    return total / len(results)


# ---------------------------------------------------------------------------
# Split construction and aggregation

def build_split_pairs(scenes: list[GridScene], demand_ids: list[int],
                      universe: Universe, n_episodes: int,
                      seed: int) -> list[tuple[str, int]]:
    """Satisfiable (scene, demand) pairs for one split, downsampled (or
    repeated round-robin) to n_episodes. Fixed across evaluation seeds."""
    pairs = []
    for scene in sorted(scenes, key=lambda s: s.scene_id):
        cats = scene.category_set
        for d in sorted(demand_ids):
            if any(satisfies(universe, d, c) for c in cats):
                pairs.append((scene.scene_id, d))
    if not pairs:
        raise EmptySplit("no satisfiable (scene, demand) pair in split")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x59117)))
    if len(pairs) >= n_episodes:
        idx = rng.choice(len(pairs), size=n_episodes, replace=False)
        return [pairs[i] for i in sorted(idx.tolist())]
    reps = [pairs[i % len(pairs)] for i in range(n_episodes)]
    return reps


@dataclass
class MetricsTable:
    entries: dict[str, dict[str, tuple[float, float]]]
    n_seeds: int
    n_episodes: dict[str, int]

    def rows(self) -> list[dict]:
        out = []
        for split in SPLITS:
            if split not in self.entries:
                continue
            for metric in METRICS:
                mean, std = self.entries[split][metric]
                out.append({"split": split, "metric": metric,
                            "mean": round(mean, 4), "sample_std": round(std, 4),
                            "n_seeds": self.n_seeds,
                            "n_episodes": self.n_episodes[split]})
        return out


def _sample_std(values: list[float]) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(np.array(values), ddof=1))


def evaluate(agent, grounder: GrounderNet,
             split_pairs: dict[str, list[tuple[str, int]]],
             scenes_by_id: dict[str, GridScene], universe: Universe,
             seeds: list[int], *, k: int = 16, sigma_logit: float = 0.5,
             sigma_align: float = 0.1, c_navi: float = 1.5,
             c_sele: float = 0.5, planning_margin: float = 1.0,
             step_limit: int = 100, threads: int = 1
             ) -> tuple[MetricsTable, list[dict]]:
    """Run every split for every seed and aggregate NSR/NSPL/SSR."""
    entries: dict[str, dict[str, tuple[float, float]]] = {}
    n_episodes: dict[str, int] = {}
    episode_log: list[dict] = []

    for split_idx, split in enumerate(SPLITS):
        if split not in split_pairs:
            continue
        pairs = split_pairs[split]
        if not pairs:
            raise EmptySplit(f"split {split} has no episodes")
        n_episodes[split] = len(pairs)
        per_seed: dict[str, list[float]] = {m: [] for m in METRICS}

        for seed in seeds:
            def one(ep: tuple[int, tuple[str, int]]) -> tuple[EpisodeResult, EpisodeSpec]:
                ep_idx, (scene_id, demand_id) = ep
                scene = scenes_by_id[scene_id]
                root = np.random.SeedSequence((seed, split_idx, ep_idx))
                start_child, episode_child = root.spawn(2)
                start = sample_start_pose(scene,
                                          np.random.default_rng(start_child))
                spec = EpisodeSpec(scene_id=scene_id, demand_id=demand_id,
                                   start=start, step_limit=step_limit)
                result = run_episode(
                    agent, grounder, spec, scene, universe, episode_child,
                    k=k, sigma_logit=sigma_logit, sigma_align=sigma_align,
                    c_navi=c_navi, c_sele=c_sele,
                    planning_margin=planning_margin)
                return result, spec

            jobs = list(enumerate(pairs))
            if threads > 1:
                with concurrent.futures.ThreadPoolExecutor(threads) as pool:
                    outcomes = list(pool.map(one, jobs))
            else:
                outcomes = [one(job) for job in jobs]

            results = [r for r, _spec in outcomes]
            per_seed["NSR"].append(100.0 * np.mean([r.nav_success for r in results]))
            per_seed["NSPL"].append(100.0 * spl(results))
            per_seed["SSR"].append(100.0 * np.mean([r.sel_success for r in results]))
            for ep_idx, (result, spec) in enumerate(outcomes):
                episode_log.append({
                    "split": split, "seed": seed, "episode": ep_idx,
                    "scene_id": spec.scene_id, "demand_id": spec.demand_id,
                    "nav_success": int(result.nav_success),
                    "sel_success": int(result.sel_success),
                    "steps": result.steps,
                    "path_m": round(result.path_length_m, 6),
                    "shortest_m": round(result.shortest_length_m, 6),
                })

        entries[split] = {m: (float(np.mean(vals)), _sample_std(vals))
                          for m, vals in per_seed.items()}

    return (MetricsTable(entries=entries, n_seeds=len(seeds),
                         n_episodes=n_episodes), episode_log)
