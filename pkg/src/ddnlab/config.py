"""Run configuration: dataclass configs for every pipeline stage plus JSON I/O.

The full config travels with every artifact (embedded verbatim in JSON
artifacts, as a hash column in CSV ones) so results stay attributable to the
exact settings that produced them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

from .errors import ValidationError


@dataclass(frozen=True)
class UniverseConfig:
    n_prototypes: int = 64
    n_categories: int = 109
    n_demands: int = 200
    latent_dim: int = 8
    demand_dim: int = 32
    object_dim: int = 16
    target_satisfiers: float = 2.3      # mean satisfying categories per demand
    max_prototypes_per_category: int = 4
    max_pairwise_cosine: float = 0.8    # prototype separation constraint
    map_scale: float = 0.05             # entry std of the random linear maps
    demand_noise: float = 0.05          # latent-space jitter per demand
    signature_noise: float = 0.3        # per-category additive signature std


@dataclass(frozen=True)
class SceneGenConfig:
    width: int = 12                     # cells, 0.25 m each
    height: int = 12
    wall_density: float = 0.15          # fraction of interior cells blocked
    n_objects: int = 12
    min_object_size: float = 0.3
    max_object_size: float = 1.0
    category_pool: tuple[int, ...] = ()  # category ids scenes may draw from
    id_prefix: str = "scene"


@dataclass(frozen=True)
class AttributeHyper:
    hidden_dim: int = 64
    depth: int = 2
    attribute_dim: int = 32
    temperature: float = 0.1
    negatives_per_anchor: int = 15
    batch_size: int = 64
    steps: int = 2000
    lr: float = 1e-3


@dataclass(frozen=True)
class PolicyHyper:
    token_dim: int = 64
    n_heads: int = 4
    encoder_layers: int = 2
    action_embed_dim: int = 16
    hidden_dim: int = 64
    lr: float = 1e-3
    batch_size: int = 12
    steps: int = 1500
    val_fraction: float = 0.1
    eval_every: int = 200
    train_encoder: bool = False         # True for the no-pretraining arm


@dataclass(frozen=True)
class GrounderHyper:
    token_dim: int = 64
    n_heads: int = 4
    encoder_layers: int = 2
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 30
    val_fraction: float = 0.1


@dataclass(frozen=True)
class Thresholds:
    c_navi: float = 1.5                 # nav-success distance, meters
    c_sele: float = 0.5                 # selection-success IoU
    step_limit: int = 100
    k_detections: int = 16
    sigma_align: float = 0.1            # text-to-visual alignment noise
    sigma_logit: float = 0.5            # detector logit noise
    planning_margin: float = 1.0        # expert goal distance, < c_navi
    p_done: float = 0.02                # random agent Done probability


@dataclass(frozen=True)
class SplitConfig:
    n_train_demands: int = 80
    n_test_demands: int = 120
    n_train_scenes: int = 30
    n_test_scenes: int = 15
    scene_pool_fraction: float = 0.65   # share of categories scenes may contain
    lg_objects_per_demand: int = 10


@dataclass(frozen=True)
class ExpertConfig:
    trajectories_per_demand: int = 3


@dataclass(frozen=True)
class GroundingDataConfig:
    frames_per_scene: int = 167         # ~5000 frames on the 30-scene default


@dataclass(frozen=True)
class EvalConfig:
    n_seeds: int = 3
    episodes_per_split: int = 200


@dataclass(frozen=True)
class RunConfig:
    universe: UniverseConfig = field(default_factory=UniverseConfig)
    scene: SceneGenConfig = field(default_factory=SceneGenConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    attribute: AttributeHyper = field(default_factory=AttributeHyper)
    policy: PolicyHyper = field(default_factory=PolicyHyper)
    grounder: GrounderHyper = field(default_factory=GrounderHyper)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    grounding_data: GroundingDataConfig = field(default_factory=GroundingDataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    thresholds: Thresholds = field(default_factory=Thresholds)
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def validate(self) -> None:
        t = self.thresholds
        if t.c_navi <= 0 or t.c_sele <= 0 or t.step_limit <= 0 or t.k_detections <= 0:
            raise ValidationError("thresholds must be positive")
        if t.planning_margin >= t.c_navi:
            raise ValidationError("planning margin must be below c_navi")
        if self.universe.n_prototypes < 2 or self.universe.n_categories < 2:
            raise ValidationError("universe needs at least 2 prototypes and 2 categories")
        if self.universe.n_demands < 1:
            raise ValidationError("universe needs at least 1 demand")
        if self.scene.width < 6 or self.scene.height < 6:
            raise ValidationError("scenes must be at least 6x6 cells")
        if self.scene.n_objects < 1:
            raise ValidationError("scenes need at least 1 object")
        n_split = self.split.n_train_demands + self.split.n_test_demands
        if n_split > self.universe.n_demands:
            raise ValidationError("demand split exceeds universe demand count")


_SECTION_TYPES = {
    "universe": UniverseConfig,
    "scene": SceneGenConfig,
    "split": SplitConfig,
    "attribute": AttributeHyper,
    "policy": PolicyHyper,
    "grounder": GrounderHyper,
    "expert": ExpertConfig,
    "grounding_data": GroundingDataConfig,
    "eval": EvalConfig,
    "thresholds": Thresholds,
}


def _build_section(cls: type, data: dict[str, Any]) -> Any:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown keys in {cls.__name__}: {sorted(unknown)}")
    if "category_pool" in data:
        data = dict(data, category_pool=tuple(data["category_pool"]))
    return cls(**data)


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    """Build a RunConfig from a (possibly partial) nested dict."""
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key == "seed":
            kwargs["seed"] = int(value)
        elif key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ValidationError(f"config section {key!r} must be an object")
            kwargs[key] = _build_section(_SECTION_TYPES[key], value)
        else:
            raise ValidationError(f"unknown config section {key!r}")
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ValidationError("config root must be a JSON object")
    return config_from_dict(data)


def smoke_config(seed: int = 0) -> RunConfig:
    """Tiny end-to-end configuration; the whole pipeline runs in well under 5 min."""
    return RunConfig(
        universe=UniverseConfig(n_prototypes=14, n_categories=24, n_demands=24),
        scene=SceneGenConfig(width=8, height=8, wall_density=0.1, n_objects=6),
        split=SplitConfig(n_train_demands=10, n_test_demands=8,
                          n_train_scenes=4, n_test_scenes=2,
                          scene_pool_fraction=0.75),
        attribute=AttributeHyper(steps=120, batch_size=32),
        policy=PolicyHyper(steps=150, batch_size=4, eval_every=50),
        grounder=GrounderHyper(epochs=4),
        expert=ExpertConfig(trajectories_per_demand=2),
        grounding_data=GroundingDataConfig(frames_per_scene=40),
        eval=EvalConfig(n_seeds=1, episodes_per_split=30),
        seed=seed,
    )


def desk_config(seed: int = 0) -> RunConfig:
    """The default desk-scale configuration (the acceptance-suite workload)."""
    return RunConfig(seed=seed)


def paper_scale_config(seed: int = 0) -> RunConfig:
    """Configuration mirroring the source-scale experiment.

    Documented for reference; it is far too large to run on a desktop CPU.
    ~2600 demands over 109 categories, 1024-D demand and 512-D object
    embeddings concatenated to 1536-D, 512-D attribute features from a
    depth-6 encoder, 600 scenes, ~27000 expert trajectories and ~1M
    grounding frames.
    """
    return RunConfig(
        universe=UniverseConfig(
            n_prototypes=512, n_categories=109, n_demands=2600,
            demand_dim=1024, object_dim=512,
        ),
        scene=SceneGenConfig(width=32, height=32, n_objects=40),
        split=SplitConfig(n_train_demands=200, n_test_demands=300,
                          n_train_scenes=200, n_test_scenes=200),
        attribute=AttributeHyper(hidden_dim=512, depth=6, attribute_dim=512),
        policy=PolicyHyper(token_dim=512, encoder_layers=6, hidden_dim=1024,
                           steps=200_000),
        grounder=GrounderHyper(token_dim=1024, encoder_layers=6),
        expert=ExpertConfig(trajectories_per_demand=3),
        grounding_data=GroundingDataConfig(frames_per_scene=5000),
        eval=EvalConfig(n_seeds=3, episodes_per_split=1000),
        seed=seed,
    )
