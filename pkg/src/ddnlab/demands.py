"""Synthetic demand/object semantics.

A universe holds latent prototypes (unit vectors), object categories that own
1-4 prototypes each, and demands tied to a single prototype. The satisfaction
discriminator is exact set membership: a category satisfies a demand iff it
owns the demand's prototype. Fixed random linear maps embed both sides into
observable spaces (a stand-in for frozen pretrained text encoders), and
instance-level visual embeddings are the category text embedding plus
alignment noise, modelling one shared text/vision space.

Category text embeddings are a weak projection of the owned-prototype mean
plus a dominant per-category signature, so reading satisfaction off raw
embedding similarity is unreliable and the attribute encoder has to learn a
nonlinear mapping.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .config import UniverseConfig
from .errors import GenerationFailed, InsufficientDemands, UnknownId

WGMapping = dict[int, frozenset[int]]
LGMapping = dict[int, tuple[int, ...]]

_TOKEN_TEMPLATES = (
    "i need something for {}",
    "please find me an item that can handle {}",
    "i am looking for anything useful for {}",
    "could you locate an object suited to {}",
    "bring me whatever works for {}",
    "i want something around here for {}",
)


@dataclass(frozen=True)
class Category:
    category_id: int
    name: str
    prototype_ids: tuple[int, ...]
    text_embedding: np.ndarray  # (object_dim,)


@dataclass(frozen=True)
class Demand:
    demand_id: int
    prototype_id: int
    tokens: tuple[str, ...]
    embedding: np.ndarray  # (demand_dim,)


@dataclass
class Universe:
    config: UniverseConfig
    seed: int
    prototypes: np.ndarray     # (n_prototypes, latent_dim), unit rows
    map_demand: np.ndarray     # (demand_dim, latent_dim)
    map_object: np.ndarray     # (object_dim, latent_dim)
    categories: list[Category]
    demands: list[Demand]
    _cat_by_id: dict[int, Category] = field(init=False, repr=False)
    _dem_by_id: dict[int, Demand] = field(init=False, repr=False)
    _pinv_demand: np.ndarray | None = field(init=False, repr=False, default=None)

    def __post_init__(self):
        self._cat_by_id = {c.category_id: c for c in self.categories}
        self._dem_by_id = {d.demand_id: d for d in self.demands}

    def category(self, category_id: int) -> Category:
        try:
            return self._cat_by_id[category_id]
        except KeyError:
            raise UnknownId(f"unknown category id {category_id}") from None

    def demand(self, demand_id: int) -> Demand:
        try:
            return self._dem_by_id[demand_id]
        except KeyError:
            raise UnknownId(f"unknown demand id {demand_id}") from None

    def demand_ids(self) -> list[int]:
        return [d.demand_id for d in self.demands]

    def category_ids(self) -> list[int]:
        return [c.category_id for c in self.categories]


def satisfies(universe: Universe, demand_id: int, category_id: int) -> bool:
    """The ground-truth discriminator: does the category fulfil the demand?"""
    dem = universe.demand(demand_id)
    cat = universe.category(category_id)
    return dem.prototype_id in cat.prototype_ids


def satisfying_categories(universe: Universe, demand_id: int) -> list[int]:
    proto = universe.demand(demand_id).prototype_id
    return [c.category_id for c in universe.categories if proto in c.prototype_ids]


# ---------------------------------------------------------------------------
# Generation

def _sample_prototypes(rng: np.random.Generator, n: int, dim: int,
                       max_cos: float) -> np.ndarray:
    rows: list[np.ndarray] = []
    for _ in range(n):
        for _attempt in range(500):
            v = rng.standard_normal(dim)
            v /= np.linalg.norm(v)
            if all(abs(float(v @ r)) <= max_cos for r in rows):
                rows.append(v)
                break
        else:
            raise GenerationFailed(
                f"could not sample {n} prototypes with pairwise cosine <= {max_cos}")
    return np.stack(rows)


def _solve_raw_mean(target: float) -> float:
    """Solve m / (1 - exp(-m)) = target for m.

    Demands resample away zero-satisfier prototypes, which lifts the observed
    mean above the raw ownership rate; this inverts that zero-truncation
    under a Poisson approximation.
    """
    if target <= 1.0:
        return target
    lo, hi = 1e-9, 10.0 * target
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        value = mid / (1.0 - math.exp(-mid))
        if value < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_universe(config: UniverseConfig, seed: int) -> Universe:
    """Deterministically generate a universe whose mean satisfiers-per-demand
    lands near config.target_satisfiers."""
    if config.n_prototypes < 2 or config.n_categories < 2:
        raise ValueError("need at least 2 prototypes and 2 categories")
    if config.n_demands < 1:
        raise ValueError("need at least 1 demand")

    rng = np.random.default_rng(seed)
    prototypes = _sample_prototypes(rng, config.n_prototypes, config.latent_dim,
                                    config.max_pairwise_cosine)
    map_demand = rng.normal(0.0, config.map_scale,
                            size=(config.demand_dim, config.latent_dim))
    map_object = rng.normal(0.0, config.map_scale,
                            size=(config.object_dim, config.latent_dim))

    raw_mean = _solve_raw_mean(config.target_satisfiers)
    g_mean = raw_mean * config.n_prototypes / config.n_categories
    g_cap = min(config.max_prototypes_per_category, config.n_prototypes)
    clamped = min(max(g_mean, 1.0), float(g_cap))
    if abs(clamped - g_mean) > 1e-9:
        warnings.warn(
            f"target_satisfiers {config.target_satisfiers} not reachable with "
            f"{config.n_prototypes} prototypes / {config.n_categories} categories; "
            f"using ownership mean {clamped:.2f}")
        g_mean = clamped

    categories = []
    for cid in range(config.n_categories):
        g = int(g_mean) + (1 if rng.random() < g_mean - int(g_mean) else 0)
        g = min(max(g, 1), g_cap)
        protos = tuple(sorted(int(p) for p in
                              rng.choice(config.n_prototypes, size=g, replace=False)))
        mean_proto = prototypes[list(protos)].mean(axis=0)
        signature = rng.normal(0.0, config.signature_noise, size=config.object_dim)
        embedding = map_object @ mean_proto + signature
        categories.append(Category(category_id=cid, name=f"cat{cid:03d}",
                                   prototype_ids=protos, text_embedding=embedding))

    owners = np.zeros(config.n_prototypes, dtype=int)
    for cat in categories:
        for p in cat.prototype_ids:
            owners[p] += 1

    demands = []
    for did in range(config.n_demands):
        proto = -1
        for _attempt in range(1000):
            candidate = int(rng.integers(config.n_prototypes))
            if owners[candidate] > 0:
                proto = candidate
                break
        if proto < 0:
            raise GenerationFailed("could not draw a satisfiable demand prototype")
        template = _TOKEN_TEMPLATES[int(rng.integers(len(_TOKEN_TEMPLATES)))]
        tokens = tuple(template.format(f"purpose-{proto:03d}").split())
        noise = rng.normal(0.0, config.demand_noise, size=config.latent_dim)
        embedding = map_demand @ (prototypes[proto] + noise)
        demands.append(Demand(demand_id=did, prototype_id=proto,
                              tokens=tokens, embedding=embedding))

    return Universe(config=config, seed=seed, prototypes=prototypes,
                    map_demand=map_demand, map_object=map_object,
                    categories=categories, demands=demands)


# ---------------------------------------------------------------------------
# Mappings and splits

def build_wg_mappings(universe: Universe, pool: Iterable[int]) -> WGMapping:
    """Restrict the discriminator to a category pool; drop demands with no
    satisfier in the pool."""
    pool_set = set(pool)
    unknown = pool_set - set(universe.category_ids())
    if unknown:
        raise UnknownId(f"pool contains unknown categories {sorted(unknown)}")
    mapping: WGMapping = {}
    for dem in universe.demands:
        sats = frozenset(c for c in pool_set
                         if satisfies(universe, dem.demand_id, c))
        if sats:
            mapping[dem.demand_id] = sats
    return mapping


def build_lg_mappings(universe: Universe, n_lg: int = 10,
                      seed: int = 0) -> LGMapping:
    """Per demand, n_lg satisfying categories sampled without replacement from
    the whole universe. Demands with fewer satisfiers keep them all (with one
    aggregate warning)."""
    rng = np.random.default_rng(seed)
    mapping: LGMapping = {}
    short = 0
    for dem in universe.demands:
        sats = satisfying_categories(universe, dem.demand_id)
        order = rng.permutation(len(sats))
        chosen = [sats[i] for i in order.tolist()]
        if len(chosen) < n_lg:
            short += 1
        mapping[dem.demand_id] = tuple(chosen[:n_lg])
    if short:
        warnings.warn(f"{short} of {len(universe.demands)} demands have fewer "
                      f"than {n_lg} satisfying categories; kept all available")
    return mapping


def split_demands(universe: Universe, n_train: int, n_test: int,
                  seed: int) -> tuple[list[int], list[int]]:
    ids = universe.demand_ids()
    if n_train + n_test > len(ids):
        raise InsufficientDemands(
            f"split {n_train}+{n_test} exceeds {len(ids)} demands")
    perm = np.random.default_rng(seed).permutation(len(ids))
    train = sorted(ids[i] for i in perm[:n_train].tolist())
    test = sorted(ids[i] for i in perm[n_train:n_train + n_test].tolist())
    return train, test


# ---------------------------------------------------------------------------
# Embeddings

def embed_demand(universe: Universe, demand_id: int) -> np.ndarray:
    return universe.demand(demand_id).embedding


def embed_category_text(universe: Universe, category_id: int) -> np.ndarray:
    return universe.category(category_id).text_embedding


def embed_instance_visual(universe: Universe, category_id: int,
                          rng: np.random.Generator,
                          sigma_align: float = 0.1) -> np.ndarray:
    """Visual embedding of an object instance: the category text embedding
    plus fresh alignment noise (both live in one shared space)."""
    text = universe.category(category_id).text_embedding
    if sigma_align <= 0.0:
        return text.copy()
    return text + rng.normal(0.0, sigma_align, size=text.shape)


def decode_demand_prototype(universe: Universe, demand_embedding: np.ndarray) -> int:
    """Nearest-prototype decode of a demand embedding (via the map pseudoinverse)."""
    if universe._pinv_demand is None:
        universe._pinv_demand = np.linalg.pinv(universe.map_demand)
    latent = universe._pinv_demand @ demand_embedding
    latent = latent / max(np.linalg.norm(latent), 1e-12)
    sims = universe.prototypes @ latent
    return int(np.argmax(sims))


def decode_visual_category(universe: Universe, visual_embedding: np.ndarray) -> int:
    """Nearest-category decode of a visual embedding (shared-space lookup)."""
    best, best_d = -1, math.inf
    for cat in universe.categories:
        d = float(np.linalg.norm(cat.text_embedding - visual_embedding))
        if d < best_d:
            best, best_d = cat.category_id, d
    return best


# ---------------------------------------------------------------------------
# Persistence (full precision, so reload is bit-exact)

def universe_to_dict(universe: Universe) -> dict:
    import dataclasses as _dc
    return {
        "seed": universe.seed,
        "config": _dc.asdict(universe.config),
        "prototypes": universe.prototypes.tolist(),
        "map_demand": universe.map_demand.tolist(),
        "map_object": universe.map_object.tolist(),
        "categories": [
            {"id": c.category_id, "name": c.name,
             "prototypes": list(c.prototype_ids),
             "text_embedding": c.text_embedding.tolist()}
            for c in universe.categories
        ],
        "demands": [
            {"id": d.demand_id, "prototype": d.prototype_id,
             "tokens": list(d.tokens),
             "embedding": d.embedding.tolist()}
            for d in universe.demands
        ],
    }


def universe_from_dict(data: dict) -> Universe:
    config = UniverseConfig(**data["config"])
    categories = [
        Category(category_id=c["id"], name=c["name"],
                 prototype_ids=tuple(c["prototypes"]),
                 text_embedding=np.array(c["text_embedding"]))
        for c in data["categories"]
    ]
    demands = [
        Demand(demand_id=d["id"], prototype_id=d["prototype"],
               tokens=tuple(d["tokens"]),
               embedding=np.array(d["embedding"]))
        for d in data["demands"]
    ]
    return Universe(config=config, seed=data["seed"],
                    prototypes=np.array(data["prototypes"]),
                    map_demand=np.array(data["map_demand"]),
                    map_object=np.array(data["map_object"]),
                    categories=categories, demands=demands)
