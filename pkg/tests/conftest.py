import dataclasses

import numpy as np
import pytest
import torch

from ddnlab import demands, worldcore
from ddnlab.config import smoke_config

torch.set_num_threads(1)


def make_toy_universe(sat_sets: dict[int, tuple[int, ...]],
                      n_demands: int, seed: int = 0) -> demands.Universe:
    """Hand-built universe: one orthogonal prototype per demand; category c
    owns exactly the prototypes of the demands in sat_sets[c]."""
    latent_dim = max(n_demands, 2)
    cfg = dataclasses.replace(
        smoke_config().universe, n_prototypes=max(n_demands, 2),
        n_categories=max(len(sat_sets), 2), n_demands=n_demands,
        latent_dim=latent_dim)
    rng = np.random.default_rng(seed)
    prototypes = np.eye(max(n_demands, 2), latent_dim)
    map_demand = rng.normal(0, cfg.map_scale, (cfg.demand_dim, latent_dim))
    map_object = rng.normal(0, cfg.map_scale, (cfg.object_dim, latent_dim))
    categories = []
    for cid, protos in sorted(sat_sets.items()):
        mean_proto = prototypes[list(protos)].mean(axis=0)
        emb = map_object @ mean_proto + rng.normal(0, cfg.signature_noise,
                                                   cfg.object_dim)
        categories.append(demands.Category(
            category_id=cid, name=f"cat{cid:03d}",
            prototype_ids=tuple(sorted(protos)), text_embedding=emb))
    dems = []
    for did in range(n_demands):
        emb = map_demand @ (prototypes[did]
                            + rng.normal(0, cfg.demand_noise, latent_dim))
        dems.append(demands.Demand(demand_id=did, prototype_id=did,
                                   tokens=("need", f"purpose-{did:03d}"),
                                   embedding=emb))
    return demands.Universe(config=cfg, seed=seed, prototypes=prototypes,
                            map_demand=map_demand, map_object=map_object,
                            categories=categories, demands=dems)


def open_room(width: int = 16, height: int = 16,
              objects: list[worldcore.ObjectInstance] | None = None,
              scene_id: str = "room") -> worldcore.GridScene:
    blocked = np.zeros((height, width), dtype=bool)
    blocked[0, :] = blocked[-1, :] = True
    blocked[:, 0] = blocked[:, -1] = True
    return worldcore.GridScene(scene_id=scene_id, width=width, height=height,
                               blocked=blocked, objects=objects or [])


@pytest.fixture(scope="session")
def smoke_universe():
    return demands.generate_universe(smoke_config().universe, seed=1)


@pytest.fixture(scope="session")
def smoke_world(smoke_universe):
    """A small ready-made world: scenes, mappings, splits."""
    import warnings
    cfg = smoke_config()
    u = smoke_universe
    rng = np.random.default_rng(2)
    cat_ids = u.category_ids()
    n_pool = round(cfg.split.scene_pool_fraction * len(cat_ids))
    pool = tuple(sorted(cat_ids[i]
                        for i in rng.permutation(len(cat_ids))[:n_pool]))
    scenes = [worldcore.generate_scene(
        dataclasses.replace(cfg.scene, category_pool=pool,
                            id_prefix=f"tr{i:03d}"), 300 + i)
        for i in range(4)]
    present = set().union(*[s.category_set for s in scenes])
    wg = demands.build_wg_mappings(u, present)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lg = demands.build_lg_mappings(u, cfg.split.lg_objects_per_demand,
                                       seed=4)
    train_d, test_d = demands.split_demands(
        u, cfg.split.n_train_demands, cfg.split.n_test_demands, seed=5)
    return {
        "config": cfg, "universe": u, "scenes": scenes, "pool": pool,
        "wg": wg, "lg": lg, "train_demands": train_d, "test_demands": test_d,
        "wg_train": {d: c for d, c in wg.items() if d in set(train_d)},
    }
