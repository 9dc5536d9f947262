"""Acceptance criteria, one test per criterion.

Run with `pytest tests/test_acceptance.py -s` to see one PASS/FAIL line per
criterion. The desk-scale fixture (30 train scenes, 80 train demands,
~1500 expert trajectories, 3 evaluation seeds, 200 episodes per split) is
built once and shared; the whole module needs roughly an hour of desktop CPU.
"""

import dataclasses
import json
import os
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

import oracles
from conftest import make_toy_universe
from ddnlab import (attribute, demands, evalharness, expert, grounding,
                    policy, worldcore)
from ddnlab.cli import cli_dispatch
from ddnlab.config import desk_config, smoke_config
from ddnlab.nets import max_grad_rel_err


@contextmanager
def criterion(name: str):
    start = time.time()
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {name}: FAIL ({time.time() - start:.1f}s)")
        raise
    print(f"ACCEPTANCE {name}: PASS ({time.time() - start:.1f}s)")


def _log(msg: str) -> None:
    print(f"[desk] {msg}", flush=True)


@pytest.fixture(scope="module")
def desk():
    """The full desk-scale pipeline, built once."""
    t0 = time.time()
    cfg = desk_config()
    t = cfg.thresholds
    u = demands.generate_universe(cfg.universe, cfg.seed)

    cat_ids = u.category_ids()
    pool_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x9001)))
    n_pool = round(cfg.split.scene_pool_fraction * len(cat_ids))
    pool = tuple(sorted(cat_ids[i]
                        for i in pool_rng.permutation(len(cat_ids))[:n_pool]))
    train_scenes = [worldcore.generate_scene(
        dataclasses.replace(cfg.scene, category_pool=pool,
                            id_prefix=f"tr{i:03d}"), 10_000 + i)
        for i in range(cfg.split.n_train_scenes)]
    test_scenes = [worldcore.generate_scene(
        dataclasses.replace(cfg.scene, category_pool=pool,
                            id_prefix=f"te{i:03d}"), 20_000 + i)
        for i in range(cfg.split.n_test_scenes)]
    present = set().union(*[s.category_set for s in train_scenes + test_scenes])
    wg = demands.build_wg_mappings(u, present)
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lg = demands.build_lg_mappings(u, cfg.split.lg_objects_per_demand,
                                       seed=cfg.seed)
    train_d, test_d = demands.split_demands(
        u, cfg.split.n_train_demands, cfg.split.n_test_demands, seed=cfg.seed)
    wg_train = {d: c for d, c in wg.items() if d in set(train_d)}
    _log(f"world built in {time.time() - t0:.0f}s "
         f"({len(wg_train)} satisfiable train demands)")

    trajectories, skipped = expert.collect_trajectories(
        train_scenes, u, wg_train,
        per_demand=cfg.expert.trajectories_per_demand, seed=cfg.seed,
        k=t.k_detections, sigma_logit=t.sigma_logit,
        sigma_align=t.sigma_align, step_limit=t.step_limit,
        margin=t.planning_margin)
    _log(f"{len(trajectories)} trajectories "
         f"(mean {np.mean([len(tr.actions) for tr in trajectories]):.1f} "
         f"frames, skipped {skipped}) at {time.time() - t0:.0f}s")

    torch.manual_seed(1000)
    encoder = attribute.AttributeEncoder()
    attr_history = attribute.train_attribute(encoder, u, lg, cfg.attribute,
                                             seed=cfg.seed)
    _log(f"attribute encoder trained (final loss "
         f"{np.mean(attr_history[-50:]):.4f}) at {time.time() - t0:.0f}s")

    torch.manual_seed(2000)
    net_attr = policy.PolicyNet(cfg.policy)
    policy.train_policy(net_attr, encoder, trajectories, u, cfg.policy,
                        seed=cfg.seed)
    _log(f"policy[attr] trained at {time.time() - t0:.0f}s")

    torch.manual_seed(3000)
    encoder_na = attribute.AttributeEncoder()
    torch.manual_seed(3001)
    net_na = policy.PolicyNet(cfg.policy)
    policy.train_policy(net_na, encoder_na, trajectories, u,
                        dataclasses.replace(cfg.policy, train_encoder=True),
                        seed=cfg.seed)
    _log(f"policy[no-attr] trained at {time.time() - t0:.0f}s")

    frames, _stats = grounding.collect_grounding_data(
        train_scenes, u, wg_train,
        frames_per_scene=cfg.grounding_data.frames_per_scene, seed=cfg.seed,
        k=t.k_detections, sigma_logit=t.sigma_logit,
        sigma_align=t.sigma_align, c_navi=t.c_navi)
    torch.manual_seed(4000)
    grounder = grounding.GrounderNet(cfg.grounder)
    grounding.train_grounder(grounder, frames, u, cfg.grounder, seed=cfg.seed)
    _log(f"grounder trained on {len(frames)} frames at {time.time() - t0:.0f}s")

    scene_sets = {"s": train_scenes, "u": test_scenes}
    demand_sets = {"s": train_d, "u": test_d}
    split_pairs = {}
    for idx, split in enumerate(evalharness.SPLITS):
        split_pairs[split] = evalharness.build_split_pairs(
            scene_sets[split[0]], demand_sets[split[1]], u,
            cfg.eval.episodes_per_split, seed=1000 + idx)
    scenes_by_id = {s.scene_id: s for s in train_scenes + test_scenes}
    seeds = [cfg.seed + i for i in range(cfg.eval.n_seeds)]

    agents = {
        "random": policy.RandomAgent(p_done=t.p_done),
        "oracle": policy.OracleAgent(u, margin=t.planning_margin),
        "policy": policy.PolicyAgent(net_attr, encoder),
        "policy-no-attr": policy.PolicyAgent(net_na, encoder_na),
    }
    tables, logs = {}, {}
    for name, agent in agents.items():
        tables[name], logs[name] = evalharness.evaluate(
            agent, grounder, split_pairs, scenes_by_id, u, seeds,
            k=t.k_detections, sigma_logit=t.sigma_logit,
            sigma_align=t.sigma_align, c_navi=t.c_navi, c_sele=t.c_sele,
            planning_margin=t.planning_margin, step_limit=t.step_limit)
        ss = tables[name].entries["ss"]
        _log(f"eval[{name}] ss NSR={ss['NSR'][0]:.1f} "
             f"NSPL={ss['NSPL'][0]:.1f} SSR={ss['SSR'][0]:.1f} "
             f"at {time.time() - t0:.0f}s")

    return {
        "config": cfg, "universe": u, "pool": pool,
        "train_scenes": train_scenes, "test_scenes": test_scenes,
        "wg": wg, "wg_train": wg_train, "lg": lg,
        "train_demands": train_d, "test_demands": test_d,
        "trajectories": trajectories, "encoder": encoder,
        "tables": tables, "logs": logs,
    }


# ---------------------------------------------------------------------------
# 1. Pair-rule oracle equivalence

def test_criterion_1_pair_rules():
    with criterion("1 pair-rule oracle equivalence"):
        # the worked example: three demands, objects a..i in disjoint triples
        u = make_toy_universe({c: (c // 3,) for c in range(9)}, n_demands=3)
        anchor = (0, 0)
        positives = {o for o in range(9)
                     if attribute.classify_pair(u, anchor, (0, o)) == "positive"}
        assert positives == {1, 2}
        assert attribute.classify_pair(u, anchor, (0, 3)) == "neg1"
        assert attribute.classify_pair(u, anchor, (1, 0)) == "neg2"
        assert attribute.classify_pair(u, anchor, (1, 2)) == "neg3"

        rng = np.random.default_rng(0)
        for trial in range(20):
            n_dem = int(rng.integers(2, 6))
            n_obj = int(rng.integers(2, 7))
            sat_sets = {
                c: tuple(rng.choice(n_dem,
                                    size=int(rng.integers(
                                        1, min(4, n_dem) + 1)),
                                    replace=False))
                for c in range(n_obj)}
            toy = make_toy_universe(sat_sets, n_demands=n_dem, seed=trial)
            # full enumeration equals the brute-force rule application
            for d in range(n_dem):
                for o in range(n_obj):
                    if not demands.satisfies(toy, d, o):
                        continue
                    for d2 in range(n_dem):
                        for o2 in range(n_obj):
                            assert attribute.classify_pair(
                                toy, (d, o), (d2, o2)) == \
                                oracles.pair_label_oracle(toy, (d, o), (d2, o2))
            # sampled batches carry labels consistent with the rules
            lg = {d.demand_id: tuple(demands.satisfying_categories(
                toy, d.demand_id)) for d in toy.demands}
            lg = {d: objs for d, objs in lg.items() if len(objs) >= 2}
            if len(lg) < 2:
                continue
            batch = attribute.construct_pairs(
                toy, lg, m_negatives=6, batch_size=8,
                rng=np.random.default_rng(trial))
            for b in range(8):
                anchor = batch.anchor_keys[b]
                assert oracles.pair_label_oracle(
                    toy, anchor, batch.positive_keys[b]) == "positive"
                for j, key in enumerate(batch.negative_keys[b]):
                    assert oracles.pair_label_oracle(toy, anchor, key) == \
                        f"neg{batch.negative_types[b, j]}"


# ---------------------------------------------------------------------------
# 2. Gradient correctness

def test_criterion_2_gradients():
    with criterion("2 gradient correctness"):
        rng = np.random.default_rng(7)

        worst_attr = 0.0
        for draw in range(20):
            torch.manual_seed(draw)
            enc = attribute.AttributeEncoder(input_dim=10, hidden_dim=12,
                                             depth=1, output_dim=6).double()
            a = torch.tensor(rng.standard_normal((4, 10)))
            p = torch.tensor(rng.standard_normal((4, 10)))
            n = torch.tensor(rng.standard_normal((4, 3, 10)))
            worst_attr = max(worst_attr, max_grad_rel_err(
                enc, lambda: attribute.info_nce_loss(enc(a), enc(p), enc(n),
                                                     0.1),
                rng, n_coords=25))
        assert worst_attr < 1e-4, worst_attr

        from ddnlab.config import PolicyHyper, GrounderHyper
        small_p = PolicyHyper(token_dim=32, n_heads=2, encoder_layers=1,
                              hidden_dim=32, action_embed_dim=8)
        worst_policy = 0.0
        for draw in range(20):
            torch.manual_seed(100 + draw)
            net = policy.PolicyNet(small_p, attribute_dim=16, demand_dim=8,
                                   global_dim=6).double()
            tokens = torch.tensor(rng.standard_normal((2, 4, 22)))
            query = torch.tensor(rng.standard_normal((2, 14)))
            acts = torch.tensor([int(rng.integers(6)), int(rng.integers(6))])

            def loss_fn():
                hidden = net.initial_state(2, dtype=torch.float64)
                prev = torch.tensor([6, 6])
                total = torch.zeros((), dtype=torch.float64)
                for _ in range(3):
                    logits, hidden = net(tokens, query, prev, hidden)
                    total = total + torch.nn.functional.cross_entropy(logits,
                                                                      acts)
                    prev = acts
                return total

            worst_policy = max(worst_policy,
                               max_grad_rel_err(net, loss_fn, rng,
                                                n_coords=25))
        assert worst_policy < 1e-4, worst_policy

        small_g = GrounderHyper(token_dim=32, n_heads=2, encoder_layers=1)
        worst_grounder = 0.0
        for draw in range(20):
            torch.manual_seed(200 + draw)
            net = grounding.GrounderNet(small_g, object_dim=8, demand_dim=8,
                                        global_dim=6).double()
            det = torch.tensor(rng.standard_normal((2, 5, 14)))
            glob = torch.tensor(rng.standard_normal((2, 6)))
            dem = torch.tensor(rng.standard_normal((2, 8)))
            labels = torch.tensor([int(rng.integers(5)),
                                   int(rng.integers(5))])
            worst_grounder = max(worst_grounder, max_grad_rel_err(
                net, lambda: torch.nn.functional.cross_entropy(
                    net(det, glob, dem), labels), rng, n_coords=25))
        assert worst_grounder < 1e-4, worst_grounder


# ---------------------------------------------------------------------------
# 3. Attribute clustering

def test_criterion_3_attribute_clustering(desk):
    with criterion("3 attribute clustering gap"):
        cfg = desk["config"]
        u = desk["universe"]
        lg = {d: o for d, o in desk["lg"].items() if len(o) >= 2}
        trained_gaps, untrained_gaps = [], []
        for seed in range(3):
            torch.manual_seed(5000 + seed)
            enc = attribute.AttributeEncoder()
            untrained_gaps.append(
                attribute.clustering_report(enc, u, lg).gap)
            attribute.train_attribute(enc, u, desk["lg"], cfg.attribute,
                                      seed=seed)
            trained_gaps.append(attribute.clustering_report(enc, u, lg).gap)
        _log(f"trained gaps {np.round(trained_gaps, 3)}, "
             f"untrained {np.round(untrained_gaps, 3)}")
        assert float(np.mean(trained_gaps)) >= 0.2
        assert abs(float(np.mean(untrained_gaps))) < 0.05


# ---------------------------------------------------------------------------
# 4. Planner optimality and expert success

def test_criterion_4_planner_optimality(desk):
    with criterion("4 planner optimality + expert success"):
        u = desk["universe"]
        pool = desk["pool"]
        rng = np.random.default_rng(4)
        cfg = dataclasses.replace(desk["config"].scene, category_pool=pool)
        for seed in range(100):
            scene = worldcore.generate_scene(cfg, 50_000 + seed)
            free = scene.free_cells()
            ix, iy = free[int(rng.integers(len(free)))]
            gx, gy = free[int(rng.integers(len(free)))]
            start = expert.PlanState(ix, iy, int(rng.integers(4)),
                                     int(rng.integers(3)))
            goals = {expert.PlanState(gx, gy, h, p)
                     for h in range(4) for p in range(3)}
            actions = expert.plan(scene, start.pose(), goals)
            assert len(actions) == oracles.bfs_plan_cost(scene, start, goals)

        scenes_by_id = {s.scene_id: s for s in desk["train_scenes"]}
        for traj in desk["trajectories"]:
            scene = scenes_by_id[traj.scene_id]
            state = worldcore.EpisodeState(pose=traj.start)
            for action in traj.actions:
                state, collided = worldcore.step(state, action, scene)
                assert not collided
            assert state.terminated
            assert evalharness.is_nav_success(scene, state.pose, u,
                                              traj.demand_id)


# ---------------------------------------------------------------------------
# 5. Metric fidelity

def test_criterion_5_metric_fidelity(desk):
    with criterion("5 metric fidelity"):
        a = worldcore.BBox(0, 0, 2, 2)
        b = worldcore.BBox(1, 1, 3, 3)
        assert evalharness.iou(a, b) == pytest.approx(1 / 7, abs=1e-12)
        assert abs(evalharness.iou(a, b) - oracles.raster_iou(a, b)) < 1e-3

        res = evalharness.EpisodeResult
        mk = lambda nav, p, l: res(nav, False, 1, p, l, None)
        assert evalharness.spl([mk(False, 1.0, 1.0)]) == 0.0
        assert evalharness.spl([mk(True, 2.0, 2.0)]) == 1.0
        assert evalharness.spl([mk(True, 4.0, 2.0)]) == 0.5
        assert evalharness.spl([mk(True, 0.0, 0.0)]) == 1.0

        total = 0
        for log in desk["logs"].values():
            for record in log:
                assert record["sel_success"] <= record["nav_success"]
                total += 1
        assert total == 4 * 4 * 3 * 200  # agents x splits x seeds x episodes


# ---------------------------------------------------------------------------
# 6. Grounder sanity

def test_criterion_6_grounder_sanity(desk):
    with criterion("6 grounder sanity"):
        cfg = desk["config"]
        u = desk["universe"]
        frames, _ = grounding.collect_grounding_data(
            desk["train_scenes"], u, desk["wg_train"],
            frames_per_scene=cfg.grounding_data.frames_per_scene,
            seed=cfg.seed, k=cfg.thresholds.k_detections,
            sigma_logit=0.0, sigma_align=0.0, c_navi=cfg.thresholds.c_navi)
        untrained = []
        for seed in range(5):
            torch.manual_seed(6000 + seed)
            net = grounding.GrounderNet(cfg.grounder)
            untrained.append(grounding.grounder_accuracy(net, frames, u))
        mean_untrained = float(np.mean(untrained))
        _log(f"untrained accuracy {np.round(untrained, 3)} "
             f"(mean {mean_untrained:.4f})")
        assert abs(mean_untrained - 1 / 16) < 0.03

        torch.manual_seed(6100)
        net = grounding.GrounderNet(cfg.grounder)
        history = grounding.train_grounder(net, frames, u, cfg.grounder,
                                           seed=cfg.seed)
        held_out = history[-1]["val_accuracy"]
        _log(f"noiseless held-out accuracy {held_out:.4f}")
        assert held_out >= 0.90


# ---------------------------------------------------------------------------
# 7. End-to-end ordering

def test_criterion_7_end_to_end_ordering(desk):
    with criterion("7 end-to-end ordering"):
        tables = desk["tables"]
        nsr = {name: tables[name].entries["ss"]["NSR"][0] for name in tables}
        _log(f"seen/seen NSR: { {k: round(v, 2) for k, v in nsr.items()} }")
        for split in evalharness.SPLITS:
            assert tables["oracle"].entries[split]["NSR"][0] == 100.0
        assert nsr["policy"] >= 2.0 * nsr["random"]
        assert nsr["policy"] >= nsr["policy-no-attr"]


# ---------------------------------------------------------------------------
# 8. Determinism

def test_criterion_8_determinism(tmp_path):
    with criterion("8 artifact determinism"):
        start = time.time()
        cfg_path = tmp_path / "smoke.json"
        cfg_path.write_text(json.dumps(dataclasses.asdict(smoke_config())))
        c = str(cfg_path)

        def run_twice(args, out_flags):
            """Run a subcommand twice with fresh output paths; the artifact
            bytes must match. Returns the first run's primary output path."""
            primary = {}
            contents = []
            for tag in ("x", "y"):
                argv = list(args)
                batch = {}
                for flag, name in out_flags:
                    path = str(tmp_path / f"{tag}_{name}")
                    argv += [flag, path]
                    batch[name] = path
                assert cli_dispatch(argv) == 0, argv
                if tag == "x":
                    primary = batch
                contents.append({name: open(p, "rb").read()
                                 for name, p in batch.items()})
            assert contents[0] == contents[1], args[0]
            return primary

        universe = run_twice(["gen-universe", "--config", c],
                             [("--out", "universe.json")])["universe.json"]
        scenes = run_twice(["gen-scenes", "--config", c,
                            "--universe", universe],
                           [("--out", "scenes.json")])["scenes.json"]
        mappings = run_twice(["gen-mappings", "--config", c,
                              "--universe", universe, "--scenes", scenes],
                             [("--out", "mappings.json")])["mappings.json"]
        traj = run_twice(["collect-traj", "--config", c,
                          "--universe", universe, "--scenes", scenes,
                          "--mappings", mappings],
                         [("--out", "traj.jsonl")])["traj.jsonl"]
        attr_ckpt = run_twice(["train-attr", "--config", c,
                               "--universe", universe,
                               "--mappings", mappings],
                              [("--out", "attr.json"),
                               ("--loss-csv", "loss.csv")])["attr.json"]
        run_twice(["train-policy", "--config", c, "--universe", universe,
                   "--traj", traj, "--arm", "attr",
                   "--attr-checkpoint", attr_ckpt],
                  [("--out", "policy.json")])
        run_twice(["train-policy", "--config", c, "--universe", universe,
                   "--traj", traj, "--arm", "no-attr"],
                  [("--out", "pnoattr.json")])
        grounder = run_twice(["train-grounder", "--config", c,
                              "--universe", universe, "--scenes", scenes,
                              "--mappings", mappings],
                             [("--out", "grounder.json"),
                              ("--frames-out", "frames.jsonl")])["grounder.json"]

        # parallel evaluation must be byte-identical to serial
        eval_args = ["eval", "--config", c, "--universe", universe,
                     "--scenes", scenes, "--mappings", mappings,
                     "--grounder", grounder, "--agent", "random"]
        outputs = []
        for tag, threads in (("t1", "1"), ("t2", "4"), ("t3", "1")):
            out = tmp_path / f"results_{tag}.csv"
            log = tmp_path / f"episodes_{tag}.jsonl"
            os.environ["DDN_LAB_THREADS"] = threads
            try:
                assert cli_dispatch(eval_args + ["--out", str(out),
                                                 "--episode-log",
                                                 str(log)]) == 0
            finally:
                os.environ.pop("DDN_LAB_THREADS", None)
            outputs.append((out.read_bytes(), log.read_bytes()))
        assert outputs[0] == outputs[1] == outputs[2]

        elapsed = time.time() - start
        # the smoke pipeline ran end-to-end twice within the 5-minute budget
        assert elapsed < 2 * 300, f"smoke pipeline too slow: {elapsed:.0f}s"
