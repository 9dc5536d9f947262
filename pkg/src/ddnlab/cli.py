"""Command-line pipeline.

    gen-universe  -> universe.json
    gen-scenes    -> scenes.json (train + test rooms)
    gen-mappings  -> mappings.json (wg, lg, demand split)
    collect-traj  -> trajectories.jsonl
    train-attr    -> attribute checkpoint (+ loss csv)
    train-policy  -> policy checkpoint (bundles the attribute encoder it uses)
    train-grounder-> grounder checkpoint (+ frames jsonl)
    eval          -> results.csv (+ per-episode jsonl)
    report        -> merged comparison table (csv + aligned text)

Every artifact embeds the config (full dict in JSON artifacts, hash columns
in CSV) plus the seed, and downstream artifacts carry the universe hash so
`report` can refuse to merge results from different universes.

Exit codes: 0 success, 1 validation error, 2 runtime error, 64 usage error.
Set DDN_LAB_THREADS to run evaluation episodes on a thread pool; results are
identical at any thread count.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np
import torch

from . import attribute, demands, evalharness, expert, grounding, policy
from .config import RunConfig, desk_config, load_config
from .errors import MissingResults, ValidationError
from .nets import load_checkpoint, save_checkpoint
from .worldcore import GridScene, generate_scene, scene_from_dict, scene_to_dict

AGENTS = ("random", "scripted", "policy", "policy-no-attr", "oracle")
RESULT_COLUMNS = ("agent", "split", "metric", "mean", "sample_std",
                  "n_seeds", "n_episodes", "seed", "config_hash",
                  "universe_hash")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(64)


def _derive_int(*key: int) -> int:
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def _file_hash(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        digest.update(fh.read())
    return digest.hexdigest()[:16]


def _meta(cfg: RunConfig, seed: int, **extra) -> dict:
    meta = {"config": cfg.to_dict(), "config_hash": cfg.config_hash(),
            "seed": seed}
    meta.update(extra)
    return meta


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def _read_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}") from exc


def _load_universe(path: str) -> tuple[demands.Universe, str]:
    data = _read_json(path)
    return demands.universe_from_dict(data), _file_hash(path)


def _load_scenes(path: str) -> tuple[list[GridScene], list[GridScene], dict]:
    data = _read_json(path)
    train = [scene_from_dict(s) for s in data["train"]]
    test = [scene_from_dict(s) for s in data["test"]]
    return train, test, data.get("_meta", {})


def _load_mappings(path: str) -> dict:
    data = _read_json(path)
    data["wg"] = {int(d): frozenset(cats) for d, cats in data["wg"].items()}
    data["lg"] = {int(d): tuple(cats) for d, cats in data["lg"].items()}
    return data


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else desk_config()
    cfg.validate()
    return cfg


def _resolve_seed(args, cfg: RunConfig) -> int:
    return cfg.seed if args.seed is None else args.seed


# ---------------------------------------------------------------------------
# Subcommands

def _cmd_gen_universe(args) -> int:
    cfg = _resolve_config(args)
    seed = _resolve_seed(args, cfg)
    universe = demands.generate_universe(cfg.universe, seed)
    payload = {"_meta": _meta(cfg, seed), **demands.universe_to_dict(universe)}
    _write_json(args.out, payload)
    print(f"gen-universe: {len(universe.demands)} demands, "
          f"{len(universe.categories)} categories -> {args.out}")
    return 0


def _cmd_gen_scenes(args) -> int:
    cfg = _resolve_config(args)
    seed = _resolve_seed(args, cfg)
    universe, universe_hash = _load_universe(args.universe)

    cat_ids = universe.category_ids()
    pool_rng = np.random.default_rng(np.random.SeedSequence((seed, 0x9001)))
    n_pool = max(1, round(cfg.split.scene_pool_fraction * len(cat_ids)))
    pool = tuple(sorted(cat_ids[i]
                        for i in pool_rng.permutation(len(cat_ids))[:n_pool]))

    def make(count: int, prefix: str, tag: int) -> list[GridScene]:
        out = []
        for i in range(count):
            scfg = dataclasses.replace(cfg.scene, category_pool=pool,
                                       id_prefix=f"{prefix}{i:03d}")
            out.append(generate_scene(scfg, _derive_int(seed, tag, i)))
        return out

    train = make(cfg.split.n_train_scenes, "tr", 0x5C1)
    test = make(cfg.split.n_test_scenes, "te", 0x5C2)
    payload = {
        "_meta": _meta(cfg, seed, universe_hash=universe_hash,
                       category_pool=list(pool)),
        "train": [scene_to_dict(s) for s in train],
        "test": [scene_to_dict(s) for s in test],
    }
    _write_json(args.out, payload)
    print(f"gen-scenes: {len(train)} train + {len(test)} test scenes "
          f"(pool {len(pool)} categories) -> {args.out}")
    return 0


def _cmd_gen_mappings(args) -> int:
    cfg = _resolve_config(args)
    seed = _resolve_seed(args, cfg)
    universe, universe_hash = _load_universe(args.universe)
    train_scenes, test_scenes, _ = _load_scenes(args.scenes)

    present = set()
    for scene in train_scenes + test_scenes:
        present |= scene.category_set
    wg = demands.build_wg_mappings(universe, present)
    lg = demands.build_lg_mappings(universe, cfg.split.lg_objects_per_demand,
                                   seed=_derive_int(seed, 0x16))
    train_d, test_d = demands.split_demands(
        universe, cfg.split.n_train_demands, cfg.split.n_test_demands,
        seed=_derive_int(seed, 0x517))
    payload = {
        "_meta": _meta(cfg, seed, universe_hash=universe_hash),
        "scene_pool": sorted(present),
        "wg": {str(d): sorted(cats) for d, cats in sorted(wg.items())},
        "lg": {str(d): list(cats) for d, cats in sorted(lg.items())},
        "split": {"train": train_d, "test": test_d},
    }
    _write_json(args.out, payload)
    print(f"gen-mappings: wg {len(wg)} demands over {len(present)} present "
          f"categories, split {len(train_d)}/{len(test_d)} -> {args.out}")
    return 0


def _cmd_collect_traj(args) -> int:
    cfg = _resolve_config(args)
    seed = _resolve_seed(args, cfg)
    universe, universe_hash = _load_universe(args.universe)
    train_scenes, _, _ = _load_scenes(args.scenes)
    mappings = _load_mappings(args.mappings)
    train_demands = set(mappings["split"]["train"])
    wg_train = {d: cats for d, cats in mappings["wg"].items()
                if d in train_demands}

    t = cfg.thresholds
    trajectories, skipped = expert.collect_trajectories(
        train_scenes, universe, wg_train,
        per_demand=cfg.expert.trajectories_per_demand, seed=seed,
        k=t.k_detections, sigma_logit=t.sigma_logit, sigma_align=t.sigma_align,
        step_limit=t.step_limit, margin=t.planning_margin)
    lengths = [len(tr.actions) for tr in trajectories]
    expert.write_trajectories_jsonl(
        args.out, trajectories,
        meta=_meta(cfg, seed, universe_hash=universe_hash, skipped=skipped))
    mean_len = float(np.mean(lengths)) if lengths else 0.0
    print(f"collect-traj: {len(trajectories)} trajectories "
          f"(mean {mean_len:.2f} frames, skipped {skipped}) -> {args.out}")
    return 0


def _cmd_train_attr(args) -> int:
    cfg = _resolve_config(args)
    seed = _resolve_seed(args, cfg)
    universe, universe_hash = _load_universe(args.universe)
    mappings = _load_mappings(args.mappings)

    torch.manual_seed(_derive_int(seed, 0xA001))
    encoder = attribute.AttributeEncoder(
        input_dim=cfg.universe.demand_dim + cfg.universe.object_dim,
        hidden_dim=cfg.attribute.hidden_dim, depth=cfg.attribute.depth,
        output_dim=cfg.attribute.attribute_dim)
    history = attribute.train_attribute(encoder, universe, mappings["lg"],
                                        cfg.attribute, seed)
    save_checkpoint(args.out, encoder,
                    _meta(cfg, seed, universe_hash=universe_hash,
                          kind="attribute_encoder"))
    if args.loss_csv:
        with open(args.loss_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            for i, loss in enumerate(history):
                writer.writerow([i, f"{loss:.6f}"])
    tail = float(np.mean(history[-50:])) if history else float("nan")
    print(f"train-attr: {len(history)} steps, final smoothed loss "
          f"{tail:.4f} -> {args.out}")
    return 0


def _cmd_train_policy(args) -> int:
    cfg = _resolve_config(args)
    seed = _resolve_seed(args, cfg)
    universe, universe_hash = _load_universe(args.universe)
    trajectories, _ = expert.read_trajectories_jsonl(args.traj)
    if not trajectories:
        raise ValidationError(f"no trajectories in {args.traj}")

    hyper = cfg.policy
    torch.manual_seed(_derive_int(seed, 0xA002))
    encoder = attribute.AttributeEncoder(
        input_dim=cfg.universe.demand_dim + cfg.universe.object_dim,
        hidden_dim=cfg.attribute.hidden_dim, depth=cfg.attribute.depth,
        output_dim=cfg.attribute.attribute_dim)
    if args.arm == "attr":
        if not args.attr_checkpoint:
            raise ValidationError("--attr-checkpoint is required for --arm attr")
        load_checkpoint(args.attr_checkpoint, encoder)
        hyper = dataclasses.replace(hyper, train_encoder=False)
    else:
        # encoder keeps its seeded random init and trains jointly
        hyper = dataclasses.replace(hyper, train_encoder=True)

    torch.manual_seed(_derive_int(seed, 0x90A))
    net = policy.PolicyNet(hyper, attribute_dim=cfg.attribute.attribute_dim,
                           demand_dim=cfg.universe.demand_dim)
    history = policy.train_policy(net, encoder, trajectories, universe,
                                  hyper, seed)
    save_checkpoint(args.out, net,
                    _meta(cfg, seed, universe_hash=universe_hash,
                          kind="policy", arm=args.arm),
                    extra_modules={"attribute_encoder": encoder})
    if args.log_csv:
        with open(args.log_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "train_accuracy", "val_accuracy"])
            for entry in history:
                writer.writerow([entry["step"], f"{entry['loss']:.6f}",
                                 f"{entry['train_accuracy']:.4f}",
                                 f"{entry.get('val_accuracy', '')}"])
    final_acc = history[-1]["train_accuracy"] if history else float("nan")
    print(f"train-policy[{args.arm}]: {len(history)} steps on "
          f"{len(trajectories)} trajectories, final train acc "
          f"{final_acc:.3f} -> {args.out}")
    return 0


def _cmd_train_grounder(args) -> int:
    cfg = _resolve_config(args)
    seed = _resolve_seed(args, cfg)
    universe, universe_hash = _load_universe(args.universe)
    train_scenes, _, _ = _load_scenes(args.scenes)
    mappings = _load_mappings(args.mappings)
    train_demands = set(mappings["split"]["train"])
    wg_train = {d: cats for d, cats in mappings["wg"].items()
                if d in train_demands}

    t = cfg.thresholds
    frames, stats = grounding.collect_grounding_data(
        train_scenes, universe, wg_train,
        frames_per_scene=cfg.grounding_data.frames_per_scene, seed=seed,
        k=t.k_detections, sigma_logit=t.sigma_logit,
        sigma_align=t.sigma_align, c_navi=t.c_navi)
    if args.frames_out:
        grounding.write_frames_jsonl(
            args.frames_out, frames,
            meta=_meta(cfg, seed, universe_hash=universe_hash, stats=stats))

    torch.manual_seed(_derive_int(seed, 0x6001))
    net = grounding.GrounderNet(cfg.grounder,
                                object_dim=cfg.universe.object_dim,
                                demand_dim=cfg.universe.demand_dim)
    history = grounding.train_grounder(net, frames, universe, cfg.grounder, seed)
    save_checkpoint(args.out, net,
                    _meta(cfg, seed, universe_hash=universe_hash,
                          kind="grounder", n_frames=len(frames)))
    if args.log_csv:
        with open(args.log_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "train_accuracy", "val_accuracy"])
            for entry in history:
                writer.writerow([entry["epoch"], f"{entry['loss']:.6f}",
                                 f"{entry['train_accuracy']:.4f}",
                                 f"{entry.get('val_accuracy', '')}"])
    val_acc = history[-1].get("val_accuracy") if history else None
    print(f"train-grounder: {len(frames)} frames ({stats}), held-out acc "
          f"{val_acc if val_acc is not None else 'n/a'} -> {args.out}")
    return 0


def _build_agent(args, cfg: RunConfig, universe, mappings):
    t = cfg.thresholds
    if args.agent == "random":
        return policy.RandomAgent(p_done=t.p_done)
    if args.agent == "scripted":
        return policy.ScriptedTargetAgent(universe, mappings["lg"])
    if args.agent == "oracle":
        return policy.OracleAgent(universe, margin=t.planning_margin)
    if args.agent in ("policy", "policy-no-attr"):
        if not args.policy:
            raise ValidationError(f"--policy checkpoint required for "
                                  f"--agent {args.agent}")
        encoder = attribute.AttributeEncoder(
            input_dim=cfg.universe.demand_dim + cfg.universe.object_dim,
            hidden_dim=cfg.attribute.hidden_dim, depth=cfg.attribute.depth,
            output_dim=cfg.attribute.attribute_dim)
        net = policy.PolicyNet(cfg.policy,
                               attribute_dim=cfg.attribute.attribute_dim,
                               demand_dim=cfg.universe.demand_dim)
        meta = load_checkpoint(args.policy, net,
                               extra_modules={"attribute_encoder": encoder})
        expect = "no-attr" if args.agent == "policy-no-attr" else "attr"
        if meta.get("arm") not in (None, expect):
            raise ValidationError(
                f"checkpoint {args.policy} was trained with arm "
                f"{meta.get('arm')!r}, expected {expect!r}")
        return policy.PolicyAgent(net, encoder)
    raise ValidationError(f"unknown agent {args.agent!r}")


def _cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    seed = _resolve_seed(args, cfg)
    universe, universe_hash = _load_universe(args.universe)
    train_scenes, test_scenes, _ = _load_scenes(args.scenes)
    mappings = _load_mappings(args.mappings)

    grounder = grounding.GrounderNet(cfg.grounder,
                                     object_dim=cfg.universe.object_dim,
                                     demand_dim=cfg.universe.demand_dim)
    load_checkpoint(args.grounder, grounder)
    agent = _build_agent(args, cfg, universe, mappings)

    train_d, test_d = mappings["split"]["train"], mappings["split"]["test"]
    scene_sets = {"s": train_scenes, "u": test_scenes}
    demand_sets = {"s": train_d, "u": test_d}
    wanted = evalharness.SPLITS if args.split == "all" else (args.split,)
    split_pairs = {}
    for split in wanted:
        split_pairs[split] = evalharness.build_split_pairs(
            scene_sets[split[0]], demand_sets[split[1]], universe,
            cfg.eval.episodes_per_split,
            seed=_derive_int(cfg.seed, 0xE9, evalharness.SPLITS.index(split)))

    scenes_by_id = {s.scene_id: s for s in train_scenes + test_scenes}
    seeds = [seed + i for i in range(cfg.eval.n_seeds)]
    threads = int(os.environ.get("DDN_LAB_THREADS", "1"))
    t = cfg.thresholds
    table, episode_log = evalharness.evaluate(
        agent, grounder, split_pairs, scenes_by_id, universe, seeds,
        k=t.k_detections, sigma_logit=t.sigma_logit, sigma_align=t.sigma_align,
        c_navi=t.c_navi, c_sele=t.c_sele, planning_margin=t.planning_margin,
        step_limit=t.step_limit, threads=max(threads, 1))

    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for row in table.rows():
            row.update({"agent": args.agent, "seed": seed,
                        "config_hash": cfg.config_hash(),
                        "universe_hash": universe_hash})
            writer.writerow(row)
    _write_json(args.out + ".meta.json", _meta(cfg, seed,
                                               universe_hash=universe_hash,
                                               agent=args.agent))
    if args.episode_log:
        with open(args.episode_log, "w") as fh:
            fh.write(json.dumps({"_meta": _meta(cfg, seed,
                                                universe_hash=universe_hash,
                                                agent=args.agent)}) + "\n")
            for record in episode_log:
                fh.write(json.dumps(record) + "\n")

    summary = ", ".join(
        f"{split} NSR {table.entries[split]['NSR'][0]:.1f}"
        for split in wanted if split in table.entries)
    print(f"eval[{args.agent}]: {summary} -> {args.out}")
    return 0


def _cmd_report(args) -> int:
    files = sorted(
        os.path.join(args.results_dir, name)
        for name in os.listdir(args.results_dir)
        if name.endswith(".csv") and not name.startswith(
            os.path.basename(args.out_prefix)))
    rows = []
    for path in files:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or \
                    set(RESULT_COLUMNS) - set(reader.fieldnames):
                continue
            rows.extend(list(reader))
    if not rows:
        raise MissingResults(f"no results csv files in {args.results_dir}")
    hashes = {row["universe_hash"] for row in rows}
    if len(hashes) > 1:
        raise ValidationError(
            f"refusing to merge results from different universes: {sorted(hashes)}")

    rows.sort(key=lambda r: (r["agent"], r["split"], r["metric"]))
    merged_path = args.out_prefix + ".csv"
    with open(merged_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)

    cell: dict[tuple[str, str, str], str] = {}
    agents = sorted({row["agent"] for row in rows})
    for row in rows:
        text = f"{float(row['mean']):.1f}({float(row['sample_std']):.1f})"
        cell[(row["agent"], row["split"], row["metric"])] = text

    width = 12
    header1 = f"{'agent':<16}|" + "|".join(
        f"{evalharness.SPLIT_LABELS[s]:^{3 * width + 2}}"
        for s in evalharness.SPLITS)
    header2 = f"{'':<16}|" + "|".join(
        " ".join(f"{m:^{width}}" for m in evalharness.METRICS)
        for _s in evalharness.SPLITS)
    lines = [header1, header2, "-" * len(header2)]
    for agent in agents:
        parts = []
        for split in evalharness.SPLITS:
            parts.append(" ".join(
                f"{cell.get((agent, split, m), '-'):^{width}}"
                for m in evalharness.METRICS))
        lines.append(f"{agent:<16}|" + "|".join(parts))
    text_path = args.out_prefix + ".txt"
    with open(text_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"report: {len(agents)} agents, {len(rows)} rows -> "
          f"{merged_path}, {text_path}")
    return 0


# ---------------------------------------------------------------------------
# Parser

def _build_parser() -> _Parser:
    parser = _Parser(prog="ddnlab", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="path to a JSON run config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")

    p = sub.add_parser("gen-universe")
    common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-scenes")
    common(p)
    p.add_argument("--universe", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-mappings")
    common(p)
    p.add_argument("--universe", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("collect-traj")
    common(p)
    p.add_argument("--universe", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--mappings", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-attr")
    common(p)
    p.add_argument("--universe", required=True)
    p.add_argument("--mappings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv")

    p = sub.add_parser("train-policy")
    common(p)
    p.add_argument("--universe", required=True)
    p.add_argument("--traj", required=True)
    p.add_argument("--arm", choices=("attr", "no-attr"), default="attr")
    p.add_argument("--attr-checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--log-csv")

    p = sub.add_parser("train-grounder")
    common(p)
    p.add_argument("--universe", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--mappings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames-out")
    p.add_argument("--log-csv")

    p = sub.add_parser("eval")
    common(p)
    p.add_argument("--universe", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--mappings", required=True)
    p.add_argument("--grounder", required=True)
    p.add_argument("--agent", choices=AGENTS, required=True)
    p.add_argument("--policy", help="policy checkpoint (policy agents only)")
    p.add_argument("--split", choices=evalharness.SPLITS + ("all",),
                   default="all")
    p.add_argument("--out", required=True)
    p.add_argument("--episode-log")

    p = sub.add_parser("report")
    p.add_argument("--results-dir", required=True)
    p.add_argument("--out-prefix", required=True)

    return parser


_HANDLERS = {
    "gen-universe": _cmd_gen_universe,
    "gen-scenes": _cmd_gen_scenes,
    "gen-mappings": _cmd_gen_mappings,
    "collect-traj": _cmd_collect_traj,
    "train-attr": _cmd_train_attr,
    "train-policy": _cmd_train_policy,
    "train-grounder": _cmd_train_grounder,
    "eval": _cmd_eval,
    "report": _cmd_report,
}


def cli_dispatch(argv: list[str]) -> int:
    torch.set_num_threads(1)  # keeps float reductions identical run to run
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 64
    try:
        return _HANDLERS[args.command](args)
    except (ValidationError, MissingResults) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    raise SystemExit(cli_dispatch(sys.argv[1:]))
