#!/usr/bin/env python3
"""End-to-end smoke run: tiny world, every pipeline stage, all five agents.

Finishes in a couple of minutes on a laptop CPU. Artifacts land in
runs/smoke/ (override with --out-dir).
"""

import argparse
import dataclasses
import json
import pathlib
import sys
import time

from ddnlab.cli import cli_dispatch
from ddnlab.config import smoke_config


def sh(*argv: str) -> None:
    print(f"$ ddnlab {' '.join(argv)}")
    code = cli_dispatch(list(argv))
    if code != 0:
        sys.exit(code)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="runs/smoke")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "config.json"
    cfg_path.write_text(json.dumps(
        dataclasses.asdict(smoke_config(seed=args.seed)), indent=1))
    c = str(cfg_path)
    t0 = time.time()

    sh("gen-universe", "--config", c, "--out", f"{out}/universe.json")
    sh("gen-scenes", "--config", c, "--universe", f"{out}/universe.json",
       "--out", f"{out}/scenes.json")
    sh("gen-mappings", "--config", c, "--universe", f"{out}/universe.json",
       "--scenes", f"{out}/scenes.json", "--out", f"{out}/mappings.json")
    sh("collect-traj", "--config", c, "--universe", f"{out}/universe.json",
       "--scenes", f"{out}/scenes.json", "--mappings", f"{out}/mappings.json",
       "--out", f"{out}/trajectories.jsonl")
    sh("train-attr", "--config", c, "--universe", f"{out}/universe.json",
       "--mappings", f"{out}/mappings.json", "--out", f"{out}/attr.json",
       "--loss-csv", f"{out}/attr_loss.csv")
    sh("train-policy", "--config", c, "--universe", f"{out}/universe.json",
       "--traj", f"{out}/trajectories.jsonl", "--arm", "attr",
       "--attr-checkpoint", f"{out}/attr.json",
       "--out", f"{out}/policy.json", "--log-csv", f"{out}/policy_log.csv")
    sh("train-policy", "--config", c, "--universe", f"{out}/universe.json",
       "--traj", f"{out}/trajectories.jsonl", "--arm", "no-attr",
       "--out", f"{out}/policy_noattr.json")
    sh("train-grounder", "--config", c, "--universe", f"{out}/universe.json",
       "--scenes", f"{out}/scenes.json", "--mappings", f"{out}/mappings.json",
       "--out", f"{out}/grounder.json", "--frames-out", f"{out}/frames.jsonl")

    agents = [("random", []),
              ("scripted", []),
              ("oracle", []),
              ("policy", ["--policy", f"{out}/policy.json"]),
              ("policy-no-attr", ["--policy", f"{out}/policy_noattr.json"])]
    for name, extra in agents:
        sh("eval", "--config", c, "--universe", f"{out}/universe.json",
           "--scenes", f"{out}/scenes.json",
           "--mappings", f"{out}/mappings.json",
           "--grounder", f"{out}/grounder.json", "--agent", name, *extra,
           "--out", f"{out}/results_{name}.csv")
    sh("report", "--results-dir", str(out), "--out-prefix", f"{out}/summary")

    print(f"\ndone in {time.time() - t0:.0f}s; see {out}/summary.txt")
    print((out / "summary.txt").read_text())


if __name__ == "__main__":
    main()
