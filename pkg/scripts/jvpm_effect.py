"""Closed-loop success with and without latent alignment, over several post-training seeds.

    python scripts/jvpm_effect.py --out runs/effect --seeds 1 2 3
"""

import argparse
import csv
import math
from pathlib import Path

import numpy as np

from jvpm import config as cfgmod
from jvpm import synthworld as sw
from jvpm import training as tr


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--trajectories", type=int, default=200)
    p.add_argument("--data-seed", type=int, default=1)
    p.add_argument("--pre-steps", type=int, default=2000)
    p.add_argument("--post-steps", type=int, default=2000)
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--episodes", type=int, default=100)
    a = p.parse_args()

    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    sw.generate_dataset(a.trajectories, a.data_seed, out / "data")
    data = sw.load_dataset(out / "data")
    pre = tr.PretrainRun(cfgmod.apply(cfgmod.Config(), {"train.steps": str(a.pre_steps)}), data)
    pre.run()
    teacher = pre.checkpoint()

    rows = []
    for seed in a.seeds:
        cfg = cfgmod.apply(cfgmod.Config(), {"seed": str(seed), "train.steps": str(a.post_steps)})
        row = {"seed": seed}
        for jvpm in (True, False):
            run = tr.PosttrainRun(cfg, data, teacher if jvpm else None, jvpm=jvpm)
            run.run()
            pcfg, net = tr.load_policy(run.checkpoint())
            key = "jvpm" if jvpm else "no_jvpm"
            row[key] = sw.evaluate_closed_loop(tr.PolicyRunner(pcfg, net, seed=0), a.episodes, seed=0)
            row[key + "_mae"] = tr.offline_metrics(run.checkpoint(), data)["action_mae"]
        rows.append(row)
        print(row, flush=True)
    diffs = np.array([r["jvpm"] - r["no_jvpm"] for r in rows])
    se = diffs.std(ddof=1) / math.sqrt(len(diffs)) if len(diffs) > 1 else float("nan")
    print(f"mean gap {diffs.mean():+.4f} (paired SE {se:.4f})")
    with open(out / "effect.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
