"""Gating-variant grid: stage-1 parameter counts and losses, then closed-loop success.

    python scripts/ablation_grid.py --out runs/ablation --trajectories 200 --steps 2000
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from jvpm import config as cfgmod
from jvpm import synthworld as sw
from jvpm import training as tr

VARIANTS = ("baseline_a", "motor_only_b", "decoupled_c", "full_d")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--trajectories", type=int, default=200)
    p.add_argument("--data-seed", type=int, default=1)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--post-steps", type=int, default=2000)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=1)
    a = p.parse_args()

    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    sw.generate_dataset(a.trajectories, a.data_seed, out / "data")
    data = sw.load_dataset(out / "data")
    rows = []
    for v in VARIANTS:
        cfg = cfgmod.apply(cfgmod.Config(), {"ablation.variant": v, "train.steps": str(a.steps),
                                             "seed": str(a.seed)})
        teacher, n_params, act, rec = None, 0, float("nan"), float("nan")
        if v != "baseline_a":
            pre = tr.PretrainRun(cfg, data)
            pre.run()
            teacher = pre.checkpoint()
            n_params = pre.model.num_parameters()
            act = float(np.mean([r.loss_action for r in pre.trace[-100:]]))
            rec = float(np.mean([r.loss_recon for r in pre.trace[-100:]]))
        post_cfg = cfgmod.apply(cfgmod.parse(cfgmod.dump(cfg)), {"train.steps": str(a.post_steps)})
        post = tr.PosttrainRun(post_cfg, data, teacher, jvpm=teacher is not None)
        post.run()
        pcfg, net = tr.load_policy(post.checkpoint())
        sr = sw.evaluate_closed_loop(tr.PolicyRunner(pcfg, net, seed=0), a.episodes, seed=0)
        rows.append({"variant": v, "stage1_params": n_params, "loss_action": act, "loss_recon": rec,
                     "success_rate": sr})
        print(rows[-1], flush=True)
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
