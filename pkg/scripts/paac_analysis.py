"""Action consistency of a stage-1 embedding space versus an untrained one.

    python scripts/paac_analysis.py --ckpt runs/pre/checkpoint.bin --out runs/paac
"""

import argparse
from pathlib import Path

import numpy as np

from jvpm import checkpoint as ck_io
from jvpm import config as cfgmod
from jvpm import paac as pa
from jvpm import synthworld as sw
from jvpm import training as tr


def report(ck, data, k):
    emb, chunks = tr.joint_embeddings(ck, data, t=0)
    return pa.paac(emb, list(chunks), k=k, ids=[f"traj_{i:06d}" for i in range(len(data))])


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--ckpt", required=True, help="trained stage-1 checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--trajectories", type=int, default=100)
    p.add_argument("--data-seed", type=int, default=7)
    p.add_argument("--topk", type=int, default=3)
    a = p.parse_args()

    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    sw.generate_dataset(a.trajectories, a.data_seed, out / "data")
    data = sw.load_dataset(out / "data")
    trained = ck_io.load_checkpoint(a.ckpt)
    fresh = tr.PretrainRun(cfgmod.parse(trained.config_text), data).checkpoint()
    for name, ck in (("trained", trained), ("untrained", fresh)):
        rep = report(ck, data, a.topk)
        d = out / name
        d.mkdir(exist_ok=True)
        (d / "report.csv").write_text(rep.report_csv())
        (d / "histogram.csv").write_text(rep.histogram_csv())
        (d / "summary.csv").write_text(rep.summary_csv())
        print(f"{name}: sigma {rep.sigma:.4g}, mean consistency {rep.mean:.4f}, "
              f"median {np.median(rep.scores):.4f}")


if __name__ == "__main__":
    main()
