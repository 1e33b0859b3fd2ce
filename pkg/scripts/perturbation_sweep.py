"""Embedding MSE and action bias of a stage-1 model across perturbation strengths.

    python scripts/perturbation_sweep.py --ckpt runs/pre/checkpoint.bin --data runs/data --out sweep.csv
"""

import argparse
import csv

import numpy as np

from jvpm import checkpoint as ck_io
from jvpm import paac as pa
from jvpm import synthworld as sw
from jvpm import training as tr


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, nargs="+", default=[0, 2, 8, 16])
    p.add_argument("--brightness", type=float, nargs="+", default=[-32, -8, 0, 8, 32])
    a = p.parse_args()

    cfg, model = tr.load_stage1(ck_io.load_checkpoint(a.ckpt))
    windows = tr.Windows(sw.load_dataset(a.data), cfg)
    rows = np.sort(np.random.default_rng(a.seed).choice(len(windows), size=min(a.clips, len(windows)),
                                                        replace=False))
    batch = windows.gather(rows)
    tok = tr.tokenizer_for(cfg)
    out = []
    for kind, strengths in (("gaussian_noise", a.noise), ("brightness", a.brightness)):
        for s in strengths:
            probe = pa.perturbation_probe(model, tok, batch.clips, batch.chunks, pa.Perturbation(kind, s),
                                          seed=a.seed)
            out.append({"kind": kind, "strength": s,
                        "median_embedding_mse": float(np.median([r.embedding_mse for r in probe])),
                        "mean_action_bias": float(np.mean([r.action_bias for r in probe]))})
            print(out[-1], flush=True)
    with open(a.out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(out[0]))
        w.writeheader()
        w.writerows(out)


if __name__ == "__main__":
    main()
