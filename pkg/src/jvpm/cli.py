"""``jvpm`` command line.

Exit codes: 0 success, 1 a check failed, 2 usage, config or input error.
"""

from __future__ import annotations

import argparse
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as ckpt_io
from . import config as cfgmod
from . import numerics as nx
from . import paac as pa
from . import synthworld as sw
from . import training as tr
from .config import ConfigError

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _resolve_config(path: str | None, overrides: list[str]) -> cfgmod.Config:
    cfg = cfgmod.load(path) if path else cfgmod.Config()
    pairs = {}
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    return cfgmod.apply(cfg, pairs).validate()


def _load_data(path: str) -> list[sw.Trajectory]:
    if not Path(path).is_dir():
        raise UsageError(f"dataset directory not found: {path}")
    return sw.load_dataset(path)


def _write_run(out: Path, run, meta: dict[str, str], started: float) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfgmod.dump(run.cfg))
    ckpt_io.save_checkpoint(run.checkpoint(), out / "checkpoint.bin")
    (out / "trace.csv").write_text(tr.trace_csv(run.trace))
    info = {
        "tool": "jvpm",
        "tool_version": __version__,
        "numpy_version": np.__version__,
        "python": platform.python_version(),
        "seed": str(run.cfg.seed),
        "steps": str(run.step),
        "wall_clock_s": f"{time.time() - started:.3f}",
        "command": " ".join(sys.argv),
        **meta,
    }
    (out / "metadata.txt").write_text("".join(f"{k} = {v}\n" for k, v in info.items()))


def _log_progress(run, every: int) -> None:
    if every and run.step % every == 0:
        r = run.trace[-1]
        print(f"step {r.step} lr {r.lr:.3g} beta {r.beta:.3g} total {r.loss_total:.5f} "
              f"recon {r.loss_recon:.5f} action {r.loss_action:.5f} align {r.loss_align:.5f}", flush=True)


def _train(run, log_every: int) -> None:
    while run.step < run.cfg.train.steps:
        run.train_step()
        _log_progress(run, log_every)


def _csv_rows(pairs: dict[str, float]) -> str:
    return "metric,value\n" + "".join(f"{k},{v!r}\n" for k, v in pairs.items())


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(a) -> int:
    if a.trajectories < 1:
        raise UsageError("--trajectories must be >= 1")
    if a.length < 33:
        raise UsageError("--length must be >= 33 (one 17-frame clip plus a 16-action chunk)")
    sw.generate_dataset(a.trajectories, a.seed, a.out, length=a.length)
    print(f"wrote {a.trajectories} trajectories to {a.out}")
    return EXIT_OK


def cmd_pretrain(a) -> int:
    started = time.time()
    data = _load_data(a.data)
    if a.resume:
        run = tr.PretrainRun.from_checkpoint(ckpt_io.load_checkpoint(a.resume), data)
    else:
        run = tr.PretrainRun(_resolve_config(a.config, a.set), data)
    _train(run, a.log_every)
    _write_run(Path(a.out), run, {"data": str(a.data), "kind": "pretrain",
                                  "param_hash": tr.parameter_hash(run.model)}, started)
    print(f"pretrain done: {run.step} steps, final total loss {run.trace[-1].loss_total:.6f}" if run.trace
          else "pretrain: nothing to do")
    return EXIT_OK


def cmd_posttrain(a) -> int:
    started = time.time()
    data = _load_data(a.data)
    teacher = ckpt_io.load_checkpoint(a.pretrained) if a.pretrained else None
    if a.resume:
        run = tr.PosttrainRun.from_checkpoint(ckpt_io.load_checkpoint(a.resume), data, teacher)
    else:
        run = tr.PosttrainRun(_resolve_config(a.config, a.set), data, teacher, jvpm=not a.no_jvpm)
    before = run.teacher_hash
    _train(run, a.log_every)
    after = tr.parameter_hash(run.teacher) if run.teacher is not None else ""
    meta = {"data": str(a.data), "kind": "posttrain", "jvpm": str(run.jvpm).lower(),
            "pretrained": str(a.pretrained or ""), "teacher_hash_before": before, "teacher_hash_after": after}
    _write_run(Path(a.out), run, meta, started)
    if before != after:
        print("teacher parameters changed during post-training", file=sys.stderr)
        return EXIT_CHECK
    print(f"posttrain done: {run.step} steps, jvpm={run.jvpm}, teacher hash {before or '-'}")
    return EXIT_OK


def cmd_eval(a) -> int:
    if not a.expert and not a.ckpt:
        raise UsageError("eval needs --ckpt or --expert")
    if a.data is None and a.closed_loop is None:
        raise UsageError("eval needs --data and/or --closed-loop N")
    metrics: dict[str, float] = {}
    ck = ckpt_io.load_checkpoint(a.ckpt) if a.ckpt else None
    if a.data is not None:
        if ck is None:
            raise UsageError("offline evaluation needs --ckpt")
        metrics.update(tr.offline_metrics(ck, _load_data(a.data), seed=a.seed))
    if a.closed_loop is not None:
        if a.closed_loop < 1:
            raise UsageError("--closed-loop must be >= 1")
        if a.expert:
            policy = sw.ExpertPolicy()
        elif ck.kind == "posttrain":
            cfg, net = tr.load_policy(ck)
            policy = tr.PolicyRunner(cfg, net, seed=a.seed)
        else:
            raise UsageError("closed-loop evaluation needs a posttrain checkpoint (stage-1 models see future frames)")
        metrics["episodes"] = float(a.closed_loop)
        metrics["success_rate"] = sw.evaluate_closed_loop(policy, a.closed_loop, seed=a.seed)
    text = _csv_rows(metrics)
    if a.out:
        Path(a.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_embed(a) -> int:
    ck = ckpt_io.load_checkpoint(a.ckpt)
    data = _load_data(a.data)
    emb, chunks = tr.joint_embeddings(ck, data, t=a.t)
    ids = [f"traj_{i:06d}" for i in range(len(data))]
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    pa.write_embeddings_csv(out / "embeddings.csv", ids, emb)
    pa.write_actions_csv(out / "actions.csv", ids, chunks)
    print(f"wrote {len(ids)} embeddings and action chunks to {out}")
    return EXIT_OK


def _read_actions(path: str, ids: list[str]) -> list[np.ndarray]:
    p = Path(path)
    if p.is_dir():
        data = sw.load_dataset(p)
        if len(data) != len(ids):
            raise UsageError(f"{len(ids)} embeddings vs {len(data)} trajectories")
        return [t.actions.astype(np.float64) for t in data]
    table = pa.read_actions_csv(p)
    missing = [i for i in ids if i not in table]
    if missing:
        raise UsageError(f"actions missing for ids {missing[:5]}")
    return [table[i] for i in ids]


def cmd_paac(a) -> int:
    ids, emb = pa.read_embeddings_csv(a.embeddings)
    if not 0 < a.topk < len(ids):
        raise UsageError(f"--topk must satisfy 0 < k < N (N={len(ids)})")
    seqs = _read_actions(a.actions, ids)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", pa.DegenerateBandwidthWarning)
        report = pa.paac(emb, seqs, k=a.topk, bins=a.bins, ids=ids)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.report_csv())
    (out / "histogram.csv").write_text(report.histogram_csv())
    (out / "summary.csv").write_text(report.summary_csv())
    print(f"sigma {report.sigma!r} mean consistency {report.mean!r} (N={len(ids)}, k={a.topk})")
    return EXIT_OK


def cmd_perturb(a) -> int:
    ck = ckpt_io.load_checkpoint(a.ckpt)
    cfg, model = tr.load_stage1(ck)
    data = _load_data(a.data)
    windows = tr.Windows(data, cfg)
    n = min(a.clips, len(windows))
    rows = np.sort(np.random.default_rng(a.seed).choice(len(windows), size=n, replace=False))
    batch = windows.gather(rows)
    probe = pa.perturbation_probe(model, tr.tokenizer_for(cfg), batch.clips, batch.chunks,
                                  pa.Perturbation(a.kind, a.strength), seed=a.seed)
    text = pa.probe_csv(probe)
    if a.out:
        Path(a.out).write_text(text)
    med = float(np.median([r.embedding_mse for r in probe]))
    bias = float(np.mean([r.action_bias for r in probe]))
    print(f"{a.kind} strength {a.strength}: median embedding MSE {med!r}, mean action bias {bias!r}")
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    from .gradcheck import run_gradchecks

    reports = run_gradchecks(seed=a.seed, tol=a.tol, max_entries=a.max_entries)
    ok = True
    for name, rep in reports.items():
        print(f"[{'PASS' if rep.passed else 'FAIL'}] {name}: worst relative error {rep.worst:.3e} (tol {a.tol:g})")
        for line in rep.lines():
            print("    " + line)
        ok &= rep.passed
    return EXIT_OK if ok else EXIT_CHECK


ABLATION_VARIANTS = ("baseline_a", "motor_only_b", "decoupled_c", "full_d")


def cmd_ablate(a) -> int:
    """Pretrain each gating variant, post-train a policy on top, report success rates."""
    data = _load_data(a.data)
    base = _resolve_config(a.config, a.set)
    out = Path(a.out)
    variants = a.variants.split(",") if a.variants else list(ABLATION_VARIANTS)
    lines = ["variant,stage1_params,final_loss_action,final_loss_recon,success_rate"]
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise UsageError(f"unknown variant {v!r}")
        cfg = cfgmod.apply(cfgmod.parse(cfgmod.dump(base)), {"ablation.variant": v})
        teacher, n_params, act, rec = None, 0, float("nan"), float("nan")
        if v != "baseline_a":
            pre = tr.PretrainRun(cfg, data)
            _train(pre, a.log_every)
            _write_run(out / v / "pretrain", pre, {"data": a.data, "kind": "pretrain"}, time.time())
            teacher = pre.checkpoint()
            n_params = pre.model.num_parameters()
            act = float(np.mean([r.loss_action for r in pre.trace[-100:]]))
            rec = float(np.mean([r.loss_recon for r in pre.trace[-100:]]))
        post_cfg = cfgmod.apply(cfgmod.parse(cfgmod.dump(cfg)), {"train.steps": str(a.post_steps)})
        post = tr.PosttrainRun(post_cfg, data, teacher, jvpm=teacher is not None)
        _train(post, a.log_every)
        _write_run(out / v / "posttrain", post, {"data": a.data, "kind": "posttrain"}, time.time())
        pcfg, net = tr.load_policy(post.checkpoint())
        sr = sw.evaluate_closed_loop(tr.PolicyRunner(pcfg, net, seed=a.seed), a.episodes, seed=a.seed)
        lines.append(f"{v},{n_params},{act!r},{rec!r},{sr!r}")
        print(lines[-1], flush=True)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jvpm", description="Joint visuomotor pretraining toolkit (desk scale).")
    p.add_argument("--version", action="version", version=f"jvpm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def cfg_args(sp):
        sp.add_argument("--config", help="key = value config file (defaults if omitted)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--log-every", type=int, default=100, help="print a progress line every N steps (0: quiet)")

    s = sub.add_parser("gen-data", help="write expert trajectories")
    s.add_argument("--out", required=True)
    s.add_argument("--trajectories", type=int, required=True)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--length", type=int, default=sw.TRAJ_LEN)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("pretrain", help="stage 1: visuomotor pretraining")
    cfg_args(s)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="continue from a pretrain checkpoint (its config wins)")
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("posttrain", help="stage 2: latent-alignment post-training")
    cfg_args(s)
    s.add_argument("--pretrained", help="stage-1 checkpoint (required unless --no-jvpm)")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-jvpm", action="store_true", help="train the same policy without alignment (beta = 0)")
    s.add_argument("--resume", help="continue from a posttrain checkpoint")
    s.set_defaults(fn=cmd_posttrain)

    s = sub.add_parser("eval", help="offline metrics and closed-loop success")
    s.add_argument("--ckpt")
    s.add_argument("--data")
    s.add_argument("--closed-loop", type=int, metavar="N")
    s.add_argument("--expert", action="store_true", help="evaluate the scripted expert instead of a checkpoint")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="metrics CSV path (also printed)")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("embed", help="export mean-pooled joint embeddings and action chunks")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--t", type=int, default=0, help="window start index")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_embed)

    s = sub.add_parser("paac", help="action-consistency report of an embedding space")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--actions", required=True, help="dataset directory or actions CSV (id,t,a0,...)")
    s.add_argument("--topk", type=int, default=3)
    s.add_argument("--bins", type=int, default=pa.N_BINS)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_paac)

    s = sub.add_parser("perturb", help="embedding robustness under pixel perturbations")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--kind", choices=("gaussian_noise", "brightness"), required=True)
    s.add_argument("--strength", type=float, required=True)
    s.add_argument("--clips", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_perturb)

    s = sub.add_parser("gradcheck", help="finite-difference check of every trainable component")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--max-entries", type=int, default=8, help="sampled entries per parameter (0: all)")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("ablate", help="gating-variant grid: pretrain, post-train, closed-loop success")
    cfg_args(s)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--variants", help="comma-separated subset of " + ",".join(ABLATION_VARIANTS))
    s.add_argument("--post-steps", type=int, default=1000)
    s.add_argument("--episodes", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: --help -> 0, bad usage -> 2
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"jvpm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ckpt_io.CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"jvpm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
