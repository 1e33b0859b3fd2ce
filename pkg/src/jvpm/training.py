"""Stage-1 visuomotor pretraining and stage-2 latent-alignment post-training.

Stage 1 minimises ``lambda * L_recon + L_action`` over windows pairing the
clip frames ``[t, t + horizon)`` with the action chunk ``[t, t + 16)``.

Stage 2 freezes the stage-1 network.  The policy sees only the current frame
and the task id; an adapter maps its tokens onto the shape of the teacher's
motor embedding and the loss is ``beta(step) * MSE(M_f, F_a) + L_action``,
where ``M_f`` comes from the teacher on the future clip.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt_io
from . import config as cfgmod
from . import numerics as nx
from .config import Config, ConfigError
from .gatenet import GateNet, GateNetConfig, recon_loss
from .heads import CHUNK, make_head, mse_loss, FlowHead
from .layers import LayerNorm, Module, QueryBlock, TransformerBlock, parameter_hash, positional_table
from .numerics import Tensor
from .synthworld import N_TASKS, Trajectory
from .tokenizer import ClipSpec, Tokenizer

# dx, dy in [-0.1, 0.1] -> [-1, 1]; grip stays in [0, 1]
ACTION_SCALE = np.array([10.0, 10.0, 1.0])

TRACE_COLUMNS = ("step", "lr", "beta", "loss_total", "loss_recon", "loss_action", "loss_align")


class TeacherNotFrozenError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# schedules and optimiser


def lr_at(step: int, base: float, warmup: int) -> float:
    """Linear warm-up to ``base`` over ``warmup`` steps, then constant (steps count from 1)."""
    if warmup <= 0:
        return base
    return base * min(1.0, step / warmup)


def beta_at(step: int, beta0: float, total: int) -> float:
    """Cosine decay from ``beta0`` at step 0 to 0 at ``total``."""
    return beta0 * 0.5 * (1.0 + math.cos(math.pi * step / total))


class Adam:
    def __init__(self, params: dict[str, Tensor], b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0
        self.m = {n: np.zeros(p.shape) for n, p in params.items()}
        self.v = {n: np.zeros(p.shape) for n, p in params.items()}

    def step(self, lr: float) -> None:
        missing = [n for n, p in self.params.items() if p.grad is None]
        if missing:
            raise ValueError(f"missing gradients for {len(missing)} parameters, e.g. {missing[:3]}")
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n, p in self.params.items():
            g = p.grad
            self.m[n] = self.b1 * self.m[n] + (1.0 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1.0 - self.b2) * (g * g)
            p.data = p.data - lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def load(self, t: int, m: dict, v: dict) -> None:
        if set(m) != set(self.params) or set(v) != set(self.params):
            raise ConfigError("optimizer state does not match model parameters")
        self.t = t
        self.m = {n: np.array(m[n]) for n in self.params}
        self.v = {n: np.array(v[n]) for n in self.params}


# ---------------------------------------------------------------------------
# data windows


@dataclass
class Batch:
    clips: np.ndarray  # (B, F, H, W) subsampled window frames
    current: np.ndarray  # (B, H, W) frame t
    target_frame: np.ndarray  # (B, H, W) recon target frame
    chunks: np.ndarray  # (B, k, 3) normalised actions
    tasks: np.ndarray  # (B,)


class Windows:
    """All (trajectory, t) windows of a dataset for one config."""

    def __init__(self, dataset: Sequence[Trajectory], cfg: Config):
        if not dataset:
            raise ValueError("empty dataset")
        self.dataset = list(dataset)
        self.horizon = cfg.tokenizer.horizon
        self.chunk = cfg.train.chunk
        self.offsets = np.array(cfg.frame_indices) - 1
        self.last = cfg.model.recon_target == "last"
        need = max(self.horizon, self.chunk + 1)
        self.index = []
        for i, tr in enumerate(self.dataset):
            if len(tr) < need:
                raise ValueError(f"trajectory {i} has {len(tr)} frames; windows need >= {need}")
            stop = len(tr) - need + 1
            if cfg.train.active_only:
                stop = min(stop, tr.active_steps() + 1)
            for t in range(stop):
                self.index.append((i, t))
        self.index = np.array(self.index)

    def __len__(self) -> int:
        return len(self.index)

    def gather(self, rows: np.ndarray) -> Batch:
        clips, cur, tgt, chunks, tasks = [], [], [], [], []
        for i, t in self.index[rows]:
            tr = self.dataset[i]
            clip = tr.frames[t + self.offsets]
            clips.append(clip)
            cur.append(tr.frames[t])
            tgt.append(tr.frames[t + self.horizon - 1] if self.last else tr.frames[t])
            chunks.append(tr.actions[t: t + self.chunk].astype(np.float64) * ACTION_SCALE)
            tasks.append(tr.task_id)
        return Batch(np.stack(clips), np.stack(cur), np.stack(tgt), np.stack(chunks), np.array(tasks))

    def sample(self, rng: np.random.Generator, batch: int) -> Batch:
        return self.gather(rng.integers(0, len(self.index), size=batch))


# ---------------------------------------------------------------------------
# model builders


def tokenizer_for(cfg: Config) -> Tokenizer:
    return Tokenizer(ClipSpec(frame_count=cfg.encoded_frames, patch=cfg.tokenizer.patch,
                              dim=cfg.model.dim, seed=cfg.tokenizer.seed))


def gatenet_config_for(cfg: Config) -> GateNetConfig:
    if cfg.ablation.variant == "baseline_a":
        raise ConfigError("baseline_a has no stage-1 model; train it with posttrain --no-jvpm")
    spec = tokenizer_for(cfg).spec
    return GateNetConfig(
        dim=cfg.model.dim, heads=cfg.model.heads, n_tokens=spec.n_tokens, n_visual=cfg.n_visual,
        encoder_layers=cfg.model.encoder_layers, visual_layers=cfg.model.visual_layers,
        gate_iterations=cfg.model.gate_iterations, pool_queries=spec.tokens_per_block,
        decoder_layers=cfg.model.decoder_layers, variant=cfg.ablation.variant,
    )


def head_for(cfg: Config, rng: np.random.Generator) -> Module:
    from .heads import TauSampler

    kw = dict(k=cfg.train.chunk, action_dim=3, heads=cfg.model.heads, conditioning=cfg.head.conditioning)
    if cfg.head.kind == "flow":
        kw.update(tau=TauSampler(cfg.flow.tau_alpha, cfg.flow.tau_beta, cfg.flow.tau_cap), steps=cfg.flow.steps)
    return make_head(cfg.head.kind, cfg.model.dim, rng, **kw)


class Stage1(Module):
    """Gating network plus its action head."""

    def __init__(self, cfg: Config, rng: np.random.Generator):
        self.net = GateNet(gatenet_config_for(cfg), rng)
        self.head = head_for(cfg, rng)


class PolicyNet(Module):
    """Current-frame policy stand-in: frame tokens + task token -> transformer -> F_r;
    adapter queries cross-attend to F_r -> F_a (shaped like M_f); head acts on F_a."""

    def __init__(self, cfg: Config, n_motor: int, rng: np.random.Generator):
        spec = tokenizer_for(cfg).spec
        d, h = cfg.model.dim, cfg.model.heads
        self.pos = positional_table(rng, spec.tokens_per_block, d)
        self.task_emb = positional_table(rng, N_TASKS, d)
        self.blocks = [TransformerBlock(d, h, rng) for _ in range(cfg.post.policy_layers)]
        self.ln = LayerNorm(d)
        self.adapter = QueryBlock(n_motor, d, h, rng)
        self.head = head_for(cfg, rng)

    def represent(self, frame_tokens, tasks) -> tuple[Tensor, Tensor]:
        x = nx.as_tensor(frame_tokens) + self.pos
        b, _, d = x.shape
        task = nx.reshape(nx.take_rows(self.task_emb, tasks), (b, 1, d))
        x = nx.concat([task, x], axis=1)
        for blk in self.blocks:
            x = blk(x)
        f_r = self.ln(x)
        return f_r, self.adapter(f_r)


def alignment_loss(m_f: Tensor, f_a: Tensor, beta: float = 1.0, norm: str = "mse") -> Tensor:
    """``beta * MSE(M_f, F_a)``; ``M_f`` must come from a frozen teacher."""
    if m_f.requires_grad:
        raise TeacherNotFrozenError("alignment target carries gradients; the teacher must be frozen")
    raw = recon_loss(f_a, m_f, norm=norm)
    return nx.scale(raw, beta)


# ---------------------------------------------------------------------------
# traces


@dataclass
class TraceRow:
    step: int
    lr: float
    beta: float
    loss_total: float
    loss_recon: float
    loss_action: float
    loss_align: float


def trace_csv(rows: Sequence[TraceRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in rows:
        w.writerow([r.step] + [repr(float(getattr(r, c))) for c in TRACE_COLUMNS[1:]])
    return buf.getvalue()


def read_trace_csv(text: str) -> list[TraceRow]:
    reader = csv.DictReader(io.StringIO(text))
    return [TraceRow(int(r["step"]), *(float(r[c]) for c in TRACE_COLUMNS[1:])) for r in reader]


def smooth(values: Sequence[float], window: int = 100) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


# ---------------------------------------------------------------------------
# runs


def _restore_rng(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


class _Run:
    kind = ""

    def __init__(self, cfg: Config, dataset: Sequence[Trajectory]):
        self.cfg = cfg.validate()
        self.windows = Windows(dataset, cfg)
        self.tokenizer = tokenizer_for(cfg)
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.step = 0
        self.trace: list[TraceRow] = []

    def run(self, until: int | None = None) -> list[TraceRow]:
        until = self.cfg.train.steps if until is None else min(until, self.cfg.train.steps)
        while self.step < until:
            self.train_step()
        return self.trace

    def _checkpoint(self, module: Module, meta: dict[str, str]) -> ckpt_io.Checkpoint:
        return ckpt_io.Checkpoint(
            kind=self.kind,
            config_text=cfgmod.dump(self.cfg),
            tensors={n: p.data.copy() for n, p in module.named_parameters()},
            adam_t=self.opt.t,
            adam_m={n: a.copy() for n, a in self.opt.m.items()},
            adam_v={n: a.copy() for n, a in self.opt.v.items()},
            step=self.step,
            rng_state=self.rng.bit_generator.state,
            tokenizer_seed=self.cfg.tokenizer.seed,
            meta=meta,
        )

    def _resume(self, module: Module, ck: ckpt_io.Checkpoint) -> None:
        module.load_arrays(ck.tensors)
        self.opt.load(ck.adam_t, ck.adam_m, ck.adam_v)
        self.step = ck.step
        self.rng = _restore_rng(ck.rng_state)


class PretrainRun(_Run):
    kind = "pretrain"

    def __init__(self, cfg: Config, dataset: Sequence[Trajectory]):
        super().__init__(cfg, dataset)
        self.model = Stage1(cfg, np.random.default_rng([cfg.seed, 0]))
        self.opt = Adam(self.model.param_dict())

    @property
    def recon_enabled(self) -> bool:
        return self.model.net.cfg.has_visual

    def losses(self, batch: Batch) -> tuple[Tensor, Tensor | None, Tensor]:
        tokens = self.tokenizer.encode_clips(batch.clips)
        out = self.model.net(tokens, recon=self.recon_enabled)
        l_a = self.model.head.loss(out.motor, batch.chunks, self.rng)
        l_i = None
        if self.recon_enabled:
            target = self.tokenizer.encode_frames(batch.target_frame)
            l_i = recon_loss(out.recon, target, self.cfg.model.recon_norm)
        lam = self.cfg.loss.lambda_
        total = l_a if l_i is None else nx.scale(l_i, lam) + l_a
        return total, l_i, l_a

    def train_step(self) -> TraceRow:
        s = self.step + 1
        lr = lr_at(s, self.cfg.train.lr, self.cfg.train.warmup)
        batch = self.windows.sample(self.rng, self.cfg.train.batch)
        self.opt.zero_grad()
        total, l_i, l_a = self.losses(batch)
        nx.backward(total)
        self.opt.step(lr)
        self.step = s
        row = TraceRow(s, lr, 0.0, total.item(), 0.0 if l_i is None else l_i.item(), l_a.item(), 0.0)
        self.trace.append(row)
        return row

    def checkpoint(self) -> ckpt_io.Checkpoint:
        return self._checkpoint(self.model, {"param_hash": parameter_hash(self.model)})

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint, dataset: Sequence[Trajectory]) -> "PretrainRun":
        if ck.kind != cls.kind:
            raise ConfigError(f"expected a {cls.kind} checkpoint, got {ck.kind!r}")
        run = cls(cfgmod.parse(ck.config_text), dataset)
        run._resume(run.model, ck)
        return run


def load_stage1(ck: ckpt_io.Checkpoint, freeze: bool = True) -> tuple[Config, Stage1]:
    if ck.kind != "pretrain":
        raise ConfigError(f"expected a pretrain checkpoint, got {ck.kind!r}")
    cfg = cfgmod.parse(ck.config_text)
    model = Stage1(cfg, np.random.default_rng(0))
    model.load_arrays(ck.tensors)
    if freeze:
        model.freeze()
    return cfg, model


def _with_variant(cfg: Config, variant: str) -> Config:
    return cfgmod.apply(cfgmod.parse(cfgmod.dump(cfg)), {"ablation.variant": variant})


_SHARED_KEYS = ("tokenizer.frames", "tokenizer.horizon", "tokenizer.patch", "tokenizer.seed",
                "model.dim", "train.chunk")


def _check_compatible(cfg: Config, teacher_cfg: Config) -> None:
    a = dict(ln.split(" = ", 1) for ln in cfgmod.dump(cfg).splitlines())
    b = dict(ln.split(" = ", 1) for ln in cfgmod.dump(teacher_cfg).splitlines())
    bad = [k for k in _SHARED_KEYS if a[k] != b[k]]
    if bad:
        raise ConfigError("config/checkpoint mismatch on " + ", ".join(f"{k} ({a[k]} vs {b[k]})" for k in bad))


class PosttrainRun(_Run):
    kind = "posttrain"

    def __init__(self, cfg: Config, dataset: Sequence[Trajectory], teacher_ck: ckpt_io.Checkpoint | None,
                 jvpm: bool = True):
        super().__init__(cfg, dataset)
        self.jvpm = jvpm and cfg.ablation.variant != "baseline_a"
        self.teacher = None
        self.teacher_hash = ""
        if teacher_ck is not None:
            teacher_cfg, self.teacher = load_stage1(teacher_ck)
            _check_compatible(cfg, teacher_cfg)
            self.teacher_hash = parameter_hash(self.teacher)
            n_motor = self.teacher.net.cfg.motor_tokens
        elif self.jvpm:
            raise ConfigError("latent alignment needs a pretrained checkpoint")
        else:
            n_motor = gatenet_config_for(_with_variant(cfg, "full_d")).motor_tokens
        self.policy = PolicyNet(cfg, n_motor, np.random.default_rng([cfg.seed, 0]))
        if cfg.post.copy_head:
            if self.teacher is None:
                raise ConfigError("post.copy_head needs a pretrained checkpoint")
            if cfg.head.kind != teacher_cfg.head.kind or cfg.head.conditioning != teacher_cfg.head.conditioning:
                raise ConfigError("post.copy_head needs the same head kind/conditioning as the teacher")
            self.policy.head.load_arrays(self.teacher.head.state_arrays())
        self.opt = Adam(self.policy.param_dict())

    def beta(self, step: int) -> float:
        return beta_at(step, self.cfg.loss.beta0, self.cfg.train.steps) if self.jvpm else 0.0

    def train_step(self) -> TraceRow:
        if self.jvpm and not self.teacher.frozen:
            raise TeacherNotFrozenError("teacher must be frozen during post-training")
        s = self.step + 1
        lr = lr_at(s, self.cfg.train.lr, self.cfg.train.warmup)
        beta = self.beta(s)
        batch = self.windows.sample(self.rng, self.cfg.train.batch)
        self.opt.zero_grad()
        _, f_a = self.policy.represent(self.tokenizer.encode_frames(batch.current), batch.tasks)
        l_a = self.policy.head.loss(f_a, batch.chunks, self.rng)
        align = 0.0
        total = l_a
        if self.jvpm:
            with nx.no_grad():
                m_f = self.teacher.net(self.tokenizer.encode_clips(batch.clips), recon=False).motor
            raw = recon_loss(f_a, m_f, self.cfg.loss.align_norm)
            align = raw.item()
            total = alignment_loss(m_f, f_a, beta, self.cfg.loss.align_norm) + l_a
        nx.backward(total)
        self.opt.step(lr)
        self.step = s
        row = TraceRow(s, lr, beta, total.item(), 0.0, l_a.item(), align)
        self.trace.append(row)
        return row

    def checkpoint(self) -> ckpt_io.Checkpoint:
        return self._checkpoint(self.policy, {"teacher_hash": self.teacher_hash, "jvpm": str(int(self.jvpm))})

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint, dataset: Sequence[Trajectory],
                        teacher_ck: ckpt_io.Checkpoint | None) -> "PosttrainRun":
        if ck.kind != cls.kind:
            raise ConfigError(f"expected a {cls.kind} checkpoint, got {ck.kind!r}")
        run = cls(cfgmod.parse(ck.config_text), dataset, teacher_ck, jvpm=ck.meta.get("jvpm", "1") == "1")
        run._resume(run.policy, ck)
        return run


def pretrain(dataset: Sequence[Trajectory], cfg: Config) -> tuple[ckpt_io.Checkpoint, list[TraceRow]]:
    run = PretrainRun(cfg, dataset)
    run.run()
    return run.checkpoint(), run.trace


def posttrain(dataset: Sequence[Trajectory], teacher_ck: ckpt_io.Checkpoint | None, cfg: Config,
              jvpm: bool = True) -> tuple[ckpt_io.Checkpoint, list[TraceRow]]:
    run = PosttrainRun(cfg, dataset, teacher_ck, jvpm=jvpm)
    run.run()
    return run.checkpoint(), run.trace


# ---------------------------------------------------------------------------
# inference wrappers


def load_policy(ck: ckpt_io.Checkpoint) -> tuple[Config, PolicyNet]:
    if ck.kind != "posttrain":
        raise ConfigError(f"expected a posttrain checkpoint, got {ck.kind!r}")
    cfg = cfgmod.parse(ck.config_text)
    n_motor = ck.tensors["adapter.queries"].shape[0]
    policy = PolicyNet(cfg, n_motor, np.random.default_rng(0))
    policy.load_arrays(ck.tensors)
    policy.freeze()
    return cfg, policy


class PolicyRunner:
    """Closed-loop adapter: (frames, task ids) -> world-unit action chunks."""

    def __init__(self, cfg: Config, policy: PolicyNet, seed: int = 0):
        self.cfg = cfg
        self.policy = policy
        self.tokenizer = tokenizer_for(cfg)
        self.rng = np.random.default_rng([seed, 2])

    def __call__(self, frames: np.ndarray, tasks: np.ndarray) -> np.ndarray:
        with nx.no_grad():
            _, f_a = self.policy.represent(self.tokenizer.encode_frames(frames), np.asarray(tasks))
            chunk = self.policy.head.predict(f_a, self.rng)
        return chunk / ACTION_SCALE


def stage1_predict(model: Stage1, tokenizer: Tokenizer, clips: np.ndarray, rng: np.random.Generator):
    """Frozen stage-1 forward: (M_f, V_r or None, normalised action chunk)."""
    with nx.no_grad():
        out = model.net(tokenizer.encode_clips(clips), recon=model.net.cfg.has_visual)
        pred = model.head.predict(out.motor, rng)
    return out.motor.data, (out.recon.data if out.recon is not None else None), pred


def offline_metrics(ck: ckpt_io.Checkpoint, dataset: Sequence[Trajectory], seed: int = 0,
                    batch: int = 64) -> dict[str, float]:
    """Action MAE (world units) and, for stage-1 checkpoints, recon MSE over every window."""
    cfg = cfgmod.parse(ck.config_text)
    windows = Windows(dataset, cfg)
    tok = tokenizer_for(cfg)
    rng = np.random.default_rng([seed, 4])
    abs_err = sq_err = mean_abs = 0.0
    n_act = n_rec = 0
    if ck.kind == "pretrain":
        _, model = load_stage1(ck)
    else:
        _, policy = load_policy(ck)
    for lo in range(0, len(windows), batch):
        b = windows.gather(np.arange(lo, min(lo + batch, len(windows))))
        if ck.kind == "pretrain":
            _, v_r, pred = stage1_predict(model, tok, b.clips, rng)
            if v_r is not None:
                sq_err += float(np.sum((v_r - tok.encode_frames(b.target_frame)) ** 2))
                n_rec += v_r.size
        else:
            with nx.no_grad():
                _, f_a = policy.represent(tok.encode_frames(b.current), b.tasks)
                pred = policy.head.predict(f_a, rng)
        abs_err += float(np.sum(np.abs(pred - b.chunks) / ACTION_SCALE))
        mean_abs += float(np.sum(np.abs(b.chunks) / ACTION_SCALE))
        n_act += b.chunks.size
    out = {"windows": float(len(windows)), "action_mae": abs_err / n_act, "mean_abs_action": mean_abs / n_act}
    if n_rec:
        out["recon_mse"] = sq_err / n_rec
    return out


def joint_embeddings(ck: ckpt_io.Checkpoint, dataset: Sequence[Trajectory], t: int = 0,
                     batch: int = 64) -> tuple[np.ndarray, list[np.ndarray]]:
    """Mean-pooled M_f of the window starting at ``t`` of every trajectory, plus
    that window's action chunk in world units."""
    cfg, model = load_stage1(ck)
    windows = Windows(dataset, cfgmod.apply(cfgmod.parse(ck.config_text), {"train.active_only": "false"}))
    rows = np.flatnonzero(windows.index[:, 1] == t)
    if len(rows) != len(dataset):
        raise ValueError(f"window start {t} is not available in every trajectory")
    tok = tokenizer_for(cfg)
    embs, chunks = [], []
    for lo in range(0, len(rows), batch):
        b = windows.gather(rows[lo: lo + batch])
        m_f, _, _ = stage1_predict(model, tok, b.clips, np.random.default_rng(0))
        embs.append(m_f.mean(axis=1))
        chunks.extend(list(b.chunks / ACTION_SCALE))
    return np.concatenate(embs), chunks
