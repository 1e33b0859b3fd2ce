"""Flat dotted-key run configuration.

File format: ``key = value`` per line, ``#`` starts a comment.  Unknown keys
are rejected.  ``dump`` writes every key, so a resolved config fully
describes a run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .gatenet import VARIANTS
from .tokenizer import SUBSAMPLE_TABLE, SUPPORTED_FRAMES, subsample_indices


class ConfigError(ValueError):
    pass


@dataclass
class TokenizerSection:
    frames: int = 17
    horizon: int = 17
    patch: int = 8
    seed: int = 0


@dataclass
class ModelSection:
    dim: int = 32
    heads: int = 2
    gate_iterations: int = 3
    split_visual: str = "auto"  # "auto" = even split, else visual token count
    encoder_layers: int = 2
    visual_layers: int = 3
    decoder_layers: int = 3
    recon_norm: str = "mse"  # mse | l2
    recon_target: str = "first"  # first | last


@dataclass
class HeadSection:
    kind: str = "oft"
    conditioning: str = "mean"  # mean | attn


@dataclass
class FlowSection:
    tau_alpha: float = 1.5
    tau_beta: float = 1.0
    tau_cap: float = 0.999
    steps: int = 10


@dataclass
class TrainSection:
    batch: int = 16
    lr: float = 1e-3
    warmup: int = 200
    steps: int = 2000
    chunk: int = 16
    active_only: bool = True  # skip windows that start after the episode is solved


@dataclass
class LossSection:
    # "lambda" is reserved in Python; the file key is loss.lambda
    lambda_: float = 1.0
    beta0: float = 1.0
    align_norm: str = "mse"  # mse | l2


@dataclass
class AblationSection:
    variant: str = "full_d"


@dataclass
class PostSection:
    policy_layers: int = 2
    copy_head: bool = False


@dataclass
class Config:
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    model: ModelSection = field(default_factory=ModelSection)
    head: HeadSection = field(default_factory=HeadSection)
    flow: FlowSection = field(default_factory=FlowSection)
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossSection = field(default_factory=LossSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    post: PostSection = field(default_factory=PostSection)
    seed: int = 1

    # -- derived -------------------------------------------------------------

    @property
    def frame_indices(self) -> tuple[int, ...]:
        return subsample_indices(self.tokenizer.frames, self.tokenizer.horizon)

    @property
    def encoded_frames(self) -> int:
        return len(self.frame_indices)

    @property
    def n_visual(self) -> int | None:
        return None if self.model.split_visual == "auto" else int(self.model.split_visual)

    def validate(self) -> "Config":
        t = self.tokenizer
        if t.horizon not in SUPPORTED_FRAMES:
            raise ConfigError(f"tokenizer.horizon must be 4N+1 in {SUPPORTED_FRAMES}, got {t.horizon}")
        try:
            self.frame_indices
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if t.frames != t.horizon and t.frames not in SUBSAMPLE_TABLE:
            raise ConfigError(f"tokenizer.frames {t.frames} unsupported")
        if self.head.kind not in ("oft", "flow"):
            raise ConfigError(f"head.kind must be oft or flow, got {self.head.kind!r}")
        if self.head.conditioning not in ("mean", "attn"):
            raise ConfigError(f"head.conditioning must be mean or attn, got {self.head.conditioning!r}")
        if self.ablation.variant not in VARIANTS:
            raise ConfigError(f"ablation.variant must be one of {VARIANTS}, got {self.ablation.variant!r}")
        if self.model.recon_norm not in ("mse", "l2") or self.loss.align_norm not in ("mse", "l2"):
            raise ConfigError("recon_norm/align_norm must be mse or l2")
        if self.model.recon_target not in ("first", "last"):
            raise ConfigError(f"model.recon_target must be first or last, got {self.model.recon_target!r}")
        if self.model.split_visual != "auto":
            try:
                int(self.model.split_visual)
            except ValueError:
                raise ConfigError(f"model.split_visual must be 'auto' or an integer, got {self.model.split_visual!r}")
        if self.loss.lambda_ < 0 or self.loss.beta0 < 0:
            raise ConfigError("loss.lambda and loss.beta0 must be >= 0")
        if self.train.batch < 1 or self.train.steps < 1 or self.train.warmup < 0:
            raise ConfigError("train.batch and train.steps must be >= 1, train.warmup >= 0")
        return self


def _key_of(section: str, name: str) -> str:
    name = name.rstrip("_")
    return f"{section}.{name}" if section else name


def _items(cfg: Config):
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for sub in fields(value):
                yield _key_of(f.name, sub.name), value, sub
        else:
            yield f.name, cfg, f


def _coerce(raw: str, current, key: str):
    try:
        if isinstance(current, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def known_keys() -> list[str]:
    return [k for k, _, _ in _items(Config())]


def apply(cfg: Config, overrides: dict[str, str]) -> Config:
    table = {k: (owner, f) for k, owner, f in _items(cfg)}
    for key, raw in overrides.items():
        if key not in table:
            raise ConfigError(f"unknown config key {key!r}")
        owner, f = table[key]
        setattr(owner, f.name, _coerce(str(raw).strip(), getattr(owner, f.name), key))
    return cfg


def parse(text: str) -> Config:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        pairs[k] = v
    return apply(Config(), pairs).validate()


def load(path: str | Path) -> Config:
    return parse(Path(path).read_text())


def dump(cfg: Config) -> str:
    lines = []
    for key, owner, f in _items(cfg):
        v = getattr(owner, f.name)
        lines.append(f"{key} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)
