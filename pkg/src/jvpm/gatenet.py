"""Joint visuomotor gating network.

Temporal tokens get learned positional encodings and a shared transformer
encoder, then a contiguous split: the first ``n_visual`` tokens form the
visual stream, the rest the motor stream.

* visual stream: ``visual_layers`` self-attention blocks -> ``V_f``
  (no positional encoding inside the stream, so it is permutation-equivariant);
* motor stream, per gate iteration ``n``::

      S = SelfAttnBlock_n(M_n)
      C = CrossAttn_n(queries=S, keys/values=V_f)
      M_{n+1} = sigmoid(r_n) * C + S

* reconstruction: QueryPool (learned queries, softmax over ``Q V_f^T / sqrt(D)``)
  followed by a transformer decoder predicting the first-frame latent.

Variants (gating ablation ladder):

``motor_only_b``  every token goes to the motor stream; self-attention only, no recon
``decoupled_c``   split + recon, motor stream without cross-attention or gates
``full_d``        everything above plus gated cross-attention
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .layers import CrossAttention, LayerNorm, Linear, Module, TransformerBlock, positional_table
from .numerics import Tensor

VARIANTS = ("baseline_a", "motor_only_b", "decoupled_c", "full_d")


@dataclass(frozen=True)
class GateNetConfig:
    dim: int = 32
    heads: int = 2
    n_tokens: int = 80
    n_visual: int | None = None  # None -> even split
    encoder_layers: int = 2
    visual_layers: int = 3
    gate_iterations: int = 3
    pool_queries: int = 16
    decoder_layers: int = 3
    mlp_ratio: int = 4
    variant: str = "full_d"

    def __post_init__(self):
        if self.variant not in VARIANTS[1:]:
            raise ValueError(f"gating network variant must be one of {VARIANTS[1:]}, got {self.variant!r}")
        if self.has_visual and not 0 < self.visual_tokens < self.n_tokens:
            raise ValueError(f"visual split {self.visual_tokens} invalid for {self.n_tokens} tokens")

    @property
    def has_visual(self) -> bool:
        return self.variant != "motor_only_b"

    @property
    def has_gate(self) -> bool:
        return self.variant == "full_d"

    @property
    def visual_tokens(self) -> int:
        if not self.has_visual:
            return 0
        return self.n_tokens // 2 if self.n_visual is None else self.n_visual

    @property
    def motor_tokens(self) -> int:
        return self.n_tokens - self.visual_tokens


@dataclass
class GateOutput:
    motor: Tensor  # M_f (B, n_motor, D)
    visual: Tensor | None  # V_f (B, n_visual, D)
    recon: Tensor | None  # V_r (B, pool_queries, D)


class StreamError(ValueError):
    pass


class GateNet(Module):
    def __init__(self, cfg: GateNetConfig, rng: np.random.Generator):
        self._cfg = cfg
        d, h, r = cfg.dim, cfg.heads, cfg.mlp_ratio
        self._calls = 0
        self.pos = positional_table(rng, cfg.n_tokens, d)
        self.encoder = [TransformerBlock(d, h, rng, r) for _ in range(cfg.encoder_layers)]
        if cfg.has_visual:
            self.visual = [TransformerBlock(d, h, rng, r) for _ in range(cfg.visual_layers)]
        self.motor_self = [TransformerBlock(d, h, rng, r) for _ in range(cfg.gate_iterations)]
        if cfg.has_gate:
            self.cross = [CrossAttention(d, h, rng) for _ in range(cfg.gate_iterations)]
            self.gates = [nx.parameter(0.0) for _ in range(cfg.gate_iterations)]
        if cfg.has_visual:
            self.pool_queries = nx.parameter(rng.normal(0.0, 0.02, size=(cfg.pool_queries, d)))
            self.decoder = [TransformerBlock(d, h, rng, r) for _ in range(cfg.decoder_layers)]
            self.dec_ln = LayerNorm(d)
            self.dec_out = Linear(d, d, rng)

    @property
    def cfg(self) -> GateNetConfig:
        return self._cfg

    @property
    def calls(self) -> int:
        """Number of forward passes run; lets callers audit disabled paths."""
        return self._calls

    # -- stages ------------------------------------------------------------

    def encode_and_split(self, tokens) -> tuple[Tensor | None, Tensor]:
        x = nx.as_tensor(tokens)
        if x.ndim != 3 or x.shape[1:] != (self.cfg.n_tokens, self.cfg.dim):
            raise nx.ShapeError(
                f"expected (batch, {self.cfg.n_tokens}, {self.cfg.dim}) tokens, got {x.shape}"
            )
        x = x + self.pos
        for blk in self.encoder:
            x = blk(x)
        nv = self.cfg.visual_tokens
        if nv == 0:
            return None, x
        return x[:, :nv], x[:, nv:]

    def visual_stream(self, visual_tokens: Tensor | None) -> Tensor:
        if visual_tokens is None or not self.cfg.has_visual:
            raise StreamError("visual stream is empty; reconstruction needs V_f")
        x = visual_tokens
        for blk in self.visual:
            x = blk(x)
        return x

    def gated_refine(self, m: Tensor, v_f: Tensor | None, n: int) -> Tensor:
        """One gate iteration; without gating this is just the self-attention block."""
        s = self.motor_self[n](m)
        if not self.cfg.has_gate:
            return s
        c = self.cross[n](s, v_f)
        return nx.mul(nx.sigmoid(self.gates[n]), c) + s

    def pool(self, v_f: Tensor) -> tuple[Tensor, Tensor]:
        """QueryPool: returns (pooled tokens, attention weights)."""
        scores = nx.scale(nx.matmul(self.pool_queries, nx.swap_last(v_f)), 1.0 / np.sqrt(self.cfg.dim))
        w = nx.softmax(scores)
        return nx.matmul(w, v_f), w

    def reconstruct(self, v_f: Tensor) -> Tensor:
        x, _ = self.pool(v_f)
        for blk in self.decoder:
            x = blk(x)
        return self.dec_out(self.dec_ln(x))

    def __call__(self, tokens, recon: bool = True) -> GateOutput:
        self._calls += 1
        vis, m = self.encode_and_split(tokens)
        v_f = self.visual_stream(vis) if self.cfg.has_visual else None
        for n in range(self.cfg.gate_iterations):
            m = self.gated_refine(m, v_f, n)
        v_r = self.reconstruct(v_f) if (recon and v_f is not None) else None
        return GateOutput(motor=m, visual=v_f, recon=v_r)

    # -- parameter groups ----------------------------------------------------

    def motor_parameters(self) -> dict[str, Tensor]:
        """Parameters that only the motor stream uses."""
        return {n: p for n, p in self.named_parameters() if n.startswith(("motor_self.", "cross.", "gates."))}

    def recon_parameters(self) -> dict[str, Tensor]:
        """Parameters that only the reconstruction branch uses."""
        return {n: p for n, p in self.named_parameters() if n.startswith(("pool_queries", "decoder.", "dec_ln.", "dec_out."))}


def recon_loss(v_r: Tensor, v_t, norm: str = "mse") -> Tensor:
    """Reconstruction loss; ``mse`` averages over elements, ``l2`` averages the
    per-sample Frobenius norm over the batch."""
    v_t = nx.as_tensor(v_t)
    if v_r.shape != v_t.shape:
        raise nx.ShapeError(f"recon_loss: prediction {v_r.shape} vs target {v_t.shape}")
    diff = v_r - v_t
    if norm == "mse":
        return nx.mean(nx.square(diff))
    if norm == "l2":
        per = nx.sqrt(nx.sum_(nx.reshape(nx.square(diff), (diff.shape[0], -1)), axis=1))
        return nx.mean(per)
    raise ValueError(f"unknown norm {norm!r}")
