"""Action heads over joint visuomotor embeddings.

Both heads condition on a pooled vector of the token matrix and expose the
same two calls, ``loss(cond, target, rng)`` and ``predict(cond, rng)``, so the
training stages can swap them freely.

Flow convention: ``x_tau = tau * x + (1 - tau) * eps`` with target field
``u = eps - x``.  Along that path ``dx_tau/dtau = x - eps = -u``, so sampling
starts from noise at ``tau = 0`` and integrates ``x <- x - dtau * v`` up to
``tau = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .layers import LayerNorm, Linear, MLP, Module, QueryBlock, mean_tokens
from .numerics import Tensor

CHUNK = 16


def mae_loss(pred: Tensor, target) -> Tensor:
    target = nx.as_tensor(target)
    if pred.shape != target.shape:
        raise nx.ShapeError(f"mae_loss: prediction {pred.shape} vs target {target.shape}")
    return nx.mean(nx.abs_(pred - target))


def mse_loss(pred: Tensor, target) -> Tensor:
    target = nx.as_tensor(target)
    if pred.shape != target.shape:
        raise nx.ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    return nx.mean(nx.square(pred - target))


class Conditioner(Module):
    """Token matrix -> vector: mean pooling, or a single learned attention query."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, kind: str = "mean"):
        if kind not in ("mean", "attn"):
            raise ValueError(f"unknown conditioning {kind!r}")
        self._kind = kind
        if kind == "attn":
            self.query = QueryBlock(1, dim, heads, rng)

    def __call__(self, tokens: Tensor) -> Tensor:
        if self._kind == "mean":
            return mean_tokens(tokens)
        b, _, d = tokens.shape
        return nx.reshape(self.query(tokens), (b, d))


class ResidualMLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.ln = LayerNorm(dim)
        self.mlp = MLP(dim, hidden, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.mlp(self.ln(x))


class OFTHead(Module):
    """Pooled embedding -> two residual MLP blocks -> linear chunk regressor (MAE)."""

    def __init__(self, dim: int, rng: np.random.Generator, k: int = CHUNK, action_dim: int = 3,
                 heads: int = 2, conditioning: str = "mean", zero_out: bool = False):
        self._k, self._a = k, action_dim
        self.cond = Conditioner(dim, heads, rng, conditioning)
        self.blocks = [ResidualMLP(dim, 4 * dim, rng) for _ in range(2)]
        self.ln = LayerNorm(dim)
        self.out = Linear(dim, k * action_dim, rng, zero=zero_out)

    def __call__(self, m_f: Tensor) -> Tensor:
        x = self.cond(m_f)
        for blk in self.blocks:
            x = blk(x)
        y = self.out(self.ln(x))
        return nx.reshape(y, (x.shape[0], self._k, self._a))

    def loss(self, m_f: Tensor, target: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
        return mae_loss(self(m_f), target)

    def predict(self, m_f: Tensor, rng: np.random.Generator | None = None) -> np.ndarray:
        with nx.no_grad():
            return self(m_f).data.copy()


# ---------------------------------------------------------------------------
# flow matching


@dataclass(frozen=True)
class TauSampler:
    """tau = cap * (1 - b), b ~ Beta(alpha, beta); emphasises the noisy end."""

    alpha: float = 1.5
    beta: float = 1.0
    cap: float = 0.999

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.cap * (1.0 - rng.beta(self.alpha, self.beta, size=n))


@dataclass
class FlowState:
    x: np.ndarray  # clean chunk, flattened (B, k*a)
    eps: np.ndarray
    tau: np.ndarray  # (B,)
    x_tau: np.ndarray
    u: np.ndarray


def make_flow_state(x: np.ndarray, eps: np.ndarray, tau: np.ndarray) -> FlowState:
    t = np.asarray(tau, dtype=np.float64).reshape(-1, *([1] * (x.ndim - 1)))
    return FlowState(x=x, eps=eps, tau=np.asarray(tau, dtype=np.float64),
                     x_tau=t * x + (1.0 - t) * eps, u=eps - x)


def tau_embedding(tau: np.ndarray, dim: int = 16, max_period: float = 1000.0) -> np.ndarray:
    """Sinusoidal features of tau in [0, 1]; the lowest frequency is 1 rad per unit."""
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(max_period), half))
    ang = np.asarray(tau, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def euler_sample(field: Callable[[np.ndarray, float], np.ndarray], x0: np.ndarray, steps: int) -> np.ndarray:
    """Integrate dx/dtau = -field(x, tau) from tau=0 to 1 with uniform Euler steps."""
    if steps < 1:
        raise ValueError(f"need at least one Euler step, got {steps}")
    x = np.array(x0, dtype=np.float64)
    dt = 1.0 / steps
    for i in range(steps):
        x = x - dt * field(x, i * dt)
    return x


class FlowHead(Module):
    """Conditional flow-matching head; the vector field is a 3-hidden-layer MLP over
    ``[x_tau, tau features, pooled embedding]``."""

    def __init__(self, dim: int, rng: np.random.Generator, k: int = CHUNK, action_dim: int = 3,
                 heads: int = 2, conditioning: str = "mean", hidden: int = 128, tau_dim: int = 16,
                 tau: TauSampler | None = None, steps: int = 10):
        self._k, self._a, self._tau_dim = k, action_dim, tau_dim
        self._tau = tau or TauSampler()
        self._steps = steps
        n = k * action_dim
        self.cond = Conditioner(dim, heads, rng, conditioning)
        self.fc = [Linear(n + tau_dim + dim, hidden, rng), Linear(hidden, hidden, rng), Linear(hidden, hidden, rng)]
        self.out = Linear(hidden, n, rng)

    @property
    def steps(self) -> int:
        return self._steps

    def v_theta(self, x_tau, tau: np.ndarray, cond: Tensor) -> Tensor:
        """x_tau (B, k*a), tau (B,), cond (B, D) -> (B, k*a)."""
        emb = nx.Tensor(tau_embedding(tau, self._tau_dim))
        h = nx.concat([nx.as_tensor(x_tau), emb, cond], axis=1)
        for fc in self.fc:
            h = nx.gelu(fc(h))
        return self.out(h)

    def flow_loss(self, m_f: Tensor, x: np.ndarray, rng: np.random.Generator,
                  tau: np.ndarray | None = None) -> Tensor:
        b = x.shape[0]
        flat = x.reshape(b, -1)
        eps = rng.standard_normal(flat.shape)
        tau = self._tau.sample(rng, b) if tau is None else np.asarray(tau, dtype=np.float64)
        st = make_flow_state(flat, eps, tau)
        return mse_loss(self.v_theta(st.x_tau, st.tau, self.cond(m_f)), st.u)

    def loss(self, m_f: Tensor, target: np.ndarray, rng: np.random.Generator) -> Tensor:
        return self.flow_loss(m_f, target, rng)

    def predict(self, m_f: Tensor, rng: np.random.Generator, steps: int | None = None) -> np.ndarray:
        steps = self._steps if steps is None else steps
        with nx.no_grad():
            cond = self.cond(m_f)
            b = cond.shape[0]
            x0 = rng.standard_normal((b, self._k * self._a))

            def field(x, tau):
                return self.v_theta(x, np.full(b, tau), cond).data

            return euler_sample(field, x0, steps).reshape(b, self._k, self._a)


def make_head(kind: str, dim: int, rng: np.random.Generator, **kw) -> Module:
    if kind == "oft":
        kw = {k: v for k, v in kw.items() if k in ("k", "action_dim", "heads", "conditioning")}
        return OFTHead(dim, rng, **kw)
    if kind == "flow":
        return FlowHead(dim, rng, **kw)
    raise ValueError(f"unknown head kind {kind!r} (expected 'oft' or 'flow')")
