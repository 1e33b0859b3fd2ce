"""Small transformer building blocks on top of :mod:`jvpm.numerics`.

Shapes: token tensors are ``(batch, tokens, dim)``.  Blocks are pre-norm with
an MLP ratio of 4 and GELU activations.
"""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class Module:
    """Attribute-registered parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad`` set (or any
    tensor attribute once frozen); sub-modules may be attributes or lists of
    modules.  Names are dotted paths in attribute insertion order.
    """

    frozen = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_dict(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def freeze(self) -> "Module":
        """Stop gradient flow into every parameter and mark the module immutable."""
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        self._set_frozen(True)
        return self

    def _set_frozen(self, flag: bool) -> None:
        self.frozen = flag
        for value in vars(self).values():
            if isinstance(value, Module):
                value._set_frozen(flag)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item._set_frozen(flag)

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.param_dict()
        if strict:
            missing = sorted(set(params) - set(arrays))
            extra = sorted(set(arrays) - set(params))
            if missing or extra:
                raise KeyError(f"parameter mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            if name not in arrays:
                continue
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.shape}")
            p.data = arr.copy()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}


def parameter_hash(module: Module) -> str:
    """SHA-256 over parameter names, shapes and raw float64 bytes."""
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(str(p.shape).encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


# Frozen patch tokens have norms of a few units; positional tables start at the
# same scale so that position survives the first LayerNorm.
POS_INIT_STD = 1.0


def positional_table(rng: np.random.Generator, n: int, dim: int) -> Tensor:
    return nx.parameter(rng.normal(0.0, POS_INIT_STD, size=(n, dim)))


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        self.weight = nx.parameter(np.zeros((din, dout)) if zero else _xavier(rng, din, dout))
        self.bias = nx.parameter(np.zeros(dout)) if bias else None

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}weight", self.weight
        if self.bias is not None:
            yield f"{prefix}bias", self.bias

    def __call__(self, x: Tensor) -> Tensor:
        y = nx.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = nx.parameter(np.ones(dim))
        self.bias = nx.parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, out: int | None = None):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, out or dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nx.gelu(self.fc1(x)))


class Attention(Module):
    """Multi-head scaled dot-product attention.

    q/k/v projections carry no bias; the output projection has a zero-initialised
    bias, so a zero value projection yields an exactly zero output.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.wq = Linear(dim, dim, rng, bias=False)
        self.wk = Linear(dim, dim, rng, bias=False)
        self.wv = Linear(dim, dim, rng, bias=False)
        self.wo = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return nx.transpose(nx.reshape(x, (b, n, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, xq: Tensor, xkv: Tensor) -> Tensor:
        b, n, d = xq.shape
        q = self._split(self.wq(xq))
        k = self._split(self.wk(xkv))
        v = self._split(self.wv(xkv))
        scores = nx.scale(nx.matmul(q, nx.swap_last(k)), 1.0 / np.sqrt(d // self.heads))
        out = nx.matmul(nx.softmax(scores), v)
        out = nx.reshape(nx.transpose(out, (0, 2, 1, 3)), (b, n, d))
        return self.wo(out)


class TransformerBlock(Module):
    """x + Attn(LN x); then + MLP(LN x)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h)
        return x + self.mlp(self.ln2(x))


class CrossAttention(Module):
    """Attention output only (no residual): queries read keys/values from a context."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.ln_q = LayerNorm(dim)
        self.ln_kv = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)

    def __call__(self, queries: Tensor, context: Tensor) -> Tensor:
        return self.attn(self.ln_q(queries), self.ln_kv(context))


class QueryBlock(Module):
    """Learnable queries cross-attending to a context, followed by an MLP.

    queries are shared across the batch; output is ``(batch, n_queries, dim)``.
    """

    def __init__(self, n_queries: int, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.queries = nx.parameter(rng.normal(0.0, 0.02, size=(n_queries, dim)))
        self.cross = CrossAttention(dim, heads, rng)
        self.ln = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim, rng)

    def __call__(self, context: Tensor) -> Tensor:
        b = context.shape[0]
        q = nx.reshape(nx.concat([nx.reshape(self.queries, (1,) + self.queries.shape)] * b, axis=0), (b,) + self.queries.shape)
        x = q + self.cross(q, context)
        return x + self.mlp(self.ln(x))


def mean_tokens(x: Tensor) -> Tensor:
    """(batch, tokens, dim) -> (batch, dim)."""
    return nx.mean(x, axis=1)
