"""Finite-difference audits of every trainable component on tiny instances."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .gatenet import GateNet, GateNetConfig, recon_loss
from .heads import FlowHead, OFTHead
from .layers import QueryBlock
from .training import alignment_loss

TINY = GateNetConfig(dim=8, heads=2, n_tokens=10, pool_queries=4)


def _gatenet_case(rng):
    net = GateNet(TINY, rng)
    # move off symmetric points: sigmoid(0) gates, and near-zero pool queries
    # that make every pooled token (and so the decoder attention) identical
    for g in net.gates:
        g.data = rng.normal(size=())
    net.pool_queries.data = rng.normal(size=net.pool_queries.shape)
    tokens = rng.normal(size=(2, TINY.n_tokens, TINY.dim))
    v_t = rng.normal(size=(2, TINY.pool_queries, TINY.dim))
    m_t = rng.normal(size=(2, TINY.motor_tokens, TINY.dim))

    def loss():
        out = net(tokens)
        return recon_loss(out.recon, v_t) + nx.mean(nx.square(out.motor - m_t))

    return loss, net.param_dict()


def _oft_case(rng, conditioning="mean"):
    head = OFTHead(8, rng, k=4, action_dim=3, heads=2, conditioning=conditioning)
    m_f = nx.parameter(rng.normal(size=(2, 5, 8)))
    target = rng.uniform(-1, 1, size=(2, 4, 3))
    params = {"m_f": m_f, **head.param_dict()}
    return (lambda: head.loss(m_f, target)), params


def _flow_case(rng, conditioning="mean", seed=0):
    head = FlowHead(8, rng, k=4, action_dim=3, heads=2, conditioning=conditioning, hidden=16, tau_dim=8)
    m_f = nx.parameter(rng.normal(size=(2, 5, 8)))
    target = rng.uniform(-1, 1, size=(2, 4, 3))
    params = {"m_f": m_f, **head.param_dict()}
    # a fresh generator per call makes the noise and tau draws identical
    return (lambda: head.loss(m_f, target, np.random.default_rng(seed))), params


def _adapter_case(rng):
    adapter = QueryBlock(5, 8, 2, rng)
    f_r = nx.parameter(rng.normal(size=(2, 6, 8)))
    m_f = nx.Tensor(rng.normal(size=(2, 5, 8)))
    params = {"f_r": f_r, **adapter.param_dict()}
    return (lambda: alignment_loss(m_f, adapter(f_r), beta=0.7)), params


def run_gradchecks(seed: int = 0, tol: float = 1e-4, max_entries: int | None = 8) -> dict[str, nx.GradCheckReport]:
    rng = np.random.default_rng(seed)
    cases = {
        "gatenet": _gatenet_case(rng),
        "oft_head": _oft_case(rng),
        "oft_head_attn": _oft_case(rng, "attn"),
        "flow_head": _flow_case(rng, seed=seed),
        "flow_head_attn": _flow_case(rng, "attn", seed=seed),
        "adapter": _adapter_case(rng),
    }
    max_entries = max_entries or None
    return {name: nx.grad_check(fn, params, tol=tol, max_entries=max_entries, seed=seed)
            for name, (fn, params) in cases.items()}
