"""Action-consistency analysis of embedding spaces.

Pipeline: pairwise DTW distances between action sequences, an RBF kernel
with median-heuristic bandwidth, then for every sample the top-k embedding
neighbours (cosine similarity) and the action similarity of those pairs.
A good embedding retrieves neighbours whose actions are similar.

Also hosts the perturbation-robustness probe for a frozen stage-1 model.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

N_BINS = 20
_DIAG, _UP, _LEFT = 0, 1, 2


class DegenerateBandwidthWarning(UserWarning):
    pass


@dataclass
class DtwResult:
    distance: float
    path: list[tuple[int, int]]  # 1-based (m, n) pairs


def _as_seq(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"{name}: expected (T, d) sequence, got shape {a.shape}")
    if len(a) == 0:
        raise ValueError(f"{name}: empty sequence")
    return a


def local_costs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean cost matrix; works on stacked (..., T, d) batches."""
    diff = a[..., :, None, :] - b[..., None, :, :]
    return np.ascontiguousarray(diff * diff).sum(axis=-1)


def _accumulate(cost: np.ndarray) -> np.ndarray:
    """Cumulative DP table over the last two axes (cost may be batched)."""
    ti, tj = cost.shape[-2:]
    acc = np.empty_like(cost)
    for m in range(ti):
        for n in range(tj):
            c = cost[..., m, n]
            if m == 0 and n == 0:
                acc[..., m, n] = c
            elif m == 0:
                acc[..., m, n] = c + acc[..., m, n - 1]
            elif n == 0:
                acc[..., m, n] = c + acc[..., m - 1, n]
            else:
                best = np.minimum(np.minimum(acc[..., m - 1, n], acc[..., m, n - 1]), acc[..., m - 1, n - 1])
                acc[..., m, n] = c + best
    return acc


def dtw(a, b) -> DtwResult:
    a = _as_seq(a, "A")
    b = _as_seq(b, "B")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    acc = _accumulate(local_costs(a, b))
    m, n = len(a) - 1, len(b) - 1
    path = [(m + 1, n + 1)]
    while m > 0 or n > 0:
        if m == 0:
            n -= 1
        elif n == 0:
            m -= 1
        else:
            opts = (acc[m - 1, n - 1], acc[m - 1, n], acc[m, n - 1])
            move = int(np.argmin(opts))  # first minimum: diagonal, then vertical
            if move == _DIAG:
                m, n = m - 1, n - 1
            elif move == _UP:
                m -= 1
            else:
                n -= 1
        path.append((m + 1, n + 1))
    path.reverse()
    return DtwResult(float(acc[-1, -1]), path)


def pairwise_dtw(seqs: Sequence[np.ndarray]) -> np.ndarray:
    """Symmetric (N, N) DTW distance matrix with zero diagonal."""
    seqs = [_as_seq(s, f"sequence {i}") for i, s in enumerate(seqs)]
    n = len(seqs)
    dims = {s.shape[1] for s in seqs}
    if len(dims) > 1:
        raise ValueError(f"sequences have mixed dimensions {sorted(dims)}")
    out = np.zeros((n, n))
    iu, ju = np.triu_indices(n, k=1)
    if len({len(s) for s in seqs}) == 1 and n > 1:
        # equal lengths: run the DP once over all pairs at the same time
        stack = np.stack(seqs)
        acc = _accumulate(local_costs(stack[iu], stack[ju]))
        out[iu, ju] = acc[:, -1, -1]
    else:
        for i, j in zip(iu, ju):
            out[i, j] = _accumulate(local_costs(seqs[i], seqs[j]))[-1, -1]
    out[ju, iu] = out[iu, ju]
    return out


def median_bandwidth(d: np.ndarray) -> float:
    d = np.asarray(d, dtype=np.float64)
    n = len(d)
    if d.shape != (n, n) or n < 2:
        raise ValueError(f"need a square distance matrix with N >= 2, got {d.shape}")
    off = d[~np.eye(n, dtype=bool)]
    return float(np.median(np.sqrt(off)))


def rbf_similarity(d: np.ndarray, sigma: float, allow_degenerate: bool = False) -> np.ndarray:
    """exp(-D / (2 sigma^2)) with unit diagonal.

    ``sigma == 0`` is accepted only with ``allow_degenerate``; similarity is then
    1 for zero distance and 0 otherwise.
    """
    d = np.asarray(d, dtype=np.float64)
    if sigma == 0.0 and allow_degenerate:
        warnings.warn("bandwidth is 0 (most pairs identical); using indicator similarity",
                      DegenerateBandwidthWarning, stacklevel=2)
        s = (d == 0.0).astype(np.float64)
    elif sigma > 0.0:
        # scalar libm exp: correctly rounded and independent of SIMD dispatch
        scale = 2.0 * sigma * sigma
        s = np.array([math.exp(-v / scale) for v in d.ravel()]).reshape(d.shape)
    else:
        raise ValueError(f"bandwidth must be > 0, got {sigma}")
    np.fill_diagonal(s, 1.0)
    return s


def action_similarity(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, float, np.ndarray]:
    """(D, sigma, S_phys) for a list of action sequences."""
    d = pairwise_dtw(seqs)
    sigma = median_bandwidth(d)
    return d, sigma, rbf_similarity(d, sigma, allow_degenerate=True)


def cosine_matrix(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    unit = x / np.where(norms == 0.0, 1.0, norms)
    return unit @ unit.T


def top_k_neighbors(sim: np.ndarray, k: int) -> np.ndarray:
    """(N, k) indices of the k most similar distinct others; ties -> lowest index."""
    n = len(sim)
    if not 0 < k < n:
        raise ValueError(f"top-k needs 0 < k < N, got k={k}, N={n}")
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        others = np.array([j for j in range(n) if j != i])
        # stable sort on -sim keeps index order among equal similarities
        order = np.argsort(-sim[i, others], kind="stable")
        out[i] = others[order[:k]]
    return out


@dataclass
class PaacReport:
    distances: np.ndarray
    sigma: float
    similarity: np.ndarray
    neighbors: np.ndarray  # (N, k)
    scores: np.ndarray  # (N, k) S_phys at (target, neighbour)
    bin_edges: np.ndarray
    density: np.ndarray  # fraction of scores per bin, sums to 1
    ids: list[str] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(self.scores.mean())

    def report_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "rank", "neighbor_id", "score"])
        for i, (nbrs, sc) in enumerate(zip(self.neighbors, self.scores)):
            for r, (j, s) in enumerate(zip(nbrs, sc), 1):
                w.writerow([self.ids[i], r, self.ids[j], repr(float(s))])
        return buf.getvalue()

    def summary_csv(self) -> str:
        n, k = self.scores.shape
        return f"key,value\nn,{n}\nk,{k}\nsigma,{self.sigma!r}\nmean,{self.mean!r}\n"

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "density"])
        for lo, hi, p in zip(self.bin_edges[:-1], self.bin_edges[1:], self.density):
            w.writerow([repr(float(lo)), repr(float(hi)), repr(float(p))])
        return buf.getvalue()


def histogram(scores: np.ndarray, bins: int = N_BINS) -> tuple[np.ndarray, np.ndarray]:
    counts, edges = np.histogram(np.ravel(scores), bins=bins, range=(0.0, 1.0))
    return edges, counts / counts.sum()


def neighbor_consistency(embeddings: np.ndarray, s_phys: np.ndarray, k: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """(neighbour indices, scores) for every target."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if len(embeddings) != len(s_phys):
        raise ValueError(f"{len(embeddings)} embeddings vs {len(s_phys)} action sequences")
    nbrs = top_k_neighbors(cosine_matrix(embeddings), k)
    scores = np.take_along_axis(s_phys, nbrs, axis=1)
    return nbrs, scores


def paac(embeddings: np.ndarray, action_seqs: Sequence[np.ndarray], k: int = 3, bins: int = N_BINS,
         ids: Sequence[str] | None = None) -> PaacReport:
    n = len(action_seqs)
    if k >= n:
        raise ValueError(f"top-k needs k < N, got k={k}, N={n}")
    d, sigma, s = action_similarity(action_seqs)
    nbrs, scores = neighbor_consistency(embeddings, s, k)
    edges, density = histogram(scores, bins)
    ids = [str(i) for i in range(n)] if ids is None else [str(i) for i in ids]
    return PaacReport(d, sigma, s, nbrs, scores, edges, density, ids)


# ---------------------------------------------------------------------------
# file formats


def read_embeddings_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][0] != "id" or not all(h == f"e{i}" for i, h in enumerate(rows[0][1:])):
        raise ValueError(f"{path}: expected header 'id,e0,e1,...'")
    ids = [r[0] for r in rows[1:]]
    return ids, np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def write_embeddings_csv(path: str | Path, ids: Sequence[str], emb: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id"] + [f"e{i}" for i in range(emb.shape[1])])
        for i, row in zip(ids, emb):
            w.writerow([i] + [repr(float(v)) for v in row])


def read_actions_csv(path: str | Path) -> dict[str, np.ndarray]:
    """CSV with columns id, t, a0..a_{d-1}; rows sorted by t within each id."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if len(rows[0]) < 3 or rows[0][:2] != ["id", "t"]:
        raise ValueError(f"{path}: expected header 'id,t,a0,...'")
    groups: dict[str, list[tuple[int, list[float]]]] = {}
    for r in rows[1:]:
        groups.setdefault(r[0], []).append((int(r[1]), [float(v) for v in r[2:]]))
    return {k: np.array([a for _, a in sorted(v)]) for k, v in groups.items()}


def write_actions_csv(path: str | Path, ids: Sequence[str], seqs: Sequence[np.ndarray]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        d = np.asarray(seqs[0]).shape[1]
        w.writerow(["id", "t"] + [f"a{i}" for i in range(d)])
        for i, seq in zip(ids, seqs):
            for t, a in enumerate(seq):
                w.writerow([i, t] + [repr(float(v)) for v in a])


# ---------------------------------------------------------------------------
# perturbation robustness


@dataclass(frozen=True)
class Perturbation:
    kind: str  # gaussian_noise | brightness
    strength: float  # stddev or offset, in pixel units

    def __post_init__(self):
        if self.kind not in ("gaussian_noise", "brightness"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.kind == "gaussian_noise" and self.strength < 0:
            raise ValueError("gaussian noise stddev must be >= 0")

    def apply(self, frames: np.ndarray, seed: int) -> np.ndarray:
        x = np.asarray(frames, dtype=np.float64)
        if self.strength == 0.0:
            return x.copy()
        if self.kind == "gaussian_noise":
            x = x + np.random.default_rng(seed).normal(0.0, self.strength, size=x.shape)
        else:
            x = x + self.strength
        return np.clip(x, 0.0, 255.0)


@dataclass
class ProbeRow:
    clip: int
    embedding_mse: float
    action_mse_clean: float
    action_mse_perturbed: float
    action_bias: float


def perturbation_probe(model, tokenizer, clips: np.ndarray, chunks: np.ndarray, perturbation: Perturbation,
                       seed: int = 0) -> list[ProbeRow]:
    """Per-clip robustness of a frozen stage-1 model (``training.Stage1``).

    ``chunks`` are ground-truth action chunks in the same units the head predicts.
    """
    from .training import stage1_predict

    if not model.frozen:
        raise ValueError("perturbation probe needs a frozen model")
    noisy = perturbation.apply(clips, seed)
    m_clean, _, p_clean = stage1_predict(model, tokenizer, clips, np.random.default_rng([seed, 3]))
    m_pert, _, p_pert = stage1_predict(model, tokenizer, noisy, np.random.default_rng([seed, 3]))
    rows = []
    for i in range(len(clips)):
        rows.append(ProbeRow(
            i,
            float(np.mean((m_clean[i] - m_pert[i]) ** 2)),
            float(np.mean((p_clean[i] - chunks[i]) ** 2)),
            float(np.mean((p_pert[i] - chunks[i]) ** 2)),
            float(np.mean(np.abs(p_pert[i] - p_clean[i]))),
        ))
    return rows


def probe_csv(rows: Sequence[ProbeRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["clip", "embedding_mse", "action_mse_clean", "action_mse_perturbed", "action_bias"])
    for r in rows:
        w.writerow([r.clip] + [repr(v) for v in (r.embedding_mse, r.action_mse_clean, r.action_mse_perturbed, r.action_bias)])
    return buf.getvalue()
