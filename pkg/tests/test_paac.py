import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from jvpm import paac as pc


def brute_force_dtw(a, b):
    """Minimum path cost over every monotonic alignment path, by enumeration."""
    ti, tj = len(a), len(b)
    cost = [[sum((x - y) * (x - y) for x, y in zip(a[m], b[n])) for n in range(tj)] for m in range(ti)]
    best = math.inf

    def walk(m, n, total):
        nonlocal best
        total = total + cost[m][n]
        if (m, n) == (ti - 1, tj - 1):
            best = min(best, total)
            return
        if m + 1 < ti:
            walk(m + 1, n, total)
        if n + 1 < tj:
            walk(m, n + 1, total)
        if m + 1 < ti and n + 1 < tj:
            walk(m + 1, n + 1, total)

    walk(0, 0, 0.0)
    return best


def straight_line_similarity(seqs):
    """The consistency-matrix algorithm written out with plain loops."""
    n = len(seqs)
    dist = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            a, b = seqs[i], seqs[j]
            acc = [[0.0] * len(b) for _ in range(len(a))]
            for m in range(len(a)):
                for k in range(len(b)):
                    c = sum((x - y) * (x - y) for x, y in zip(a[m], b[k]))
                    if m == 0 and k == 0:
                        acc[m][k] = c
                    elif m == 0:
                        acc[m][k] = c + acc[m][k - 1]
                    elif k == 0:
                        acc[m][k] = c + acc[m - 1][k]
                    else:
                        acc[m][k] = c + min(acc[m - 1][k], acc[m][k - 1], acc[m - 1][k - 1])
            dist[i][j] = acc[-1][-1]
    roots = sorted(math.sqrt(dist[i][j]) for i in range(n) for j in range(n) if i != j)
    h = len(roots) // 2
    sigma = roots[h] if len(roots) % 2 else (roots[h - 1] + roots[h]) / 2
    sim = [[math.exp(-dist[i][j] / (2.0 * sigma * sigma)) for j in range(n)] for i in range(n)]
    return dist, sigma, sim


# ---------------------------------------------------------------------------
# dtw


def test_dtw_matches_enumeration_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        d = int(rng.integers(1, 3))
        a = rng.normal(size=(int(rng.integers(1, 6)), d))
        b = rng.normal(size=(int(rng.integers(1, 6)), d))
        assert pc.dtw(a, b).distance == brute_force_dtw(a.tolist(), b.tolist())


def test_dtw_examples():
    assert pc.dtw([0.0], [2.0]).distance == 4.0
    res = pc.dtw([0.0, 0.0, 1.0], [0.0, 1.0, 1.0])
    assert res.distance == 0.0
    assert res.path == [(1, 1), (2, 1), (3, 2), (3, 3)]


def test_dtw_errors():
    with pytest.raises(ValueError, match="dimension"):
        pc.dtw(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError, match="empty"):
        pc.dtw(np.zeros((0, 2)), np.zeros((3, 2)))


def test_dtw_tie_break_prefers_diagonal():
    # equal costs everywhere: the diagonal path is returned
    assert pc.dtw(np.zeros((3, 1)), np.zeros((3, 1))).path == [(1, 1), (2, 2), (3, 3)]


seq = hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.just(2)), elements=st.floats(-5, 5))


@given(seq, seq)
def test_dtw_path_invariants_and_symmetry(a, b):
    res = pc.dtw(a, b)
    assert res.path[0] == (1, 1) and res.path[-1] == (len(a), len(b))
    for (m0, n0), (m1, n1) in zip(res.path, res.path[1:]):
        assert (m1 - m0, n1 - n0) in {(1, 0), (0, 1), (1, 1)}
    along = sum(float(np.sum((a[m - 1] - b[n - 1]) ** 2)) for m, n in res.path)
    assert along == pytest.approx(res.distance, rel=1e-12, abs=1e-12)
    assert pc.dtw(b, a).distance == res.distance
    assert pc.dtw(a, a).distance == 0.0


@given(seq, st.data())
def test_dtw_tolerates_repeated_frames(a, data):
    i = data.draw(st.integers(0, len(a) - 1))
    dup = np.insert(a, i, a[i], axis=0)
    assert pc.dtw(a, dup).distance == 0.0


def test_pairwise_batched_equals_loop():
    rng = np.random.default_rng(1)
    seqs = [rng.normal(size=(6, 3)) for _ in range(7)]
    d = pc.pairwise_dtw(seqs)
    for i in range(7):
        for j in range(7):
            assert d[i, j] == pc.dtw(seqs[i], seqs[j]).distance
    mixed = seqs[:3] + [rng.normal(size=(4, 3))]
    dm = pc.pairwise_dtw(mixed)
    assert dm[0, 3] == pc.dtw(mixed[0], mixed[3]).distance


# ---------------------------------------------------------------------------
# bandwidth and kernel


def test_median_bandwidth_examples():
    d = np.array([[0, 1, 4], [1, 0, 9], [4, 9, 0]], dtype=float)
    assert pc.median_bandwidth(d) == 2.0
    assert pc.median_bandwidth(np.array([[0, 5.0], [5.0, 0]])) == math.sqrt(5.0)
    with pytest.raises(ValueError):
        pc.median_bandwidth(np.zeros((1, 1)))


@given(st.integers(2, 9), st.integers(0, 2 ** 16))
def test_median_bandwidth_matches_sort_oracle(n, seed):
    d = np.random.default_rng(seed).uniform(0, 10, size=(n, n))
    off = sorted(math.sqrt(d[i, j]) for i in range(n) for j in range(n) if i != j)
    h = len(off) // 2
    expected = off[h] if len(off) % 2 else (off[h - 1] + off[h]) / 2
    assert pc.median_bandwidth(d) == expected


def test_rbf_examples():
    sigma = 1.7
    d = np.array([[0.0, 2 * sigma ** 2], [2 * sigma ** 2, 0.0]])
    s = pc.rbf_similarity(d, sigma)
    assert s[0, 0] == 1.0
    assert abs(s[0, 1] - math.exp(-1.0)) < 1e-12
    assert pc.rbf_similarity(np.array([[0.0, 1.0], [1.0, 0.0]]), sigma)[0, 1] > s[0, 1]
    with pytest.raises(ValueError):
        pc.rbf_similarity(d, 0.0)
    with pytest.raises(ValueError):
        pc.rbf_similarity(d, -1.0)


def test_degenerate_bandwidth_uses_indicator():
    # 12 of the 20 ordered pairs are identical, so the median distance is 0
    seqs = [np.zeros((4, 3))] * 4 + [np.ones((4, 3))]
    with pytest.warns(pc.DegenerateBandwidthWarning):
        d, sigma, s = pc.action_similarity(seqs)
    assert sigma == 0.0
    assert s[0, 1] == 1.0 and s[0, 4] == 0.0 and s[4, 4] == 1.0
    # a single differing pair among three keeps sigma positive
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        _, sigma, _ = pc.action_similarity([np.zeros((4, 3))] * 3 + [np.ones((4, 3))])
    assert sigma > 0


@given(st.integers(2, 8), st.integers(0, 2 ** 16))
def test_similarity_matrix_properties(n, seed):
    rng = np.random.default_rng(seed)
    seqs = [rng.normal(size=(5, 2)) for _ in range(n)]
    _, sigma, s = pc.action_similarity(seqs)
    assert sigma > 0
    assert np.all((0 <= s) & (s <= 1))
    assert np.array_equal(s, s.T)
    assert np.all(np.diag(s) == 1.0)


def test_pipeline_matches_straight_line_algorithm():
    rng = np.random.default_rng(2)
    for trial in range(20):
        n = int(rng.integers(2, 8))
        t = int(rng.integers(1, 8))
        seqs = [rng.normal(size=(t, int(1 + trial % 3))) for _ in range(n)]
        d, sigma, s = pc.action_similarity(seqs)
        od, osigma, osim = straight_line_similarity([q.tolist() for q in seqs])
        assert d.tolist() == od
        assert sigma == osigma
        assert s.tolist() == osim


# ---------------------------------------------------------------------------
# neighbours and report


def test_top_k_tie_rule_and_validation():
    sim = np.ones((5, 5))
    assert pc.top_k_neighbors(sim, 3).tolist() == [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2], [0, 1, 2]]
    for k in (0, 5, 6):
        with pytest.raises(ValueError):
            pc.top_k_neighbors(sim, k)


def test_identical_embeddings_pick_lowest_indices():
    rng = np.random.default_rng(3)
    seqs = [rng.normal(size=(4, 2)) for _ in range(6)]
    report = pc.paac(np.ones((6, 4)), seqs, k=2)
    assert report.neighbors[0].tolist() == [1, 2]
    assert report.neighbors[4].tolist() == [0, 1]
    assert report.scores[4].tolist() == [report.similarity[4, 0], report.similarity[4, 1]]


def test_neighbours_match_brute_force_when_embeddings_are_actions():
    rng = np.random.default_rng(4)
    n, t, k = 12, 6, 3
    angles = rng.permutation(np.linspace(0, np.pi, n, endpoint=False)) + rng.uniform(0, 0.05, n)
    seqs = [np.tile([np.cos(th), np.sin(th)], (t, 1)) for th in angles]
    emb = np.stack([s.reshape(-1) for s in seqs])
    report = pc.paac(emb, seqs, k=k)
    for i in range(n):
        off = sorted((report.similarity[i, j] for j in range(n) if j != i), reverse=True)
        assert sorted(report.scores[i].tolist(), reverse=True) == off[:k]


def test_histogram_normalisation():
    rng = np.random.default_rng(5)
    seqs = [rng.normal(size=(5, 3)) for _ in range(30)]
    report = pc.paac(rng.normal(size=(30, 8)), seqs, k=3)
    assert len(report.density) == 20 == len(report.bin_edges) - 1
    assert abs(report.density.sum() - 1.0) < 1e-9
    assert report.mean == pytest.approx(report.scores.mean())
    edges, dens = pc.histogram(np.array([0.0, 1.0, 1.0, 0.5]), bins=4)
    assert dens.tolist() == [0.25, 0.0, 0.25, 0.5]


def test_report_csvs():
    rng = np.random.default_rng(6)
    seqs = [rng.normal(size=(5, 3)) for _ in range(5)]
    report = pc.paac(rng.normal(size=(5, 4)), seqs, k=2, ids=list("abcde"))
    lines = report.report_csv().splitlines()
    assert lines[0] == "id,rank,neighbor_id,score"
    assert len(lines) == 1 + 5 * 2
    assert lines[1].startswith("a,1,")
    hist = report.histogram_csv().splitlines()
    assert hist[0] == "bin_left,bin_right,density" and len(hist) == 21
    assert "sigma," in report.summary_csv()


def test_paac_validation():
    seqs = [np.zeros((3, 2)), np.ones((3, 2)), np.full((3, 2), 2.0)]
    with pytest.raises(ValueError):
        pc.paac(np.zeros((3, 2)), seqs, k=3)
    with pytest.raises(ValueError):
        pc.neighbor_consistency(np.zeros((2, 2)), np.eye(3))


def test_csv_round_trips(tmp_path):
    rng = np.random.default_rng(7)
    ids = ["x", "y", "z"]
    emb = rng.normal(size=(3, 4))
    seqs = [rng.normal(size=(5, 3)) for _ in ids]
    pc.write_embeddings_csv(tmp_path / "e.csv", ids, emb)
    got_ids, got = pc.read_embeddings_csv(tmp_path / "e.csv")
    assert got_ids == ids and np.array_equal(got, emb)
    pc.write_actions_csv(tmp_path / "a.csv", ids, seqs)
    back = pc.read_actions_csv(tmp_path / "a.csv")
    assert list(back) == ids
    for i, s in zip(ids, seqs):
        assert np.array_equal(back[i], s)
    (tmp_path / "bad.csv").write_text("name,v0\n")
    with pytest.raises(ValueError):
        pc.read_embeddings_csv(tmp_path / "bad.csv")


# ---------------------------------------------------------------------------
# perturbations


def test_zero_strength_is_identity():
    frames = np.random.default_rng(0).integers(0, 256, size=(2, 17, 32, 32)).astype(np.uint8)
    for kind in ("gaussian_noise", "brightness"):
        out = pc.Perturbation(kind, 0.0).apply(frames, seed=3)
        assert np.array_equal(out, frames.astype(np.float64))


def test_perturbation_determinism_and_clamp():
    frames = np.full((3, 8, 8), 250, dtype=np.uint8)
    p = pc.Perturbation("gaussian_noise", 16.0)
    assert np.array_equal(p.apply(frames, 1), p.apply(frames, 1))
    assert not np.array_equal(p.apply(frames, 1), p.apply(frames, 2))
    assert p.apply(frames, 1).max() <= 255.0
    bright = pc.Perturbation("brightness", 10.0).apply(frames, 0)
    assert np.all(bright == 255.0)
    dark = pc.Perturbation("brightness", -300.0).apply(frames, 0)
    assert np.all(dark == 0.0)


def test_perturbation_validation():
    with pytest.raises(ValueError):
        pc.Perturbation("blur", 1.0)
    with pytest.raises(ValueError):
        pc.Perturbation("gaussian_noise", -1.0)


@pytest.mark.parametrize("head", ["oft", "flow"])
def test_probe_zero_strength_gives_zero_deltas(small_data, head):
    from jvpm import config as cfgmod
    from jvpm.training import Stage1, Windows, tokenizer_for

    cfg = cfgmod.apply(cfgmod.Config(), {"model.dim": "16", "head.kind": head})
    model = Stage1(cfg, np.random.default_rng(0))
    b = Windows(small_data, cfg).gather(np.arange(4))
    with pytest.raises(ValueError, match="frozen"):
        pc.perturbation_probe(model, tokenizer_for(cfg), b.clips, b.chunks, pc.Perturbation("gaussian_noise", 0.0))
    model.freeze()
    rows = pc.perturbation_probe(model, tokenizer_for(cfg), b.clips, b.chunks, pc.Perturbation("gaussian_noise", 0.0))
    assert all(r.embedding_mse == 0.0 and r.action_bias == 0.0 for r in rows)
    assert all(r.action_mse_clean == r.action_mse_perturbed for r in rows)
    noisy = pc.Perturbation("gaussian_noise", 8.0)
    a = pc.probe_csv(pc.perturbation_probe(model, tokenizer_for(cfg), b.clips, b.chunks, noisy, seed=5))
    c = pc.probe_csv(pc.perturbation_probe(model, tokenizer_for(cfg), b.clips, b.chunks, noisy, seed=5))
    assert a == c
    assert a.splitlines()[0] == "clip,embedding_mse,action_mse_clean,action_mse_perturbed,action_bias"
