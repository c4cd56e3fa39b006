from __future__ import annotations

import math

import numpy as np
import pytest
import scipy.sparse as sp
from scipy import stats

import oracles
from helpers import make_dataset, synthetic_dataset
from recmem.recsys import (
    BPRMF,
    EASE,
    InteractionMatrix,
    ItemKNN,
    LightGCN,
    MostPop,
    Random,
    UserKNN,
    hr_at_k,
    make_model,
    metrics_table,
    ndcg_at_k,
    recommend,
    score_random,
    solve_ease,
)
from recmem.recsys.bpr import BPRConfig, TripleSampler, init_factors, sgd_epoch, triple_grads, triple_loss
from recmem.recsys.lightgcn import normalized_adjacency, propagate
from recmem.recsys.persist import ModelFormatError, load_model, save_model


def matrix_from_dense(r: np.ndarray) -> InteractionMatrix:
    return InteractionMatrix(np.arange(1, r.shape[0] + 1), np.arange(1, r.shape[1] + 1), sp.csr_matrix(r))


def random_ratings(rng, n_users, n_items, density=0.3):
    r = rng.integers(1, 6, size=(n_users, n_items)).astype(float)
    r[rng.random((n_users, n_items)) > density] = 0
    return r


# ---- metrics -------------------------------------------------------------


def test_hr_examples():
    assert hr_at_k([7, 1, 2], {7}, 1) == 1
    assert hr_at_k([1, 2, 3, 4, 5, 9], {9}, 5) == 0
    assert hr_at_k(["A", "B", "C"], {"B"}, 2) == 1
    with pytest.raises(ValueError):
        hr_at_k([1], {1}, 0)


def test_ndcg_examples():
    for k in (1, 5, 10):
        assert ndcg_at_k([4, 1, 2], {4}, k) == 1.0
    assert ndcg_at_k([1, 2, 3, 4, 5], {3}, 5) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError):
        ndcg_at_k([1], set(), 3)


def test_ndcg_against_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(300):
        n = int(rng.integers(1, 7))
        ranking = rng.permutation(6)[:n].tolist()
        relevant = set(rng.choice(6, size=int(rng.integers(1, 4)), replace=False).tolist())
        k = int(rng.integers(1, 7))
        assert abs(ndcg_at_k(ranking, relevant, k) - oracles.brute_ndcg(ranking, relevant, k)) <= 1e-12


def test_metrics_table_skips_users_without_relevant_items():
    table = metrics_table({1: [5, 6], 2: [7], 3: [1]}, {1: {6}, 2: set()})
    assert table.n_users == 1
    assert table["HR@1"] == 0.0 and table["HR@5"] == 1.0
    assert table["nDCG@5"] == pytest.approx(1 / math.log2(3))


# ---- simple baselines ----------------------------------------------------


def test_random_scores_deterministic_and_independent():
    assert np.array_equal(score_random(5, 20, 42), score_random(5, 20, 42))
    assert not np.array_equal(score_random(5, 20, 42), score_random(6, 20, 42))


def test_random_rank_one_is_uniform():
    n_items, trials = 8, 10_000
    firsts = np.array([int(np.argmax(score_random(u, n_items, 42))) for u in range(trials)])
    counts = np.bincount(firsts, minlength=n_items)
    expected = trials / n_items
    sigma = math.sqrt(trials * (1 / n_items) * (1 - 1 / n_items))
    assert np.all(np.abs(counts - expected) <= 3 * sigma)
    assert stats.chisquare(counts).pvalue > 0.001


def test_mostpop_ranking_and_filtering():
    r = np.array([[1, 1, 0], [1, 0, 0], [1, 0, 0]], dtype=float)
    m = matrix_from_dense(r)
    model = MostPop().fit(m)
    out = recommend(model, m, [2, 3], n=3)
    assert out[2].items == [2, 3] and out[3].items == [2, 3]
    # ties go to the lower id
    r2 = np.array([[0, 1, 1], [0, 0, 0]], dtype=float)
    m2 = matrix_from_dense(r2)
    assert recommend(MostPop().fit(m2), m2, [2], n=3)[2].items == [2, 3, 1]


# ---- KNN -----------------------------------------------------------------


def test_userknn_identical_and_orthogonal_users():
    r = np.array([[5, 3, 0, 0], [5, 3, 0, 0], [0, 0, 4, 2]], dtype=float)
    m = matrix_from_dense(r)
    sims = UserKNN().fit(m).similarities(np.array([0]))
    assert sims[0, 1] == pytest.approx(1.0, abs=1e-15)
    assert sims[0, 2] == 0.0


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("k", [1, 3, 50])
def test_knn_match_brute_force(seed, k):
    rng = np.random.default_rng(seed)
    r = random_ratings(rng, 12, 9)
    m = matrix_from_dense(r)
    users = np.arange(r.shape[0])
    uk = UserKNN(k).fit(m).score(m, users)
    ik = ItemKNN(k).fit(m).score(m, users)
    for u in users:
        assert np.max(np.abs(uk[u] - oracles.userknn_scores(r, u, k))) <= 1e-12
        assert np.max(np.abs(ik[u] - oracles.itemknn_scores(r, u, k))) <= 1e-12


def test_itemknn_is_userknn_on_transpose():
    rng = np.random.default_rng(11)
    r = random_ratings(rng, 7, 7, 0.5)
    r = np.triu(r) + np.triu(r, 1).T  # symmetric instance
    m = matrix_from_dense(r)
    # score_item(u, i) = sum_j sim(i, j) r_uj; score_user(i, u) on R^T is sum_v sim(i, v) r_vu
    ik = ItemKNN(3).fit(m).score(m, np.arange(7))
    ut = matrix_from_dense(r.T)
    uk = UserKNN(3).fit(ut).score(ut, np.arange(7))
    assert np.max(np.abs(ik - uk.T)) <= 1e-12


def test_itemknn_single_item_user_and_empty_intersection():
    r = np.array([[5, 0, 0, 0], [4, 4, 0, 0], [1, 0, 3, 0], [0, 0, 0, 2]], dtype=float)
    m = matrix_from_dense(r)
    model = ItemKNN(50).fit(m)
    s = model.score(m, np.array([0]))[0]
    cos = [oracles.cosine(r[:, 0], r[:, j]) for j in range(4)]
    assert np.allclose(s[1:], [5 * c for c in cos[1:]], atol=1e-12)
    assert model.score(m, np.array([3]))[0].tolist() == [0.0, 0.0, 0.0, 0.0]


def test_knn_fallback_for_users_without_neighbours():
    r = np.array([[5, 0, 0], [0, 4, 0], [0, 3, 0]], dtype=float)
    m = matrix_from_dense(r)
    out = recommend(UserKNN().fit(m), m, [1, 99], n=3, fallback=MostPop().fit(m))
    assert out[1].items == [2, 3]
    assert out[99].items == [2, 1, 3]


# ---- EASE ----------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_ease_matches_columnwise_ridge(seed):
    rng = np.random.default_rng(seed)
    x = (rng.random((15, 5)) < 0.4).astype(float)
    b = solve_ease(x, 2.0)
    assert np.max(np.abs(b - oracles.ease_columnwise(x, 2.0))) <= 1e-6
    assert np.all(np.diag(b) == 0.0)


def test_ease_large_lambda_vanishes():
    x = (np.random.default_rng(0).random((10, 5)) < 0.5).astype(float)
    assert np.linalg.norm(solve_ease(x, 1e9)) <= 1e-3
    with pytest.raises(ValueError):
        solve_ease(x, 0.0)


def test_ease_scores_use_binary_rows():
    r = random_ratings(np.random.default_rng(1), 8, 6, 0.5)
    m = matrix_from_dense(r)
    model = EASE(lam=1.0).fit(m)
    assert np.allclose(model.score(m, np.arange(8)), (r > 0).astype(float) @ model.B)


# ---- BPRMF ---------------------------------------------------------------


def test_bpr_gradients_against_finite_differences():
    rng = np.random.default_rng(0)
    user = rng.normal(0, 0.5, (6, 4))
    item = rng.normal(0, 0.5, (9, 4))
    bias = rng.normal(0, 0.5, 9)
    for _ in range(20):
        u, i, j = int(rng.integers(6)), int(rng.integers(9)), int(rng.integers(9))
        if i == j:
            continue
        g = triple_grads(user, item, bias, u, i, j, 0.01, 0.02)
        f = lambda: triple_loss(user, item, bias, u, i, j, 0.01, 0.02)
        pu = oracles.central_diff(f, user, 1e-5)[u]
        qi = oracles.central_diff(f, item, 1e-5)
        bb = oracles.central_diff(f, bias, 1e-5)
        assert np.allclose(g["p_u"], pu, rtol=1e-4, atol=1e-8)
        assert np.allclose(g["q_i"], qi[i], rtol=1e-4, atol=1e-8)
        assert np.allclose(g["q_j"], qi[j], rtol=1e-4, atol=1e-8)
        assert g["b_i"] == pytest.approx(bb[i], rel=1e-4, abs=1e-8)
        assert g["b_j"] == pytest.approx(bb[j], rel=1e-4, abs=1e-8)


def test_sgd_kernel_applies_the_analytic_step():
    rng = np.random.default_rng(5)
    user, item = rng.normal(0, 0.3, (3, 4)), rng.normal(0, 0.3, (5, 4))
    bias = rng.normal(0, 0.3, 5)
    cfg = BPRConfig(factors=4, lr=0.1, l2=0.01, l2_bias=0.02)
    g = triple_grads(user, item, bias, 1, 2, 4, cfg.l2, cfg.l2_bias)
    expect_user = user[1] - cfg.lr * g["p_u"]
    expect_qi = item[2] - cfg.lr * g["q_i"]
    expect_bj = bias[4] - cfg.lr * g["b_j"]
    loss = triple_loss(user, item, bias, 1, 2, 4, cfg.l2, cfg.l2_bias)
    got = sgd_epoch(user, item, bias, (np.array([1]), np.array([2]), np.array([4])), cfg)
    assert got == pytest.approx(loss, rel=1e-12)
    assert np.allclose(user[1], expect_user, atol=1e-14)
    assert np.allclose(item[2], expect_qi, atol=1e-14)
    assert bias[4] == pytest.approx(expect_bj, abs=1e-14)


def test_sampler_covers_positives_and_avoids_them():
    r = (np.random.default_rng(2).random((6, 8)) < 0.4).astype(float)
    r[0] = 1.0  # a user with no negatives is skipped
    pos = sp.csr_matrix(r)
    s = TripleSampler(pos, 42)
    u, i, j = s.epoch()
    expected = {(a, b) for a, b in zip(*np.nonzero(r)) if a != 0}
    assert set(zip(u.tolist(), i.tolist())) == expected and len(u) == len(expected)
    assert not np.any(r[u, j])


def test_bpr_zero_epochs_returns_init_and_determinism():
    m = matrix_from_dense(random_ratings(np.random.default_rng(0), 20, 20))
    model = BPRMF(epochs=0, factors=8).fit(m)
    u0, i0 = init_factors(20, 20, 8, 0.1, 42)
    assert np.array_equal(model.user_factors, u0) and np.array_equal(model.item_factors, i0)
    a = BPRMF(epochs=3, factors=8).fit(m)
    b = BPRMF(epochs=3, factors=8).fit(m)
    assert np.array_equal(a.user_factors, b.user_factors)


def test_bpr_loss_decreases_on_small_instance():
    m = matrix_from_dense(random_ratings(np.random.default_rng(4), 20, 20, 0.4))
    model = BPRMF(epochs=40, factors=8, lr=0.05).fit(m)
    h = model.history
    assert np.mean(h[-5:]) < np.mean(h[:5])
    # averaged over windows the curve never goes up
    w = np.convolve(h, np.ones(8) / 8, mode="valid")
    assert np.all(np.diff(w[::8]) <= 0)


def test_bpr_divergence_raises():
    m = matrix_from_dense(random_ratings(np.random.default_rng(4), 10, 10, 0.5))
    from recmem.recsys import TrainingError

    with pytest.raises(TrainingError):
        BPRMF(epochs=5, factors=4, lr=1e6, init_std=10.0).fit(m)


# ---- LightGCN ------------------------------------------------------------


def test_lightgcn_zero_layers_equals_bpr_without_bias():
    m = matrix_from_dense(random_ratings(np.random.default_rng(8), 15, 12, 0.35))
    hp = dict(factors=6, lr=0.05, l2=0.003, epochs=4, seed=9, init_std=0.1)
    bpr = BPRMF(use_bias=False, l2_bias=0.0, **hp).fit(m)
    gcn = LightGCN(layers=0, optimizer="sgd", batch_size=1, **hp).fit(m)
    users = np.arange(15)
    assert np.max(np.abs(bpr.score(m, users) - gcn.score(m, users))) <= 1e-10


def test_path_graph_propagation_by_hand():
    # users u1, u2; items i1, i2; edges u1-i1, u2-i1, u2-i2
    pos = sp.csr_matrix(np.array([[1, 0], [1, 1]], dtype=float))
    adj = normalized_adjacency(pos).toarray()
    s = 1 / math.sqrt(2)
    expect = np.array([
        [0, 0, s, 0],
        [0, 0, 0.5, s],
        [s, 0.5, 0, 0],
        [0, s, 0, 0],
    ])
    assert np.allclose(adj, expect, atol=1e-15)
    e = np.array([[1.0], [2.0], [3.0], [4.0]])
    one = propagate(sp.csr_matrix(adj), e, 1)
    # mean of layer 0 and layer 1
    layer1 = np.array([[3 * s], [1.5 + 4 * s], [s + 1.0], [2 * s]])
    assert np.allclose(one, (e + layer1) / 2, atol=1e-15)


def test_propagation_norm_bound():
    rng = np.random.default_rng(0)
    pos = sp.csr_matrix((rng.random((8, 10)) < 0.3).astype(float))
    adj = normalized_adjacency(pos)
    spectral = np.linalg.norm(adj.toarray(), 2)
    assert spectral <= 1 + 1e-12
    e = rng.normal(size=(18, 4))
    nxt = adj @ e
    assert np.linalg.norm(nxt, 2) <= spectral * np.linalg.norm(e, 2) + 1e-12


def test_lightgcn_trains_and_is_deterministic():
    m = matrix_from_dense(random_ratings(np.random.default_rng(2), 25, 30, 0.3))
    a = LightGCN(factors=8, epochs=15, batch_size=32, lr=0.01).fit(m)
    b = LightGCN(factors=8, epochs=15, batch_size=32, lr=0.01).fit(m)
    assert np.array_equal(a.embeddings, b.embeddings)
    assert a.history[-1] < a.history[0]


# ---- recommend / persistence ----------------------------------------------


@pytest.mark.parametrize("name", ["random", "mostpop", "userknn", "itemknn", "ease", "bprmf", "lightgcn"])
def test_rankings_exclude_training_items(name):
    ds = synthetic_dataset(n_items=25, n_users=10)
    m = InteractionMatrix.from_log(ds.ratings, item_ids=ds.items.ids)
    hyper = {"epochs": 2} if name in ("bprmf", "lightgcn") else {}
    model = make_model(name, **hyper).fit(m)
    out = recommend(model, m, m.user_ids.tolist(), n=10)
    hist = ds.ratings.histories()
    for uid, ranked in out.items():
        assert not set(ranked.items) & set(hist[uid].tolist())
        assert len(set(ranked.items)) == len(ranked.items)
        assert all(a >= b for a, b in zip(ranked.scores, ranked.scores[1:]))
        assert [r for r, _, _ in ranked.entries] == list(range(1, len(ranked) + 1))


def test_make_model_unknown():
    with pytest.raises(ValueError):
        make_model("svd")


@pytest.mark.parametrize("kind", ["ease", "bprmf"])
def test_persist_round_trip(tmp_path, kind):
    m = matrix_from_dense(random_ratings(np.random.default_rng(0), 9, 7, 0.5))
    model = EASE(lam=5.0).fit(m) if kind == "ease" else BPRMF(epochs=2, factors=3).fit(m)
    path = tmp_path / "model.bin"
    save_model(model, path, m.item_ids, m.user_ids)
    loaded, arrays = load_model(path)
    assert np.array_equal(loaded.score(m, np.arange(9)), model.score(m, np.arange(9)))
    assert arrays["item_ids"].tolist() == m.item_ids.tolist()
    blob = path.read_bytes()
    assert blob[:8] == b"RECMEM\x00\x01"
    path.write_bytes(blob[:-3])
    with pytest.raises(ModelFormatError):
        load_model(path)
    path.write_bytes(b"NOTMAGIC" + blob[8:])
    with pytest.raises(ModelFormatError):
        load_model(path)


def test_from_log_keeps_last_duplicate_and_widens_catalog():
    ds = make_dataset(
        ["1::A (1990)::Drama", "2::B (1990)::Drama", "5::C (1990)::Drama"],
        ["1::M::25::1::00000"],
        ["1::2::3::10", "1::2::5::11"],
    )
    m = InteractionMatrix.from_log(ds.ratings, item_ids=ds.items.ids)
    assert m.item_ids.tolist() == [1, 2, 5]
    assert m.ratings.toarray().tolist() == [[0.0, 5.0, 0.0]]
