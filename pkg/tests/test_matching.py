import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clusterloc.ann import AnnIndex, SearchBudget, build_index
from clusterloc.matching import (K_RATIO, LOCAL_RATIO, T_RATIO, MatchCandidate, MatchConfig, MatchSet,
                                 best_buddy_filter, cluster_ratio_tests, cluster_wise_ratio_test,
                                 global_forward_match, k_ratio, safe_ratio, t_ratio)
from clusterloc.model import l2_distances

from conftest import make_model, make_query
from oracles import distance_matrix, exact_local_ratios, k_ratio_counts, t_ratio_counts, random_clustered_views


def line_index(dists):
    """1-D descriptors placed at the given distances from the origin."""
    X = np.asarray(dists, dtype=float).reshape(-1, 1)
    return X, AnnIndex(X, leaf_size=2)


# k-ratio forward matching

def test_k_ratio_half_admits_k_pairs():
    X, idx = line_index([0.5, 0.6, 0.7, 0.8, 0.9, 1.0])
    M = global_forward_match(make_query([[0.0]]), idx, MatchConfig(k=5), SearchBudget(None))
    assert len(M) == 5
    assert {m.view_id for m in M} == {0, 1, 2, 3, 4}
    assert all(m.ratio == pytest.approx(0.5) and m.test_kind == K_RATIO for m in M)


def test_k_ratio_equal_distances_rejected():
    X, idx = line_index([1.0, -1.0, 1.0, -1.0, 1.0, -1.0])
    M = global_forward_match(make_query([[0.0]]), idx, MatchConfig(k=5), SearchBudget(None))
    assert len(M) == 0
    assert k_ratio([1.0, 1.0]) == 1.0


def test_zero_over_zero_is_indistinct():
    assert safe_ratio(0.0, 0.0) == 1.0
    assert k_ratio([0.0, 0.0, 0.0]) == 1.0


def test_zero_feature_query_rejected():
    _, idx = line_index([1.0, 2.0])
    with pytest.raises(ValueError, match="no features"):
        global_forward_match(make_query(np.zeros((0, 1))), idx)


def test_forward_match_stops_at_target():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(500, 4))
    idx = AnnIndex(X)
    q = make_query(X[:100] + rng.normal(scale=0.01, size=(100, 4)))
    M = global_forward_match(q, idx, MatchConfig(k=5, n_forward=20), SearchBudget(None))
    # stops once 20 pairs are reached, at most one feature's worth over
    assert 20 <= len(M) < 25
    full = global_forward_match(q, idx, MatchConfig(k=5, n_forward=None), SearchBudget(None))
    assert M.pairs() <= full.pairs()


def test_forward_match_oracle_recheck(small_world):
    m = small_world.model
    idx = build_index(m)
    cfg = MatchConfig(n_forward=200)
    for q in small_world.queries:
        M = global_forward_match(q, idx, cfg, SearchBudget())
        assert len(M) >= 200 or len(M) % cfg.k == 0
        for c in M:
            row = q.row_of[c.query_feature_id]
            d = l2_distances(m.descriptors[c.view_id], q.descriptors[row])
            assert c.distance == d
            assert c.ratio <= cfg.tau
        # under an unlimited budget the stored ratio is the brute-force k-ratio
        exact = global_forward_match(q, AnnIndex(m.descriptors), cfg, SearchBudget(None))
        for c in exact:
            row = q.row_of[c.query_feature_id]
            dist = np.sort(l2_distances(m.descriptors, q.descriptors[row]))
            assert c.ratio == dist[0] / dist[cfg.k]


def test_forward_match_deterministic(small_world):
    idx = build_index(small_world.model)
    q = small_world.queries[1]
    a = global_forward_match(q, idx, MatchConfig(seed=4))
    b = global_forward_match(q, idx, MatchConfig(seed=4))
    assert a.matches == b.matches


# cluster-wise tests

def test_local_ratio_example():
    out = cluster_ratio_tests([0.3, 0.5], [0, 1], [0, 1], [0, 0], [np.inf, np.inf], 0.7)
    assert len(out) == 1
    pos, ratio, kind, ok = out[0]
    assert pos == 0 and kind == LOCAL_RATIO and ok
    assert ratio == pytest.approx(0.6)


def test_t_ratio_example():
    (pos, ratio, kind, ok), = cluster_ratio_tests([0.3], [4], [0], [2], [0.3], 0.7)
    assert kind == T_RATIO and ok
    assert ratio == pytest.approx(0.5)


def test_t_ratio_duplicate_descriptor_rejected():
    (_, ratio, kind, ok), = cluster_ratio_tests([0.3], [4], [0], [2], [0.0], 0.7)
    assert ratio == 1.0 and not ok
    assert t_ratio(0.0, 0.0) == 1.0


def test_t_ratio_no_other_point_is_unique():
    assert t_ratio(0.4, np.inf) == 0.0


def test_same_point_candidates_use_t_ratio():
    # two views of one point in one cluster: no distinct-point second candidate
    out = cluster_ratio_tests([0.3, 0.31], [0, 1], [5, 5], [0, 0], [0.3, 0.3], 0.7)
    assert [(p, k) for p, _, k, _ in out] == [(0, T_RATIO)]


def test_one_decision_per_cluster():
    out = cluster_ratio_tests([0.1, 0.2, 0.3, 0.4], [0, 1, 2, 3], [0, 1, 2, 3], [0, 1, 0, 1],
                              np.full(4, np.inf), 0.7)
    assert [(p, k) for p, _, k, _ in out] == [(0, LOCAL_RATIO), (1, LOCAL_RATIO)]
    assert out[0][1] == pytest.approx(1 / 3) and out[1][1] == pytest.approx(0.5)


def test_cluster_wise_end_to_end():
    # cluster 0 holds views 0,1 (points 0,1); cluster 1 holds views 2,3 (points 0,1)
    desc = np.array([[0.3], [0.5], [3.0], [9.0]])
    m = make_model([0, 1, 0, 1], [0, 0, 1, 1], desc)
    M = MatchSet("M", [MatchCandidate(7, v, float(abs(desc[v, 0])), 0.5, K_RATIO) for v in range(4)])
    MF = cluster_wise_ratio_test(M, m)
    kinds = {c.view_id: c.test_kind for c in MF}
    assert kinds == {0: LOCAL_RATIO, 2: LOCAL_RATIO}
    assert [c.ratio for c in MF] == pytest.approx([0.6, 3.0 / 9.0])


def test_cluster_wise_requires_table():
    m = make_model([0, 0], [0, 1], [[0.0], [1.0]], with_nn=False)
    with pytest.raises(ValueError, match="nearest-neighbor"):
        cluster_wise_ratio_test(MatchSet("M"), m)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8), st.floats(0.3, 0.95))
def test_ratio_tests_conservative_on_exact_lists(seed, k, tau):
    rng = np.random.default_rng(seed)
    X, vp, vc, nn = random_clustered_views(rng, num_views=80, num_points=30, num_clusters=5, dim=3)
    Q = rng.normal(size=(30, 3))
    Dm = distance_matrix(Q, X)
    _, violations, _ = k_ratio_counts(Dm, vp, vc, 5, k, tau)
    assert violations == 0
    _, violations, mismatches = t_ratio_counts(Dm, vp, vc, nn, 5, k, tau)
    assert violations == 0 and mismatches == 0


def test_exact_local_oracle_by_hand():
    Dm = np.array([[0.3, 0.5, 0.4, 2.0]])
    d1, d2, ratio = exact_local_ratios(Dm, np.array([0, 1, 0, 2]), np.array([0, 0, 0, 1]), 2)
    assert d1[0, 0] == 0.3 and d2[0, 0] == 0.5
    assert ratio[0, 1] == 0.0  # lone point in cluster 1


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pipeline_conservative_against_exact_in_cluster(seed):
    """With exact search, every rejected (feature, cluster) is also rejected by the exact local test."""
    rng = np.random.default_rng(seed)
    X, vp, vc, nn = random_clustered_views(rng, num_views=60, num_points=25, num_clusters=4, dim=3)
    m_images = 4
    view_image = vc.copy()
    model = make_model(vp, view_image, X, num_images=m_images, num_points=25, with_nn=True)
    assert np.array_equal(model.nn_table.nn_distance, nn)
    q = make_query(rng.normal(size=(20, 3)))
    cfg = MatchConfig(k=4, n_forward=None)
    M = global_forward_match(q, AnnIndex(X), cfg, SearchBudget(None))
    MF = cluster_wise_ratio_test(M, model, cfg)
    _, _, exact = exact_local_ratios(distance_matrix(q.descriptors, X), vp, vc, 4)
    admitted = {(c.query_feature_id, int(vc[c.view_id])) for c in MF}
    candidates = {(c.query_feature_id, int(vc[c.view_id])) for c in M}
    for f, c in candidates - admitted:
        assert exact[f, c] > cfg.tau
    assert MF.pairs() <= M.pairs()


def test_subset_chain_and_at_most_one_per_cluster(small_world):
    m = small_world.model
    idx = build_index(m)
    for q in small_world.queries:
        M = global_forward_match(q, idx)
        MF = cluster_wise_ratio_test(M, m)
        MB = best_buddy_filter(MF, q, m)
        assert MB.pairs() <= MF.pairs() <= M.pairs()
        keys = [(c.query_feature_id, int(m.view_cluster[c.view_id])) for c in MF]
        assert len(keys) == len(set(keys))


# best buddies

def buddy_model():
    # view 0 (point 0) and view 1 (point 1) in image 0; views 2,3 elsewhere
    desc = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 9.0], [5.0, 9.0]])
    return make_model([0, 1, 0, 1], [0, 0, 1, 1], desc)


def test_best_buddy_kept():
    m = buddy_model()
    q = make_query([[0.2, 0.0], [0.8, 0.0], [50.0, 50.0]])
    # for view 0 the nearest query features are q0 (0.2) and q1 (0.8): ratio 0.25
    MF = MatchSet("M_F", [MatchCandidate(0, 0, 0.2, 0.1, LOCAL_RATIO)])
    MB = best_buddy_filter(MF, q, m)
    assert MB.pairs() == {(0, 0)}


def test_best_buddy_wrong_partner_dropped():
    m = buddy_model()
    q = make_query([[0.2, 0.0], [3.0, 0.0], [50.0, 50.0]])
    # forward says q1 -> view 0, but view 0 back-matches to q0
    MF = MatchSet("M_F", [MatchCandidate(1, 0, 3.0, 0.5, T_RATIO)])
    assert len(best_buddy_filter(MF, q, m)) == 0


def test_best_buddy_ambiguous_back_match_dropped():
    m = buddy_model()
    q = make_query([[0.5, 0.0], [-0.5, 0.0]])
    MF = MatchSet("M_F", [MatchCandidate(0, 0, 0.5, 0.1, LOCAL_RATIO)])
    assert len(best_buddy_filter(MF, q, m)) == 0


def test_best_buddy_single_feature_fallback():
    m = buddy_model()
    q = make_query([[0.2, 0.0]])
    MB = best_buddy_filter(MatchSet("M_F", [MatchCandidate(0, 0, 0.2, 0.1, LOCAL_RATIO)]), q, m)
    assert MB.pairs() == {(0, 0)}
    assert "single-feature fallback" in MB.flags


def test_match_set_rejects_duplicates():
    c = MatchCandidate(0, 1, 0.1, 0.2, K_RATIO)
    with pytest.raises(ValueError, match="duplicate"):
        MatchSet("M", [c, c])


def test_match_config_validation():
    for bad in (dict(tau=1.0), dict(tau=0.0), dict(k=0), dict(n_forward=0), dict(n_back=0)):
        with pytest.raises(ValueError):
            MatchConfig(**bad)
