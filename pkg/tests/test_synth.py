import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clusterloc.ann import AnnIndex
from clusterloc.bench import distinct_point_neighbors, ratio_match
from clusterloc.model import l2_distances, validate_model
from clusterloc.synth import DISTRACTOR, SynthConfig, generate_world, load_preset, load_world, preset_names, \
    save_world

from conftest import SMALL

REPEATED = SMALL.replace(repetition_groups=6, group_size=2, wall_segments=16, repetition_jitter_sigma=0.0,
                         min_copy_separation_deg=90.0, max_views_per_point=2)


@pytest.fixture(scope="module")
def repeated_world():
    return generate_world(REPEATED)


def test_same_seed_same_world():
    a, b = generate_world(SMALL), generate_world(SMALL)
    assert a.model == b.model and a.queries == b.queries
    for ta, tb in zip(a.ground_truth, b.ground_truth):
        assert ta.pose == tb.pose and np.array_equal(ta.provenance, tb.provenance)


def test_different_seed_different_world():
    a, b = generate_world(SMALL), generate_world(SMALL.replace(seed=4))
    assert not np.array_equal(a.model.descriptors, b.model.descriptors)


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 4), st.floats(0.0, 0.5))
def test_invariants_hold_for_any_config(seed, groups, noise):
    cfg = SynthConfig(num_points=300, num_model_images=12, num_query_images=2, descriptor_dim=8,
                      descriptor_noise_sigma=noise, repetition_groups=groups, wall_segments=12,
                      min_copy_separation_deg=60.0, distractor_feature_fraction=0.2, seed=seed)
    w = generate_world(cfg)
    validate_model(w.model)
    assert w.model.nn_table is not None
    assert len(w.queries) == 2


def test_provenance_is_sound(small_world):
    m = small_world.model
    for q, t in zip(small_world.queries, small_world.ground_truth):
        real = t.provenance != DISTRACTOR
        assert real.sum() >= 12
        px = t.pose.project(m.point_xyz[t.provenance[real]])[0]
        assert np.allclose(px, q.pixels[real], atol=1e-9)
        first_view = np.array([m.views_of_point(p)[0] for p in t.provenance[real]])
        assert np.array_equal(q.descriptors[real], m.descriptors[first_view])


def test_no_repetition_nearest_descriptor_is_correct_point(small_world):
    m = small_world.model
    for q, t in zip(small_world.queries, small_world.ground_truth):
        for row in np.flatnonzero(t.provenance != DISTRACTOR):
            v = int(np.argmin(l2_distances(m.descriptors, q.descriptors[row])))
            assert m.view_point[v] == t.provenance[row]


def test_repeated_copies_confuse_global_ratio(repeated_world):
    w = repeated_world
    m = w.model
    idx = AnnIndex(m.descriptors)
    motif = w.motif_of_point
    seg = w.segment_of_point
    checked = 0
    for q, t in zip(w.queries, w.ground_truth):
        M = ratio_match(q, idx, m, 0.7, None)
        kept = {c.query_feature_id for c in M}
        for row in np.flatnonzero(t.provenance != DISTRACTOR):
            p = t.provenance[row]
            if motif[p] < 0:
                continue
            d1, v1, d2 = distinct_point_neighbors(idx, q.descriptors[row], m.view_point, None)
            dist = l2_distances(m.descriptors, q.descriptors[row])
            other = np.flatnonzero(m.view_point != m.view_point[v1])
            v2 = other[np.lexsort((other, dist[other]))[0]]
            p1, p2 = m.view_point[v1], m.view_point[v2]
            assert motif[p1] == motif[p2] == motif[p] and seg[p1] != seg[p2]
            assert int(q.feature_ids[row]) not in kept
            checked += 1
    assert checked > 50


def test_no_camera_sees_two_copies(repeated_world):
    w = repeated_world
    m = w.model
    for i in range(m.num_images):
        pts = m.graph.points_of_image(i)
        pts = pts[w.motif_of_point[pts] >= 0]
        for mo in np.unique(w.motif_of_point[pts]):
            assert len(np.unique(w.segment_of_point[pts[w.motif_of_point[pts] == mo]])) == 1


def test_copies_share_descriptors_but_not_geometry(repeated_world):
    w = repeated_world
    m = w.model
    for mo in range(REPEATED.repetition_groups):
        segs = np.unique(w.segment_of_point[w.motif_of_point == mo])
        assert len(segs) == 2
        a, b = (np.flatnonzero((w.motif_of_point == mo) & (w.segment_of_point == s)) for s in segs)
        assert len(a) == len(b)
        desc = {p: m.descriptors[m.views_of_point(p)[0]] for p in np.concatenate([a, b])}
        assert all(np.array_equal(desc[x], desc[y]) for x, y in zip(a, b))
        assert not np.allclose(m.point_xyz[a], m.point_xyz[b])


@pytest.mark.parametrize("kw, msg", [
    (dict(num_model_images=0), "num_model_images"),
    (dict(repetition_groups=10, wall_segments=16), "wall_segments"),
    (dict(repetition_groups=1, group_size=3, min_copy_separation_deg=150.0), "far apart"),
    (dict(min_views_per_point=1), "min_views_per_point"),
    (dict(descriptor_noise_sigma=-1.0), "descriptor_noise_sigma"),
    (dict(distractor_feature_fraction=1.0), "distractor"),
])
def test_invalid_configs(kw, msg):
    with pytest.raises(ValueError, match=msg):
        SMALL.replace(**kw)


def test_unknown_config_key():
    with pytest.raises(ValueError, match="unknown synth config keys"):
        SynthConfig.from_dict({"num_pointz": 3})


def test_presets_load_and_validate():
    names = preset_names()
    assert {"noiseless", "noisy", "repetition-stress", "many-clusters"} <= set(names)
    for n in names:
        assert isinstance(load_preset(n), SynthConfig)
    with pytest.raises(ValueError, match="unknown preset"):
        load_preset("nope")


def test_save_load_round_trip(tmp_path, small_world):
    save_world(small_world, tmp_path)
    back = load_world(tmp_path)
    assert back.model == small_world.model and back.queries == small_world.queries
    assert back.config == small_world.config
    for a, b in zip(back.ground_truth, small_world.ground_truth):
        assert a.pose == b.pose and np.array_equal(a.provenance, b.provenance)
