import json

import numpy as np
import pytest

from clusterloc.formats import import_text_model, load_model, read_header, save_model
from clusterloc.model import ModelError
from clusterloc.query import load_queries, save_queries

from conftest import TEXT_MODEL_SRC as TEXT, make_model, random_model


def test_minimal_model_round_trip(tmp_path):
    m = make_model([0, 0], [0, 1], [[1.0, 2.0], [3.0, 4.0]])
    save_model(m, tmp_path)
    assert load_model(tmp_path) == m


def test_empty_model_round_trip(tmp_path):
    m = make_model([], [], np.zeros((0, 4)), num_images=1)
    save_model(m, tmp_path)
    back = load_model(tmp_path)
    assert back == m
    assert back.num_points == 0 and back.descriptor_dim == 4


def test_random_model_round_trip_is_bit_identical(tmp_path):
    m = random_model(np.random.default_rng(0), num_clusters=3)
    save_model(m, tmp_path / "a")
    back = load_model(tmp_path / "a")
    assert back == m
    save_model(back, tmp_path / "b")
    for name in ("points.bin", "views.bin", "images.bin", "nn_table.bin", "model.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synthetic_model_round_trip(tmp_path, small_world):
    save_model(small_world.model, tmp_path)
    back = load_model(tmp_path)
    assert back == small_world.model
    assert back.num_points == 600


def test_header_contents(tmp_path):
    m = random_model(np.random.default_rng(1))
    save_model(m, tmp_path)
    h = read_header(tmp_path)
    assert h["descriptor_dim"] == 8
    assert h["num_views"] == m.num_views
    assert h["clustering"] == "single-image"
    assert set(h["sha256"]) == {"points.bin", "views.bin", "images.bin", "nn_table.bin"}


def test_corrupted_views_detected(tmp_path):
    m = random_model(np.random.default_rng(2))
    save_model(m, tmp_path)
    raw = bytearray((tmp_path / "views.bin").read_bytes())
    raw[-1] ^= 0xFF
    (tmp_path / "views.bin").write_bytes(bytes(raw))
    with pytest.raises(ModelError, match="views.bin"):
        load_model(tmp_path)


def test_truncated_file_detected(tmp_path):
    m = random_model(np.random.default_rng(3))
    save_model(m, tmp_path)
    (tmp_path / "points.bin").write_bytes((tmp_path / "points.bin").read_bytes()[:-8])
    with pytest.raises(ModelError, match="points.bin"):
        load_model(tmp_path, verify_hashes=False)


def test_dimension_mismatch_detected(tmp_path):
    m = random_model(np.random.default_rng(4))
    save_model(m, tmp_path)
    h = json.loads((tmp_path / "model.json").read_text())
    h["descriptor_dim"] = 9
    (tmp_path / "model.json").write_text(json.dumps(h))
    with pytest.raises(ModelError, match="views.bin"):
        load_model(tmp_path)


def test_missing_file_detected(tmp_path):
    save_model(random_model(np.random.default_rng(5)), tmp_path)
    (tmp_path / "images.bin").unlink()
    with pytest.raises(ModelError, match="images.bin"):
        load_model(tmp_path)


def test_text_import(tmp_path):
    (tmp_path / "m.txt").write_text(TEXT)
    m = import_text_model(tmp_path / "m.txt")
    assert m.num_views == 4 and m.clustering.num_clusters == 2
    assert m.nn_table.nn_view.tolist() == [1, 0, 3, 2]
    assert m.nn_table.nn_distance[0] == pytest.approx(0.4)


def test_text_import_dangling_reference(tmp_path):
    (tmp_path / "m.txt").write_text(TEXT + "view 4 99 1 5 5 1 1\n")
    with pytest.raises(ModelError, match="dangling point reference 99"):
        import_text_model(tmp_path / "m.txt")


def test_text_import_bad_dimension(tmp_path):
    (tmp_path / "m.txt").write_text(TEXT.replace("view 3 1 1 200 110 9.0 5.0", "view 3 1 1 200 110 9.0"))
    with pytest.raises(ModelError, match="view 3"):
        import_text_model(tmp_path / "m.txt")


def test_queries_round_trip(tmp_path, small_world):
    save_queries(small_world.queries, tmp_path / "q.bin", 16)
    back = load_queries(tmp_path / "q.bin")
    assert back == small_world.queries


def test_queries_trailing_bytes(tmp_path, small_world):
    save_queries(small_world.queries[:1], tmp_path / "q.bin", 16)
    with open(tmp_path / "q.bin", "ab") as fh:
        fh.write(b"\0" * 3)
    with pytest.raises(ModelError, match="trailing"):
        load_queries(tmp_path / "q.bin")
