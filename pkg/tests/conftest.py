import numpy as np
import pytest

from clusterloc.camera import CameraPose
from clusterloc.model import Clustering, ModelImage, SceneModel, precompute_nn_table
from clusterloc.synth import SynthConfig, generate_world

W, H = 640, 480


def identity_image(i, cluster=None, focal=500.0):
    pose = CameraPose(np.eye(3), np.zeros(3), focal, (W / 2, H / 2))
    return ModelImage(i, pose, W, H, i if cluster is None else cluster)


def make_model(view_point, view_image, descriptors, num_images=None, clusters=None, num_points=None,
               with_nn=True):
    """Small hand-made model: identity cameras, arbitrary in-bounds pixels."""
    view_point = np.asarray(view_point, dtype=np.int64)
    view_image = np.asarray(view_image, dtype=np.int64)
    if num_images is None:
        num_images = int(view_image.max()) + 1 if len(view_image) else 1
    if num_points is None:
        num_points = int(view_point.max()) + 1 if len(view_point) else 0
    if clusters is None:
        clusters = np.arange(num_images)
    clusters = np.asarray(clusters, dtype=np.int64)
    images = [identity_image(i, int(clusters[i])) for i in range(num_images)]
    xyz = np.column_stack([np.arange(num_points, dtype=float), np.zeros(num_points), np.full(num_points, 10.0)])
    pixels = np.column_stack([10.0 + view_point % 600, 10.0 + view_image % 400]) if len(view_point) else np.empty((0, 2))
    descriptors = np.asarray(descriptors, dtype=float)
    if descriptors.ndim != 2:
        descriptors = descriptors.reshape(len(view_point), -1)
    m = SceneModel(xyz, view_point, view_image, pixels, descriptors, images,
                   Clustering(clusters, int(clusters.max()) + 1))
    if with_nn:
        m.nn_table = precompute_nn_table(m)
    return m


def random_model(rng, num_points=60, num_images=8, dim=8, views_per_point=(2, 4), num_clusters=None):
    vp, vi = [], []
    for p in range(num_points):
        k = int(rng.integers(views_per_point[0], views_per_point[1] + 1))
        for i in rng.choice(num_images, size=min(k, num_images), replace=False):
            vp.append(p)
            vi.append(int(i))
    order = np.lexsort((vp, vi))
    vp, vi = np.array(vp)[order], np.array(vi)[order]
    clusters = None
    if num_clusters is not None:
        clusters = np.concatenate([np.arange(num_clusters), rng.integers(0, num_clusters, num_images - num_clusters)])
    return make_model(vp, vi, rng.normal(size=(len(vp), dim)), num_images, clusters)


TEXT_MODEL_SRC = """\
dim 2
image 0 0 640 480 500 320 240
image 1 1 640 480 500 320 240
point 0 0 0 10
point 1 1 0 10
view 0 0 0 100 100 0.0 0.0
view 1 1 0 200 100 0.4 0.0   # distance 0.4 from view 0
view 2 0 1 100 110 5.0 5.0
view 3 1 1 200 110 9.0 5.0
"""


SMALL = SynthConfig(num_points=600, num_model_images=20, num_query_images=4, descriptor_dim=16,
                    descriptor_noise_sigma=0.0, pixel_noise_sigma=0.0, seed=3)


@pytest.fixture(scope="session")
def small_world():
    return generate_world(SMALL)


def make_query(descriptors, qid=0, pixels=None, feature_ids=None):
    from clusterloc.camera import Intrinsics
    from clusterloc.query import QueryImage
    descriptors = np.atleast_2d(np.asarray(descriptors, dtype=float))
    n = len(descriptors)
    if pixels is None:
        pixels = np.column_stack([np.arange(n) % 600 + 5.0, np.arange(n) // 600 + 5.0])
    if feature_ids is None:
        feature_ids = np.arange(n)
    return QueryImage(qid, feature_ids, pixels, descriptors, Intrinsics(500.0, (W / 2, H / 2)), W, H)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
