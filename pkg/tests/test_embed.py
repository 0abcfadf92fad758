import numpy as np
import pytest

from artefact_lab.embed import (FeatureMatrix, build_feature_matrix, conditional_affinities,
                                joint_affinities, kmeans, kmeans_fit, tsne)
from artefact_lab.keypoints import Keypoint, KeypointDescriptorSet
from artefact_lab.partition import Partition, rand_index


def blobs(n_per=50, dim=10, sep=10.0, seed=0):
    rng = np.random.default_rng(seed)
    centers = np.zeros((3, dim))
    centers[1, 0] = sep
    centers[2, 1] = sep
    x = np.vstack([c + rng.normal(size=(n_per, dim)) for c in centers])
    return x, np.repeat(np.arange(3), n_per)


def _kset(desc, ident="a"):
    kps = [Keypoint(0.0, 0.0, 1.0, 1.0) for _ in range(len(desc))]
    return KeypointDescriptorSet(ident, kps, desc)


def test_feature_matrix_stacks_in_order():
    rng = np.random.default_rng(0)
    sizes = [40, 50, 41, 42, 40]
    sets = [(_kset(rng.random((s, 64)), f"im{i}"), i, i) for i, s in enumerate(sizes)]
    m = build_feature_matrix(sets)
    assert m.data.shape == (213, 64)
    assert list(m.set_ids()) == sum(([i] * s for i, s in enumerate(sizes)), [])
    assert np.allclose(m.data.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(m.data.std(axis=0), 1, atol=1e-12)


def test_feature_matrix_single_row_all_zero():
    m = build_feature_matrix([(_kset(np.random.default_rng(1).random((1, 64))), 0, 0)])
    assert m.data.shape == (1, 64) and np.all(m.data == 0)


def test_feature_matrix_constant_column():
    d = np.random.default_rng(2).random((10, 64))
    d[:, 5] = 0.3
    m = build_feature_matrix([(_kset(d), 0, 0)])
    assert np.all(m.data[:, 5] == 0)


def test_feature_matrix_width_mismatch():
    ks = _kset(np.zeros((3, 64)))
    ks.descriptors = np.zeros((3, 32))
    with pytest.raises(ValueError):
        build_feature_matrix([(ks, 0, 0)])


def test_affinity_rows_and_joint():
    x, _ = blobs(20, seed=1)
    c = conditional_affinities(x, 10.0)
    assert np.allclose(c.sum(axis=1), 1.0, atol=1e-12)
    ent = -np.array([np.sum(r[r > 0] * np.log(r[r > 0])) for r in c])
    assert np.allclose(ent, np.log(10.0), atol=1e-6)
    p = joint_affinities(x, 10.0)
    assert np.allclose(p, p.T, atol=1e-15) and np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-9


def test_perplexity_range():
    x, _ = blobs(5)
    with pytest.raises(ValueError):
        tsne(x, perplexity=0.5)
    with pytest.raises(ValueError):
        tsne(x, perplexity=(len(x) - 1) / 3 + 0.1)


def test_tsne_three_blobs():
    x, truth = blobs(seed=2)
    e = tsne(x, perplexity=30, seed=3)
    assert e.final_kl <= e.initial_kl
    assert rand_index(kmeans(e, 3, seed=4), Partition(truth)) >= 0.95


def test_tsne_deterministic():
    x, _ = blobs(15, seed=5)
    a = tsne(x, perplexity=5, seed=6, iterations=300)
    b = tsne(x, perplexity=5, seed=6, iterations=300)
    assert a.points.tobytes() == b.points.tobytes()


def test_kmeans_four_points():
    pts = np.array([(0, 0), (0, 1), (10, 0), (10, 1)], float)
    assert kmeans(pts, 2, seed=0) == Partition([0, 0, 1, 1])


def test_kmeans_k_equals_n():
    pts = np.random.default_rng(7).random((6, 2))
    r = kmeans_fit(pts, 6)
    assert r.partition.k == 6 and r.wcss == 0


def test_kmeans_duplicates_one_cluster():
    pts = np.vstack([np.random.default_rng(8).random((5, 2))] * 2)
    r = kmeans_fit(pts, 1)
    assert r.partition.k == 1 and np.allclose(r.centers[0], pts.mean(axis=0))


def test_kmeans_wcss_non_increasing_and_k_range():
    pts = np.random.default_rng(9).normal(size=(200, 2))
    r = kmeans_fit(pts, 5, seed=1)
    assert all(b <= a + 1e-12 for a, b in zip(r.history, r.history[1:]))
    with pytest.raises(ValueError):
        kmeans(pts, 0)
    with pytest.raises(ValueError):
        kmeans(pts, 201)


def test_feature_matrix_validation():
    with pytest.raises(ValueError):
        FeatureMatrix(np.zeros((2, 64)), [("a", 0, 0)])
