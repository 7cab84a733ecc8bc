"""Clustering, PCA, and RMSE matching against independent oracles."""

import numpy as np
import pytest

from trojanscan.analysis import (
    PatchVector,
    _lloyd,
    best_match_rmse,
    cluster_patches,
    kmeans,
    pca_project,
    rmse,
    save_pca_csv,
    silhouette,
)
from trojanscan.errors import ConfigError, ShapeError
from trojanscan.poison import generate_trigger


def _patches(X):
    return [PatchVector(row, i, 1.0, 0) for i, row in enumerate(X)]


def test_two_blobs_recovered():
    rng = np.random.default_rng(0)
    a = np.clip(rng.normal(0.2, 0.02, size=(12, 6)), 0, 1)
    b = np.clip(rng.normal(0.8, 0.02, size=(12, 6)), 0, 1)
    X = np.concatenate([a, b])
    report = cluster_patches(_patches(X), k_range=(2, 6), seed=1)
    assert report.k == 2
    assert not report.degenerate
    first, second = report.assignments[:12], report.assignments[12:]
    assert len(set(first.tolist())) == 1
    assert len(set(second.tolist())) == 1
    assert first[0] != second[0]


def test_identical_patches_degenerate():
    X = np.tile(np.full(8, 0.5), (10, 1))
    report = cluster_patches(_patches(X), k_range=(2, 6), seed=2)
    assert report.degenerate
    assert report.k == 2
    assert report.inertia == 0.0
    assert np.all(report.assignments == 0)


def test_too_few_patches_rejected():
    with pytest.raises(ConfigError):
        cluster_patches(_patches(np.random.default_rng(0).uniform(size=(1, 4))), seed=0)
    X = np.random.default_rng(1).uniform(size=(3, 4))
    with pytest.raises(ConfigError):
        cluster_patches(_patches(X), k_range=(4, 6), seed=0)


def test_kmeans_inertia_non_increasing_and_deterministic():
    rng = np.random.default_rng(3)
    X = rng.uniform(size=(40, 5))
    _, _, _, history = _lloyd(X, 4, np.random.default_rng(7))
    assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))
    a1 = kmeans(X, 4, seed=9)
    a2 = kmeans(X, 4, seed=9)
    assert np.array_equal(a1[0], a2[0])
    assert np.allclose(a1[1], a2[1])
    assert a1[2] == a2[2]


def test_silhouette_range():
    rng = np.random.default_rng(4)
    X = rng.uniform(size=(30, 4))
    for k in (2, 3, 5):
        assign, _, _ = kmeans(X, k, seed=5)
        s = silhouette(X, assign)
        assert -1.0 <= s <= 1.0


def test_pca_collinear_second_component_vanishes():
    t = np.linspace(0, 1, 20)[:, None]
    direction = np.array([[1.0, 2.0, -0.5, 0.3]])
    X = t @ direction
    coords, var = pca_project(X, dims=2)
    assert var[0] > 0
    assert var[1] == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(coords[:, 1], 0.0, atol=1e-8)


def test_pca_isometry_on_planar_data():
    rng = np.random.default_rng(6)
    plane = rng.standard_normal((25, 2))
    basis, _ = np.linalg.qr(rng.standard_normal((7, 2)))
    X = plane @ basis.T  # embedded 2-dim subspace in 7 dims
    coords, _ = pca_project(X, dims=2)
    orig = np.sqrt(((X[:, None] - X[None, :]) ** 2).sum(-1))
    proj = np.sqrt(((coords[:, None] - coords[None, :]) ** 2).sum(-1))
    assert np.allclose(orig, proj, atol=1e-6)


def test_pca_matches_eigendecomposition_oracle():
    rng = np.random.default_rng(7)
    X = rng.uniform(size=(30, 9))
    coords, var = pca_project(X, dims=2)
    # oracle: dense eigendecomposition of the covariance matrix
    cov = np.cov(X, rowvar=False)
    eigvals = np.sort(np.linalg.eigvalsh(cov))[::-1]
    assert var[0] == pytest.approx(eigvals[0], abs=1e-8)
    assert var[1] == pytest.approx(eigvals[1], abs=1e-8)
    assert var[0] >= var[1]


def test_pca_dims_validation():
    with pytest.raises(ConfigError):
        pca_project(np.zeros((5, 3)), dims=4)


def test_pca_deterministic_sign():
    rng = np.random.default_rng(8)
    X = rng.uniform(size=(15, 6))
    c1, _ = pca_project(X)
    c2, _ = pca_project(np.array(X))
    assert np.array_equal(c1, c2)


def test_rmse_properties():
    rng = np.random.default_rng(9)
    a = rng.uniform(size=12)
    b = rng.uniform(size=12)
    assert rmse(a, a) == 0.0
    assert rmse(a, b) == rmse(b, a)
    assert rmse(np.zeros(12), np.ones(12)) == 1.0
    assert 0.0 <= rmse(a, b) <= 1.0
    with pytest.raises(ShapeError):
        rmse(a, b[:6])


def test_best_match_rmse_identity_and_argmin():
    trig = generate_trigger(2, 1.0, seed=10)
    flat = trig.patch.reshape(-1)
    patches = [
        PatchVector(np.clip(flat + 0.3, 0, 1), 0, 1.0, 3),
        PatchVector(flat.copy(), 7, 1.0, 3),
        PatchVector(np.clip(flat + 0.1, 0, 1), 2, 1.0, 3),
    ]
    value, restart = best_match_rmse(patches, trig)
    assert value == 0.0
    assert restart == 7


def test_pca_csv_export(tmp_path):
    rng = np.random.default_rng(11)
    X = np.clip(rng.normal(0.5, 0.15, size=(14, 12)), 0, 1)
    report = cluster_patches(_patches(X), k_range=(2, 5), seed=12)
    path = tmp_path / "pca.csv"
    save_pca_csv(report, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "restart,pc1,pc2,cluster"
    assert len(lines) == 15
