"""Post-hoc analysis of recovered patches: clustering, projection, matching.

Restarted scans land on multiple distinct effective triggers; k-means over
the flattened patch vectors (k chosen by mean silhouette) exposes the modes,
a 2-component PCA gives plottable coordinates, and RMSE against the ground
truth trigger quantifies how close the nearest mode is.
"""

import csv
import json
from dataclasses import dataclass

import numpy as np

from .detect import class_histogram
from .errors import ConfigError, ShapeError


@dataclass
class PatchVector:
    values: np.ndarray  # flattened patch, [0, 1]
    restart: int
    effectiveness: float  # fraction of scan images driven to the modal class
    modal_class: int

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.min() < 0 or self.values.max() > 1:
            raise ConfigError("patch values must lie in [0, 1]")


@dataclass
class ClusterReport:
    k: int
    assignments: np.ndarray
    centroids: np.ndarray
    silhouettes: dict  # k -> mean silhouette over the scanned range
    inertia: float
    pca_coords: np.ndarray  # (N, 2)
    explained_variance: np.ndarray
    restart_ids: list
    degenerate: bool = False


def patch_effectiveness(model, images, trigger, seed=0):
    """(modal class, fraction of images driven to it) under the trigger."""
    counts = class_histogram(model, images, trigger, seed=seed)
    modal = int(np.argmax(counts))
    return modal, float(counts[modal] / counts.sum())


def patches_from_scan(model, images, scan_result, min_effectiveness=0.99, seed=0):
    """PatchVectors for the restarts whose recovered trigger is effective.

    Only patches that drive at least ``min_effectiveness`` of the scanning
    images into one class are retained.
    """
    kept = []
    for rr in scan_result.restarts:
        modal, frac = patch_effectiveness(model, images, rr.trigger, seed=seed)
        if frac >= min_effectiveness:
            kept.append(PatchVector(rr.trigger.patch.reshape(-1), rr.index, frac, modal))
    return kept


# -- k-means -------------------------------------------------------------------


def _lloyd(X, k, rng, tol=1e-8, max_iter=300):
    centroids = X[rng.choice(len(X), size=k, replace=False)].copy()
    inertia_history = []
    assign = np.zeros(len(X), dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)
        inertia_history.append(float(d2[np.arange(len(X)), assign].sum()))
        new = centroids.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                new[j] = X[members].mean(axis=0)
            else:  # deterministic: farthest point becomes the empty centroid
                new[j] = X[int(np.argmax(d2.min(axis=1)))]
        shift = float(np.abs(new - centroids).max())
        centroids = new
        if shift < tol:
            break
    d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assign = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(len(X)), assign].sum())
    return assign, centroids, inertia, inertia_history


def kmeans(X, k, seed, restarts=20, tol=1e-8):
    """Seeded Lloyd iterations, best inertia over random-point restarts."""
    best = None
    for r in range(restarts):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k, r]))
        assign, centroids, inertia, _ = _lloyd(X, k, rng, tol=tol)
        if best is None or inertia < best[2] - 1e-15:
            best = (assign, centroids, inertia)
    return best


def silhouette(X, assign):
    """Mean silhouette coefficient; singleton-cluster points score 0."""
    n = len(X)
    dists = np.sqrt(((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=2))
    ks = np.unique(assign)
    scores = np.zeros(n)
    for i in range(n):
        own = assign == assign[i]
        n_own = own.sum()
        if n_own <= 1:
            scores[i] = 0.0
            continue
        a = dists[i][own].sum() / (n_own - 1)
        b = min(dists[i][assign == kk].mean() for kk in ks if kk != assign[i])
        scores[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(scores.mean())


def cluster_patches(patches, k_range=(2, 8), seed=0):
    """k-means over patch vectors for each k in range; k picked by silhouette."""
    if len(patches) < 2:
        raise ConfigError(f"need at least 2 patches, got {len(patches)}")
    X = np.stack([p.values for p in patches])
    restart_ids = [p.restart for p in patches]
    lo, hi = min(k_range), max(k_range)
    if lo < 2:
        raise ConfigError("minimum k is 2")
    ks = [k for k in range(lo, hi + 1) if k <= len(X) - 1]
    coords, explained = pca_project(X, dims=min(2, X.shape[1]))
    if np.allclose(X, X[0]):
        return ClusterReport(
            k=lo,
            assignments=np.zeros(len(X), dtype=np.int64),
            centroids=X[:1].copy(),
            silhouettes={},
            inertia=0.0,
            pca_coords=coords,
            explained_variance=explained,
            restart_ids=restart_ids,
            degenerate=True,
        )
    if not ks:
        raise ConfigError(f"fewer patches ({len(X)}) than minimum k + 1 ({lo + 1})")
    results = {}
    silhouettes = {}
    for k in ks:
        assign, centroids, inertia = kmeans(X, k, seed)
        results[k] = (assign, centroids, inertia)
        silhouettes[k] = silhouette(X, assign)
    best_k = max(ks, key=lambda k: (silhouettes[k], -k))
    assign, centroids, inertia = results[best_k]
    return ClusterReport(
        k=best_k,
        assignments=assign,
        centroids=centroids,
        silhouettes=silhouettes,
        inertia=inertia,
        pca_coords=coords,
        explained_variance=explained,
        restart_ids=restart_ids,
    )


# -- PCA -----------------------------------------------------------------------


def pca_project(X, dims=2):
    """Top-``dims`` principal components of mean-centered rows.

    Sign convention: the largest-magnitude loading of each component is
    positive, so projections are deterministic.
    """
    X = np.asarray(X, dtype=np.float64)
    if len(X) < 2:
        raise ConfigError("need at least 2 points")
    if dims > X.shape[1]:
        raise ConfigError(f"cannot extract {dims} components from {X.shape[1]}-dim data")
    centered = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:dims].copy()
    for i in range(len(comps)):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] *= -1.0
    coords = centered @ comps.T
    var = (s**2) / (len(X) - 1)
    explained = np.zeros(dims)
    explained[: min(dims, len(var))] = var[:dims]
    return coords, explained


# -- ground-truth matching -------------------------------------------------------


def rmse(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"patch dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def best_match_rmse(patches, original):
    """Minimum RMSE between recovered patches and the original trigger patch."""
    if not patches:
        raise ConfigError("no recovered patches to match")
    target = original.patch.reshape(-1)
    scores = [(rmse(p.values, target), p.restart) for p in patches]
    best = min(scores)
    return best[0], best[1]


# -- persistence -----------------------------------------------------------------


def cluster_report_to_dict(report):
    return {
        "format": "cluster-report",
        "version": 1,
        "k": report.k,
        "degenerate": report.degenerate,
        "inertia": report.inertia,
        "assignments": report.assignments.tolist(),
        "restart_ids": list(report.restart_ids),
        "centroids": [c.tolist() for c in report.centroids],
        "silhouettes": {str(k): v for k, v in report.silhouettes.items()},
        "pca_coords": report.pca_coords.tolist(),
        "explained_variance": report.explained_variance.tolist(),
    }


def save_cluster_report(report, path):
    with open(path, "w") as f:
        json.dump(cluster_report_to_dict(report), f, indent=2, sort_keys=True)


def save_pca_csv(report, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["restart", "pc1", "pc2", "cluster"])
        for rid, (x, y), c in zip(report.restart_ids, report.pca_coords, report.assignments):
            writer.writerow([rid, f"{x:.8f}", f"{y:.8f}", int(c)])
