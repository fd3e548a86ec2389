"""Descriptor preprocessing: Hellinger normalization, PCA/whitening, k-means
pseudo-labeling and the ambiguity filter that drops descriptors sitting near
cluster borders.

All functions accept a single descriptor ``(d,)`` or a batch ``(n, d)`` and
are pure; fitted models are immutable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

KMEANS_TOL = 1e-6
KMEANS_MAX_ITER = 300


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise ValidationError(f"expected a vector or a matrix of descriptors, got ndim={arr.ndim}")


def hellinger_normalize(d: np.ndarray) -> np.ndarray:
    """Elementwise square root followed by l1 normalization.

    Input entries must be non-negative (histogram-style descriptors). An
    all-zero descriptor maps to the zero vector.
    """
    batch, squeeze = _as_batch(d)
    if not np.all(np.isfinite(batch)):
        raise ValidationError("descriptor contains non-finite entries")
    if np.any(batch < 0):
        raise ValidationError("hellinger_normalize requires non-negative entries")
    roots = np.sqrt(batch)
    norms = roots.sum(axis=1, keepdims=True)
    out = np.divide(roots, norms, out=np.zeros_like(roots), where=norms > 0)
    return out[0] if squeeze else out


@dataclass(frozen=True)
class PcaModel:
    """Fitted projection: y = scale * (basis @ (x - mean)).

    ``basis`` rows are orthonormal principal directions. ``scale`` holds the
    reciprocal square roots of the component variances when ``whiten`` is on,
    all ones otherwise.
    """

    mean: np.ndarray   # (d_in,)
    basis: np.ndarray  # (d_out, d_in)
    scale: np.ndarray  # (d_out,)
    whiten: bool

    @property
    def d_in(self) -> int:
        return self.mean.shape[0]

    @property
    def d_out(self) -> int:
        return self.basis.shape[0]


def fit_pca(data: np.ndarray, target_dim: int, whiten: bool = False) -> PcaModel:
    """Fit the top ``target_dim`` principal components of mean-centered data.

    Raises if the centered data has rank below ``target_dim``: whitening would
    divide by a zero variance and the projection would be meaningless.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError("fit_pca expects a (n, d) matrix")
    n, d = x.shape
    if not np.all(np.isfinite(x)):
        raise ValidationError("fit_pca input contains non-finite entries")
    if target_dim < 1 or target_dim > d:
        raise ValidationError(f"target_dim must be in [1, {d}], got {target_dim}")
    if n <= target_dim:
        raise ValidationError(f"need more than target_dim={target_dim} samples, got {n}")

    mean = x.mean(axis=0)
    centered = x - mean
    # SVD of centered data: singular values give component std devs.
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    tol = max(n, d) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    if rank < target_dim:
        raise ValidationError(
            f"centered data has rank {rank}, below target_dim={target_dim}"
        )
    basis = vt[:target_dim].copy()
    # Deterministic sign: largest-magnitude entry of each component positive.
    for row in basis:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    variances = (s[:target_dim] ** 2) / (n - 1)
    scale = 1.0 / np.sqrt(variances) if whiten else np.ones(target_dim)
    return PcaModel(mean=mean, basis=basis, scale=scale, whiten=whiten)


def pca_transform(model: PcaModel, d: np.ndarray) -> np.ndarray:
    batch, squeeze = _as_batch(d)
    if batch.shape[1] != model.d_in:
        raise ValidationError(
            f"descriptor dimension {batch.shape[1]} does not match model d_in={model.d_in}"
        )
    out = (batch - model.mean) @ model.basis.T * model.scale
    return out[0] if squeeze else out


@dataclass(frozen=True)
class ClusterModel:
    centers: np.ndarray  # (k, d)
    inertia: float       # sum of squared distances at convergence

    @property
    def n_clusters(self) -> int:
        return self.centers.shape[0]


def _squared_distances(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(n, k) squared Euclidean distances, clipped at zero."""
    sq = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * (x @ centers.T)
        + np.sum(centers * centers, axis=1)[None, :]
    )
    return np.maximum(sq, 0.0)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centers[0] = x[first]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            # All remaining mass at zero distance: pick an unused point.
            used = {tuple(c) for c in centers[:i]}
            candidates = [j for j in range(n) if tuple(x[j]) not in used]
            idx = candidates[int(rng.integers(len(candidates)))] if candidates else int(rng.integers(n))
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            idx = min(idx, n - 1)
        centers[i] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centers[i]) ** 2, axis=1))
    return centers


def fit_kmeans(
    data: np.ndarray,
    n_clusters: int,
    seed: int,
    debug: bool = False,
) -> ClusterModel:
    """Lloyd iterations from k-means++ seeding.

    Stops when the largest per-center movement falls below ``KMEANS_TOL`` or
    after ``KMEANS_MAX_ITER`` iterations. Deterministic for a given seed.
    With ``debug`` the per-iteration inertia is asserted non-increasing.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError("fit_kmeans expects a (n, d) matrix")
    if n_clusters < 1:
        raise ValidationError("n_clusters must be >= 1")
    if x.shape[0] < n_clusters:
        raise ValidationError(
            f"need at least n_clusters={n_clusters} points, got {x.shape[0]}"
        )
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(x, n_clusters, rng)
    prev_inertia = np.inf
    inertia = 0.0
    for _ in range(KMEANS_MAX_ITER):
        sq = _squared_distances(x, centers)
        assign = np.argmin(sq, axis=1)
        inertia = float(sq[np.arange(x.shape[0]), assign].sum())
        if debug:
            assert inertia <= prev_inertia + 1e-9 * max(1.0, prev_inertia), (
                f"inertia increased: {prev_inertia} -> {inertia}"
            )
        prev_inertia = inertia
        new_centers = centers.copy()
        for k in range(n_clusters):
            members = assign == k
            if members.any():
                new_centers[k] = x[members].mean(axis=0)
            else:
                # Re-seed an empty cluster at the worst-served point.
                worst = int(np.argmax(sq[np.arange(x.shape[0]), assign]))
                new_centers[k] = x[worst]
        movement = float(np.sqrt(np.sum((new_centers - centers) ** 2, axis=1)).max())
        centers = new_centers
        if movement < KMEANS_TOL:
            break
    sq = _squared_distances(x, centers)
    assign = np.argmin(sq, axis=1)
    inertia = float(sq[np.arange(x.shape[0]), assign].sum())
    return ClusterModel(centers=centers, inertia=inertia)


@dataclass(frozen=True)
class PseudoLabeledSet:
    """Descriptor indices kept with their cluster label, plus the rejects."""

    items: tuple[tuple[int, int], ...]  # (descriptor index, cluster label)
    rejected: tuple[int, ...]

    @property
    def kept_indices(self) -> np.ndarray:
        return np.array([i for i, _ in self.items], dtype=np.int64)

    @property
    def labels(self) -> np.ndarray:
        return np.array([lab for _, lab in self.items], dtype=np.int64)


def assign_and_filter(model: ClusterModel, data: np.ndarray, rho: float) -> PseudoLabeledSet:
    """Label each descriptor with its nearest center, dropping ambiguous ones.

    A descriptor is kept iff dist(nearest) / dist(second nearest) <= rho;
    a ratio of exactly rho is kept, and a descriptor sitting on a center
    (ratio 0) is always kept.
    """
    if not 0.0 < rho <= 1.0:
        raise ValidationError(f"rho must be in (0, 1], got {rho}")
    if model.n_clusters < 2:
        raise ValidationError("assign_and_filter needs a model with >= 2 centers")
    batch, _ = _as_batch(data)
    if batch.shape[1] != model.centers.shape[1]:
        raise ValidationError(
            f"descriptor dimension {batch.shape[1]} does not match centers"
        )
    sq = _squared_distances(batch, model.centers)
    # Stable argsort resolves distance ties toward the lower center index.
    order = np.argsort(sq, axis=1, kind="stable")
    nearest = order[:, 0]
    second = order[:, 1]
    rows = np.arange(len(batch))
    d1 = np.sqrt(sq[rows, nearest])
    d2 = np.sqrt(sq[rows, second])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(d1 == 0.0, 0.0, d1 / np.where(d2 > 0.0, d2, np.inf))
    kept = ratio <= rho
    items = tuple((int(i), int(nearest[i])) for i in rows[kept])
    rejected = tuple(int(i) for i in rows[~kept])
    return PseudoLabeledSet(items=items, rejected=rejected)
