"""Frozen-encoder embeddings and archetype selection.

Latent grids flatten to one row per building (optionally PCA-reduced); k-means
with k-means++ seeding and Lloyd iterations groups each use class; within a
cluster the member nearest the center, by area-weighted construction the most
ordinary building of the group, becomes the archetype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .ingest import FootprintRecord, preprocess_record
from .vqae import VqModel


@dataclass
class LatentMatrix:
    """One embedding row per record, aligned with ids."""

    ids: list[str]
    vectors: np.ndarray  # (n, d) float32
    reduction: str  # "none_flatten" | "pca"
    components: int | None = None

    def __post_init__(self):
        if self.vectors.ndim != 2 or len(self.ids) != self.vectors.shape[0]:
            raise DimensionError(
                f"{len(self.ids)} ids for latent matrix of shape {self.vectors.shape}")


@dataclass
class PcaModel:
    """Mean-centered principal components with deterministic signs."""

    mean: np.ndarray  # (d,)
    basis: np.ndarray  # (components, d) orthonormal rows

    @classmethod
    def fit(cls, x: np.ndarray, components: int) -> "PcaModel":
        n, d = x.shape
        if not 1 <= components <= min(n, d):
            raise ParameterError(f"pca components {components} not in [1, {min(n, d)}]")
        xc = x.astype(np.float64) - x.mean(axis=0, dtype=np.float64)
        _, _, vt = np.linalg.svd(xc, full_matrices=False)
        basis = vt[:components].copy()
        # sign convention: largest-magnitude loading of each component is positive
        for row in basis:
            j = int(np.argmax(np.abs(row)))
            if row[j] < 0:
                row *= -1.0
        return cls(x.mean(axis=0, dtype=np.float64), basis)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x.astype(np.float64) - self.mean) @ self.basis.T


def flatten_latents(z: np.ndarray) -> np.ndarray:
    """(n, H, W, D) latent grids to (n, H*W*D) rows."""
    if z.ndim != 4:
        raise DimensionError(f"expected (n, h, w, d) grids, got {z.shape}")
    return np.ascontiguousarray(z.reshape(z.shape[0], -1))


def embed_dataset(model: VqModel, records: list[FootprintRecord], *,
                  base_px: int, meters_per_pixel: float,
                  height_bounds: tuple[float, float] = (0.0, 100.0),
                  reduction: str = "none_flatten", components: int | None = None,
                  batch_size: int = 32) -> tuple[LatentMatrix, PcaModel | None]:
    """Preprocess and encode every record with the frozen encoder.

    Deterministic: identical records yield identical rows. Preprocessing
    failures propagate with the offending record id.
    """
    side_px = model.cfg.side_px
    stacks = np.stack([
        preprocess_record(r, base_px, side_px, meters_per_pixel, height_bounds).channels
        for r in records
    ]) if records else np.zeros((0, model.cfg.in_channels, side_px, side_px), np.float32)
    return embed_images(model, [r.id for r in records], stacks,
                        reduction=reduction, components=components, batch_size=batch_size)


def embed_images(model: VqModel, ids: list[str], images: np.ndarray, *,
                 reduction: str = "none_flatten", components: int | None = None,
                 batch_size: int = 32) -> tuple[LatentMatrix, PcaModel | None]:
    """Embedding from already-preprocessed stacks; see embed_dataset."""
    if reduction not in ("none_flatten", "pca"):
        raise ParameterError(f"unknown reduction {reduction!r}")
    rows = []
    for start in range(0, len(ids), batch_size):
        z = model.encode(images[start : start + batch_size])
        rows.append(flatten_latents(z))
    flat = np.concatenate(rows) if rows else np.zeros((0, 0), np.float32)
    pca = None
    if reduction == "pca":
        if components is None:
            raise ParameterError("pca reduction needs a component count")
        pca = PcaModel.fit(flat, components)
        flat = pca.transform(flat)
    matrix = LatentMatrix(list(ids), flat.astype(np.float32), reduction,
                          components if reduction == "pca" else None)
    return matrix, pca


# ---------------------------------------------------------------------------
# k-means


@dataclass
class ClusterModel:
    k: int
    centers: np.ndarray  # (k, d) float64
    assignments: np.ndarray  # (n,) int
    wcss: float
    seed: int


def _pairwise_sq(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    x2 = (x * x).sum(axis=1)[:, None]
    c2 = (centers * centers).sum(axis=1)[None, :]
    d = x2 + c2 - 2.0 * (x @ centers.T)
    np.maximum(d, 0.0, out=d)
    return d


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[int(rng.integers(n))]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = x[idx]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def kmeans(x: np.ndarray, k: int, seed: int, max_iters: int = 100,
           initial_centers: np.ndarray | None = None) -> ClusterModel:
    """Lloyd's algorithm with k-means++ seeding.

    Converges when assignments stop changing (or max_iters). Distance ties
    break to the lowest cluster index; a cluster that empties is reseeded to
    the point currently farthest from its own center.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ParameterError(f"kmeans needs a (n, d) matrix, got shape {x.shape}")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"k={k} not in [1, {n}]")
    rng = np.random.default_rng(seed)
    if initial_centers is not None:
        centers = np.asarray(initial_centers, dtype=np.float64).copy()
        if centers.shape != (k, x.shape[1]):
            raise ParameterError(f"initial centers shape {centers.shape} != ({k}, {x.shape[1]})")
    else:
        centers = _kmeanspp_init(x, k, rng)

    prev = None
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        d = _pairwise_sq(x, centers)
        assign = d.argmin(axis=1)
        missing = [j for j in range(k) if not np.any(assign == j)]
        if missing:
            own = d[np.arange(n), assign]
            order = np.argsort(-own, kind="stable")
            for pos, j in enumerate(missing):
                centers[j] = x[order[pos]]
            d = _pairwise_sq(x, centers)
            assign = d.argmin(axis=1)
        if prev is not None and np.array_equal(assign, prev):
            break
        prev = assign
        for j in range(k):
            centers[j] = x[assign == j].mean(axis=0)
    else:
        # iteration budget exhausted; make the reported assignment consistent
        assign = _pairwise_sq(x, centers).argmin(axis=1)
    wcss = float(((x - centers[assign]) ** 2).sum())
    return ClusterModel(k, centers, assign, wcss, seed)


def kmeans_best(x: np.ndarray, k: int, seed: int, restarts: int = 10,
                max_iters: int = 100,
                warm_centers: np.ndarray | None = None) -> ClusterModel:
    """Best-of-restarts k-means by WCSS; ties keep the earliest restart.

    When warm centers are supplied they replace the first restart's seeding,
    so the result can never be worse than the warm start after Lloyd updates.
    """
    if restarts < 1:
        raise ParameterError(f"restarts must be >= 1, got {restarts}")
    root = np.random.default_rng([seed, k])
    child_seeds = root.integers(0, 2**63 - 1, size=restarts)
    best: ClusterModel | None = None
    for r in range(restarts):
        init = warm_centers if (r == 0 and warm_centers is not None) else None
        model = kmeans(x, k, int(child_seeds[r]), max_iters, initial_centers=init)
        if best is None or model.wcss < best.wcss:
            best = model
    best.seed = seed
    return best


def wcss_curve(x: np.ndarray, ks: list[int], seed: int, restarts: int = 10,
               max_iters: int = 100) -> list[tuple[int, float]]:
    """Best-of-restarts WCSS per k, non-increasing over consecutive ks.

    For k = previous k + 1 one restart is warm-started from the previous best
    centers plus the point farthest from its own center; splitting that point
    out cannot raise WCSS, which keeps the curve monotone.
    """
    ks = sorted(set(int(k) for k in ks))
    if not ks:
        raise ParameterError("empty k range")
    x = np.asarray(x, dtype=np.float64)
    curve: list[tuple[int, float]] = []
    prev: ClusterModel | None = None
    for k in ks:
        warm = None
        if prev is not None and k == prev.k + 1:
            own = ((x - prev.centers[prev.assignments]) ** 2).sum(axis=1)
            far = int(np.argmax(own))
            warm = np.vstack([prev.centers, x[far]])
        model = kmeans_best(x, k, seed, restarts, max_iters, warm_centers=warm)
        if prev is not None and k == prev.k + 1 and model.wcss > prev.wcss:
            # Lloyd from the warm start can only improve on prev; numerical
            # safety net in case of exact ties.
            model = kmeans(x, k, seed, max_iters, initial_centers=warm)
        curve.append((k, model.wcss))
        prev = model
    return curve


def elbow_select(curve: list[tuple[int, float]], k_min: int = 2, k_max: int = 5,
                 override: int | None = None) -> int:
    """Largest discrete second difference of WCSS over [k_min, k_max].

    The curve must cover k_min-1 .. k_max+1. Ties choose the smallest k; a
    manual override wins outright.
    """
    if override is not None:
        return int(override)
    values = {int(k): float(w) for k, w in curve}
    needed = range(k_min - 1, k_max + 2)
    if k_min < 2 or k_max < k_min:
        raise ParameterError(f"bad elbow range [{k_min}, {k_max}]")
    missing = [k for k in needed if k not in values]
    if missing:
        raise ParameterError(f"wcss curve missing k={missing} for elbow range [{k_min}, {k_max}]")
    best_k = k_min
    best_score = -np.inf
    for k in range(k_min, k_max + 1):
        score = values[k - 1] - 2.0 * values[k] + values[k + 1]
        if score > best_score:
            best_score = score
            best_k = k
    return best_k


# ---------------------------------------------------------------------------
# archetypes


@dataclass
class Archetype:
    cluster_index: int
    representative_id: str
    representative: FootprintRecord
    cluster_total_area_m2: float
    member_count: int


def select_archetypes(model: ClusterModel, latents: LatentMatrix,
                      records: list[FootprintRecord]) -> tuple[list[Archetype], int]:
    """Pick each cluster's representative: the member nearest the center.

    Distance ties break to the lexicographically lowest record id. Cluster
    area is the sum of member footprint areas. Returns (archetypes,
    empty_cluster_count); empty clusters are skipped.
    """
    by_id = {r.id: r for r in records}
    missing = [i for i in latents.ids if i not in by_id]
    if missing:
        raise ParameterError(f"latent rows without records: {missing[:3]}...")
    if len(latents.ids) != model.assignments.shape[0]:
        raise DimensionError(
            f"{len(latents.ids)} rows vs {model.assignments.shape[0]} assignments")
    x = latents.vectors.astype(np.float64)
    archetypes: list[Archetype] = []
    empty = 0
    for j in range(model.k):
        members = np.flatnonzero(model.assignments == j)
        if members.size == 0:
            empty += 1
            continue
        dist = ((x[members] - model.centers[j]) ** 2).sum(axis=1)
        ranked = sorted(zip(dist, (latents.ids[m] for m in members)))
        rep_id = ranked[0][1]
        total_area = float(np.sum([by_id[latents.ids[m]].area_m2 for m in members], dtype=np.float64))
        archetypes.append(Archetype(
            cluster_index=j,
            representative_id=rep_id,
            representative=by_id[rep_id],
            cluster_total_area_m2=total_area,
            member_count=int(members.size),
        ))
    return archetypes, empty
