"""
Latent extraction and k-means clustering.

The encoder is run on every cohort record and its posterior mean is taken as
the latent point (no sampling at inference). Points are partitioned with
Lloyd's algorithm from a k-means++ start; ties in the assignment go to the
lowest centroid index and an empty cluster is re-seeded to the point that is
farthest from its assigned centroid.

Latents CSV: id,disease,z1,...,zJ,cluster   Centroids CSV: cluster,z1,...,zJ
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from .datagen import (
    BINARY_FIELDS,
    COHORT_COLUMNS,
    Cohort,
    Disease,
    PVec,
    cohort_to_frame,
    decode_features,
    encode_cohort,
)
from .exceptions import ArtifactParseError, InfeasibleError, ValidationError
from .logger import get_logger, log_struct
from .output_handler import atomic_write_text, frame_to_csv
from .vae_core import XHAT_CLAMP, VaeParams, decode, encode, reconstruct

DEFAULT_K = 14
DEFAULT_MAX_ITER = 300
DEFAULT_TOL = 1e-6


@dataclass(eq=False)
class LatentPoint:
    """Posterior of one record, with its disease label and cluster once assigned."""

    id: int
    disease: Disease
    mu: np.ndarray
    log_var: Optional[np.ndarray] = None  # not persisted in the latents CSV
    cluster: Optional[int] = None


@dataclass(eq=False)
class KmeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    iterations: int
    converged: bool
    inertia_history: List[float] = field(default_factory=list)


def infer_latents(params: VaeParams, cohort: Cohort, age_cap: float) -> List[LatentPoint]:
    """Encode every record and keep mu / log_var per patient, in cohort order."""
    if len(cohort) == 0:
        return []
    post = encode(params, encode_cohort(cohort, age_cap))
    return [
        LatentPoint(
            id=record.id,
            disease=record.disease,
            mu=post.mu[i].copy(),
            log_var=post.log_var[i].copy(),
        )
        for i, record in enumerate(cohort.records)
    ]


def latent_matrix(points: Sequence[LatentPoint]) -> np.ndarray:
    if not points:
        return np.zeros((0, 0))
    return np.vstack([p.mu for p in points])


def _check_feasible(points: np.ndarray, k: int) -> None:
    if k < 1:
        raise ValidationError(f"k must be at least 1, got {k}")
    if points.ndim != 2 or points.shape[0] < k:
        raise InfeasibleError(
            f"Cannot form {k} clusters from {points.shape[0]} points",
            context={"k": k, "n_points": int(points.shape[0])},
        )


def kmeans_pp_indices(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of the k-means++ seeds.

    The first seed is uniform over the points; each further seed is drawn
    with probability proportional to the squared distance to its nearest
    chosen seed. If every remaining distance is zero (duplicates), the next
    seed is uniform over the points not yet chosen.
    """
    points = np.asarray(points, dtype=float)
    _check_feasible(points, k)
    n = points.shape[0]

    chosen = [int(rng.integers(n))]
    nearest = cdist(points, points[chosen], "sqeuclidean")[:, 0]
    while len(chosen) < k:
        weight = nearest.sum()
        if weight > 0:
            index = int(rng.choice(n, p=nearest / weight))
        else:
            remaining = np.setdiff1d(np.arange(n), chosen)
            index = int(remaining[rng.integers(len(remaining))])
        chosen.append(index)
        nearest = np.minimum(nearest, cdist(points, points[[index]], "sqeuclidean")[:, 0])
    return np.array(chosen)


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k x J matrix of k-means++ starting centroids.

    Raises:
        InfeasibleError: If there are fewer points than clusters
    """
    points = np.asarray(points, dtype=float)
    return points[kmeans_pp_indices(points, k, rng)].copy()


def assign_to_nearest(points: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest-centroid labels (first minimum wins) and squared distances."""
    distances = cdist(points, centroids, "sqeuclidean")
    labels = np.argmin(distances, axis=1)
    return labels, distances[np.arange(points.shape[0]), labels]


def _update_centroids(
    points: np.ndarray,
    labels: np.ndarray,
    sq_dist: np.ndarray,
    centroids: np.ndarray,
) -> Tuple[np.ndarray, List[int]]:
    k = centroids.shape[0]
    updated = centroids.copy()
    empty = []
    for cluster in range(k):
        members = labels == cluster
        if members.any():
            updated[cluster] = points[members].mean(axis=0)
        else:
            empty.append(cluster)

    # re-seed empty clusters to the worst-served points, one distinct point each
    remaining = sq_dist.copy()
    for cluster in empty:
        farthest = int(np.argmax(remaining))
        updated[cluster] = points[farthest]
        remaining[farthest] = -np.inf
    return updated, empty


def lloyd_kmeans(
    points: np.ndarray,
    k: int,
    rng: np.random.Generator,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    init: Optional[np.ndarray] = None,
) -> KmeansResult:
    """Lloyd iterations until the largest centroid shift drops below tol.

    Args:
        points: N x J matrix
        k: Number of clusters
        rng: Generator for the k-means++ start (unused when init is given)
        max_iter: Iteration cap
        tol: Convergence threshold on the Euclidean centroid shift
        init: Optional k x J starting centroids

    Returns:
        KmeansResult whose assignments are the nearest-centroid labels of the
        returned centroids; inertia_history holds the inertia at every
        assignment step and never increases.

    Raises:
        InfeasibleError: If N < k
    """
    points = np.asarray(points, dtype=float)
    _check_feasible(points, k)
    if max_iter < 1:
        raise ValidationError(f"max_iter must be at least 1, got {max_iter}")
    centroids = (
        np.array(init, dtype=float) if init is not None else kmeans_pp_init(points, k, rng)
    )
    if centroids.shape != (k, points.shape[1]):
        raise ValidationError(
            f"init must have shape {(k, points.shape[1])}, got {centroids.shape}"
        )

    history = []
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        labels, sq_dist = assign_to_nearest(points, centroids)
        history.append(float(sq_dist.sum()))
        updated, _ = _update_centroids(points, labels, sq_dist, centroids)
        shift = float(np.max(np.linalg.norm(updated - centroids, axis=1)))
        centroids = updated
        if shift < tol:
            converged = True
            break

    labels, sq_dist = assign_to_nearest(points, centroids)
    inertia = float(sq_dist.sum())
    history.append(inertia)
    return KmeansResult(
        centroids=centroids,
        assignments=labels,
        inertia=inertia,
        iterations=iterations,
        converged=converged,
        inertia_history=history,
    )


def best_of_restarts(
    points: np.ndarray,
    k: int,
    seed: int,
    restarts: int = 10,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> KmeansResult:
    """Lowest-inertia result over independent child streams of seed (ties: earliest)."""
    if restarts < 1:
        raise ValidationError(f"restarts must be at least 1, got {restarts}")
    best = None
    for stream in np.random.SeedSequence(seed).spawn(restarts):
        result = lloyd_kmeans(points, k, np.random.default_rng(stream), max_iter, tol)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


def elbow_curve(
    points: np.ndarray,
    k_values: Sequence[int],
    seed: int,
    restarts: int = 1,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> pd.DataFrame:
    """Inertia against k; values of k above the point count are skipped."""
    points = np.asarray(points, dtype=float)
    rows = [
        {"k": k, "inertia": best_of_restarts(points, k, seed, restarts, max_iter, tol).inertia}
        for k in k_values
        if 1 <= k <= points.shape[0]
    ]
    return pd.DataFrame(rows, columns=["k", "inertia"])


def cluster_latents(
    points: Sequence[LatentPoint],
    k: int = DEFAULT_K,
    seed: int = 0,
    restarts: int = 1,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    logger: Optional[logging.Logger] = None,
) -> Tuple[List[LatentPoint], KmeansResult]:
    """Run k-means on the latent means and return points with clusters attached."""
    logger = logger or get_logger()
    result = best_of_restarts(latent_matrix(points), k, seed, restarts, max_iter, tol)
    assigned = [
        LatentPoint(p.id, p.disease, p.mu, p.log_var, int(label))
        for p, label in zip(points, result.assignments)
    ]
    log_struct(
        logger,
        "INFO",
        f"k-means finished: k={k} inertia={result.inertia:.6f}",
        labels={"stage": "cluster", "k": k},
        fields={
            "iterations": result.iterations,
            "converged": result.converged,
            "restarts": restarts,
            "cluster_sizes": np.bincount(result.assignments, minlength=k).tolist(),
        },
    )
    return assigned, result


def _z_columns(latent_dim: int) -> List[str]:
    return [f"z{j + 1}" for j in range(latent_dim)]


def latents_to_frame(points: Sequence[LatentPoint]) -> pd.DataFrame:
    latent_dim = len(points[0].mu) if points else 0
    columns = ["id", "disease", *_z_columns(latent_dim), "cluster"]
    rows = [
        [
            str(p.id),
            p.disease.value,
            *[repr(float(v)) for v in p.mu],
            "" if p.cluster is None else str(p.cluster),
        ]
        for p in points
    ]
    return pd.DataFrame(rows, columns=columns)


def write_latents(path: Union[str, Path], points: Sequence[LatentPoint]) -> Path:
    return atomic_write_text(Path(path), frame_to_csv(latents_to_frame(points)))


def read_latents(path: Union[str, Path]) -> List[LatentPoint]:
    """Parse a latents CSV (cluster may be empty).

    Raises:
        ArtifactParseError: On a wrong header or malformed values
    """
    path = Path(path)
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False)
    columns = list(frame.columns)
    z_cols = columns[2:-1]
    if (
        columns[:2] != ["id", "disease"]
        or columns[-1:] != ["cluster"]
        or not z_cols
        or z_cols != _z_columns(len(z_cols))
    ):
        raise ArtifactParseError(
            f"Expected header id,disease,z1,...,zJ,cluster in {path}",
            context={"path": str(path), "header": columns},
        )

    points = []
    for offset, row in enumerate(frame.itertuples(index=False)):
        line = offset + 2
        try:
            cluster = row[-1].strip()
            points.append(
                LatentPoint(
                    id=int(row[0]),
                    disease=Disease(row[1]),
                    mu=np.array([float(v) for v in row[2:-1]]),
                    cluster=int(cluster) if cluster else None,
                )
            )
        except ValueError as exc:
            raise ArtifactParseError(
                f"Line {line} of {path}: {exc}",
                context={"path": str(path), "line": line},
            )
        if not np.all(np.isfinite(points[-1].mu)):
            raise ArtifactParseError(
                f"Line {line} of {path}: non-finite latent value",
                context={"path": str(path), "line": line},
            )
    return points


def centroids_to_frame(centroids: np.ndarray) -> pd.DataFrame:
    frame = pd.DataFrame(
        [[repr(float(v)) for v in row] for row in centroids],
        columns=_z_columns(centroids.shape[1]),
    )
    frame.insert(0, "cluster", [str(i) for i in range(centroids.shape[0])])
    return frame


def write_centroids(path: Union[str, Path], centroids: np.ndarray) -> Path:
    return atomic_write_text(Path(path), frame_to_csv(centroids_to_frame(centroids)))


def reconstruction_accuracy(
    params: VaeParams,
    cohort: Cohort,
    age_cap: float,
) -> Dict[str, float]:
    """Agreement between records and their posterior-mean reconstructions.

    Returns:
        race and binary-field accuracies in [0, 1] and age_mae in years
    """
    if len(cohort) == 0:
        raise ValidationError("Cannot measure reconstruction on an empty cohort")
    xhat = _clamped(reconstruct(params, encode_cohort(cohort, age_cap)))
    decoded = [
        decode_features(row, age_cap, record.disease, record.id)
        for row, record in zip(xhat, cohort.records)
    ]
    report = {
        "race": float(np.mean([d.race == r.race for d, r in zip(decoded, cohort.records)])),
    }
    for name in BINARY_FIELDS:
        report[name] = float(np.mean(
            [getattr(d, name) == getattr(r, name) for d, r in zip(decoded, cohort.records)]
        ))
    capped = [min(r.age, age_cap) for r in cohort.records]
    report["age_mae"] = float(np.mean([abs(d.age - a) for d, a in zip(decoded, capped)]))
    return report


def sample_prior(
    params: VaeParams,
    n: int,
    rng: np.random.Generator,
    age_cap: float,
) -> List[PVec]:
    """Decode n latents drawn from N(0, I) into patient profiles (disease unknown)."""
    if n < 1:
        raise ValidationError(f"n must be at least 1, got {n}")
    z = rng.standard_normal((n, params.latent_dim))
    xhat = _clamped(decode(params, z))
    return [decode_features(row, age_cap, None, i) for i, row in enumerate(xhat)]


def profiles_to_frame(records: Sequence[PVec]) -> pd.DataFrame:
    """Cohort CSV columns without the disease label."""
    frame = cohort_to_frame(Cohort(records=tuple(records)))
    return frame[[c for c in COHORT_COLUMNS if c != "disease"]]


def _clamped(xhat: np.ndarray) -> np.ndarray:
    # saturated sigmoids can round to exactly 0 or 1; age 0 is not a valid profile
    return np.clip(np.atleast_2d(xhat), XHAT_CLAMP, 1.0 - XHAT_CLAMP)
