"""Greedy spherical-cap clustering of class centers with sanitized release.

Repeatedly finds the seed center whose rho-cap covers the most remaining
centers, releases the (optionally noised) cap mean, and removes everything
the noise-free mean covers. Release stops as soon as a candidate cluster
falls below the minimum size, so small groups are never published.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable

import numpy as np

from . import dp
from .errors import DomainError, EmptyInputError
from .geometry import has_unit_rows, normalize

MODE_SANITIZED = "sanitized"
MODE_NOISE_FREE = "noise_free"
MODE_NAIVE_PER_CENTER = "naive_per_center"
MODES = (MODE_SANITIZED, MODE_NOISE_FREE, MODE_NAIVE_PER_CENTER)


@dataclass(frozen=True)
class ClusteringParams:
    """Knobs for one clustering release.

    rho: cap half-angle defining cluster membership, in (0, pi/2].
    min_cluster_size: smallest cluster that may be released.
    max_queries: cap on the number of released cluster centers.
    budget: per-release privacy budget.
    mode: "sanitized" (noise at the tight calibration), "noise_free"
          (sigma = 0, nothing charged), or "naive_per_center" (every center
          released individually at sensitivity 2).
    """

    rho: float = 1.3
    min_cluster_size: int = 512
    max_queries: int = 1
    budget: dp.PrivacyBudget = field(default_factory=lambda: dp.PrivacyBudget(1.0))
    mode: str = MODE_SANITIZED

    def __post_init__(self) -> None:
        if not 0.0 < self.rho <= math.pi / 2.0:
            raise DomainError(f"rho={self.rho} outside (0, pi/2]")
        if int(self.min_cluster_size) != self.min_cluster_size or self.min_cluster_size < 1:
            raise DomainError(f"min_cluster_size={self.min_cluster_size} must be an integer >= 1")
        if int(self.max_queries) != self.max_queries or self.max_queries < 1:
            raise DomainError(f"max_queries={self.max_queries} must be an integer >= 1")
        if self.mode not in MODES:
            raise DomainError(f"mode={self.mode!r} not one of {MODES}")


@dataclass(frozen=True)
class SanitizedCluster:
    """One released cluster center with its margin and provenance.

    In naive_per_center mode the center is a single noised class center: it is
    not renormalized (the noise magnitude is part of what attack evaluation
    measures), covered_count is 1 and margin is 0.
    """

    center: np.ndarray
    margin: float
    covered_count: int
    query_index: int
    client: Hashable = 0
    round_index: int = 0


@dataclass
class ClusteringReport:
    """Everything one clustering run produced.

    raw_centers holds the unnormalized noise-free cap means and is populated
    only in noise_free mode; sanitized runs never retain them. fidelities
    holds the scalar cos(released center, noise-free direction) per query.
    member_indexes / removed_indexes are local ground truth for evaluation
    harnesses (which rows each query covered and which it knocked out of the
    active set); they are never part of a release payload.
    """

    clusters: list[SanitizedCluster]
    raw_centers: list[np.ndarray]
    queries_used: int
    ledger_delta: tuple[float, float]
    fidelities: list[float]
    member_indexes: list[np.ndarray] = field(default_factory=list)
    removed_indexes: list[np.ndarray] = field(default_factory=list)


def pairwise_angles(centers: np.ndarray) -> np.ndarray:
    """n x n matrix of angles between rows; symmetric with a zero diagonal."""
    centers = np.asarray(centers, dtype=float)
    gram = np.clip(centers @ centers.T, -1.0, 1.0)
    theta = np.arccos(gram)
    np.fill_diagonal(theta, 0.0)
    return theta


def densest_cap(
    centers: np.ndarray,
    active: np.ndarray,
    rho: float,
    theta: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Largest seed-neighborhood among the active rows, and its mean.

    For each active seed i the candidate set is every active j with
    theta[i, j] <= rho (the seed included). Returns the member indexes of the
    winning seed (ties broken by the lowest seed index) and the plain
    arithmetic mean of those rows, not normalized.
    """
    centers = np.asarray(centers, dtype=float)
    active = np.asarray(active, dtype=int)
    if active.size == 0:
        raise EmptyInputError("active index set is empty")
    if theta is None:
        theta = pairwise_angles(centers)
    sub = theta[np.ix_(active, active)]
    neighbor = sub <= rho
    counts = neighbor.sum(axis=1)
    seed_pos = int(np.argmax(counts))  # argmax takes the first max: lowest index wins
    members = active[neighbor[seed_pos]]
    p = centers[members].mean(axis=0)
    return members, p


def run_clustering(
    centers: np.ndarray,
    params: ClusteringParams,
    rng: np.random.Generator,
    client: Hashable = 0,
    round_index: int = 0,
) -> ClusteringReport:
    """Run the full greedy covering release on one client's class centers.

    Per query: find the densest rho-cap among the remaining centers; if it
    covers at least min_cluster_size members, release the (noised, then
    normalized) cap mean and drop every center within rho of the noise-free
    mean direction; otherwise stop. Removal deliberately tests against the
    noise-free direction, so the local bookkeeping is sharper than what is
    released. noise_free mode consumes no randomness and charges nothing;
    naive_per_center ignores clustering entirely and charges one release per
    center at sensitivity 2.
    """
    centers = np.asarray(centers, dtype=float)
    if centers.ndim != 2 or centers.shape[0] == 0:
        raise EmptyInputError("center matrix must have at least one row")
    if not has_unit_rows(centers):
        raise DomainError("center matrix rows must be unit norm")
    n, _ = centers.shape
    budget = params.budget

    if params.mode == MODE_NAIVE_PER_CENTER:
        calibration = dp.naive_sigma(budget)
        clusters = []
        fidelities = []
        for i in range(n):
            noised = dp.gaussian_perturb(centers[i], calibration.sigma, rng)
            clusters.append(
                SanitizedCluster(
                    center=noised,
                    margin=0.0,
                    covered_count=1,
                    query_index=i + 1,
                    client=client,
                    round_index=round_index,
                )
            )
            fidelities.append(float(np.dot(normalize(noised), centers[i])))
        delta = (n * budget.epsilon, n * budget.delta)
        return ClusteringReport(clusters, [], n, delta, fidelities)

    theta = pairwise_angles(centers)
    active = np.arange(n)
    clusters = []
    raw_centers: list[np.ndarray] = []
    fidelities = []
    member_indexes: list[np.ndarray] = []
    removed_indexes: list[np.ndarray] = []
    queries_used = 0
    for _ in range(params.max_queries):
        if active.size == 0:
            break
        members, p = densest_cap(centers, active, params.rho, theta)
        if members.size < params.min_cluster_size:
            break
        queries_used += 1
        member_indexes.append(members.copy())
        direction = normalize(p)
        if params.mode == MODE_SANITIZED:
            calibration = dp.sigma_tight(int(members.size), params.rho, budget)
            released = normalize(dp.gaussian_perturb(p, calibration.sigma, rng))
        else:
            released = direction.copy()
            raw_centers.append(p.copy())
        clusters.append(
            SanitizedCluster(
                center=released,
                margin=params.rho,
                covered_count=int(members.size),
                query_index=queries_used,
                client=client,
                round_index=round_index,
            )
        )
        fidelities.append(float(np.dot(released, direction)))
        cos_to_direction = np.clip(centers[active] @ direction, -1.0, 1.0)
        keep = np.arccos(cos_to_direction) > params.rho
        removed_indexes.append(active[~keep].copy())
        active = active[keep]

    if params.mode == MODE_SANITIZED:
        delta = (queries_used * budget.epsilon, queries_used * budget.delta)
    else:
        delta = (0.0, 0.0)
    return ClusteringReport(
        clusters,
        raw_centers,
        queries_used,
        delta,
        fidelities,
        member_indexes,
        removed_indexes,
    )
