"""Margin-softmax embedding losses, with and without foreign-cluster repulsion.

The consensus-aware variant extends the plain margin softmax by appending one
extra denominator term per foreign cluster: exp(mu), where mu saturates at the
full scale s inside the cluster's margin and decays with the angle beyond it.
Pushing a sample's embedding out of foreign clusters therefore lowers the
loss, which is what couples the clients.

Losses and gradients are defined for raw (not necessarily unit) inputs: every
cosine is computed between internally normalized rows, so the returned
gradients are the ambient gradients through the normalization map and are
tangent to the sphere whenever the inputs are already unit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np

from .clustering import SanitizedCluster
from .errors import DomainError, LabelOutOfRangeError, ShapeMismatchError

KIND_COSFACE = "cosface"
KIND_ARCFACE = "arcface"

_DEFAULT_MARGINS = {KIND_COSFACE: 0.35, KIND_ARCFACE: 0.5}

# Keeps cos/arccos chains away from their domain edges when differentiating.
_COS_EPS = 1e-12
_ARC_CLAMP_TINY = 1e-12


@dataclass(frozen=True)
class LossConfig:
    """Loss family plus its scale s and margin m.

    margin=None picks the family's customary default (0.35 for cosface,
    0.5 for arcface).
    """

    kind: str = KIND_COSFACE
    scale: float = 64.0
    margin: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in (KIND_COSFACE, KIND_ARCFACE):
            raise DomainError(f"kind={self.kind!r} not one of ('cosface', 'arcface')")
        if not self.scale > 0.0:
            raise DomainError(f"scale={self.scale} must be positive")
        if self.margin is None:
            object.__setattr__(self, "margin", _DEFAULT_MARGINS[self.kind])
        if self.margin < 0.0:
            raise DomainError(f"margin={self.margin} must be nonnegative")


@dataclass(frozen=True)
class ConsensusContext:
    """Foreign cluster centers repelling this client's embeddings.

    Own clusters are excluded: a client is not pushed away from its own data.
    """

    centers: np.ndarray  # (K, d), unit rows; K may be 0
    client: Hashable = 0

    @classmethod
    def empty(cls, dim: int, client: Hashable = 0) -> "ConsensusContext":
        return cls(np.zeros((0, dim)), client)

    @classmethod
    def from_clusters(
        cls,
        clusters: Iterable[SanitizedCluster],
        own_client: Hashable,
        dim: int,
    ) -> "ConsensusContext":
        foreign = [c.center for c in clusters if c.client != own_client]
        if not foreign:
            return cls.empty(dim, own_client)
        return cls(np.asarray(foreign, dtype=float), own_client)


@dataclass
class GradientBundle:
    """Loss value with ambient gradients for the embeddings and class centers."""

    d_embeddings: np.ndarray  # same shape as the embedding batch
    d_centers: np.ndarray  # same shape as the center matrix
    loss: float


def margin_similarity(config: LossConfig, theta: float, role: str) -> float:
    """Scaled similarity logit for one angle.

    role "positive" applies the margin (subtractive for cosface, angular for
    arcface); role "negative" is s * cos(theta) for both families.
    """
    if not 0.0 <= theta <= math.pi:
        raise DomainError(f"theta={theta} outside [0, pi]")
    if role == "negative":
        return config.scale * math.cos(theta)
    if role != "positive":
        raise DomainError(f"role={role!r} not 'positive' or 'negative'")
    if config.kind == KIND_COSFACE:
        return config.scale * (math.cos(theta) - config.margin)
    theta_eff = min(theta, math.pi - config.margin + _ARC_CLAMP_TINY)
    return config.scale * math.cos(theta_eff - config.margin)


def cluster_similarity(p_hat: np.ndarray, f: np.ndarray, rho: float, s: float) -> float:
    """Similarity between an embedding and a cluster of margin rho.

    Saturates at s while the embedding sits inside the margin and decays as
    s * cos(theta - rho) beyond it; continuous at the boundary.
    """
    c = float(np.clip(np.dot(np.asarray(p_hat, float), np.asarray(f, float)), -1.0, 1.0))
    theta = math.acos(c)
    return s * math.cos(max(theta - rho, 0.0))


def _check_batch(embeddings: np.ndarray, labels: np.ndarray, centers: np.ndarray) -> None:
    if embeddings.ndim != 2 or centers.ndim != 2:
        raise ShapeMismatchError("embeddings and centers must be 2-d arrays")
    if embeddings.shape[1] != centers.shape[1]:
        raise ShapeMismatchError(
            f"embedding dim {embeddings.shape[1]} != center dim {centers.shape[1]}"
        )
    if labels.shape != (embeddings.shape[0],):
        raise ShapeMismatchError("labels must be one integer per batch row")
    n = centers.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise LabelOutOfRangeError(f"labels must lie in [0, {n - 1}]")


def _unit_rows_and_norms(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / norms, norms[:, 0]


def _core(
    embeddings: np.ndarray,
    labels: np.ndarray,
    centers: np.ndarray,
    cluster_centers: np.ndarray,
    rho: float,
    config: LossConfig,
    want_grads: bool,
) -> GradientBundle:
    """Shared loss/gradient kernel.

    Logit layout per row: n class logits followed by K cluster logits. The
    target class logit uses the margin form, the other class logits the plain
    s*cos form, and cluster logits the saturating cluster similarity.
    """
    embeddings = np.asarray(embeddings, dtype=float)
    labels = np.asarray(labels, dtype=int)
    centers = np.asarray(centers, dtype=float)
    cluster_centers = np.asarray(cluster_centers, dtype=float).reshape(-1, embeddings.shape[1])
    _check_batch(embeddings, labels, centers)

    batch, _ = embeddings.shape
    n = centers.shape[0]
    k = cluster_centers.shape[0]
    s, m = config.scale, config.margin

    f_hat, f_norm = _unit_rows_and_norms(embeddings)
    w_hat, w_norm = _unit_rows_and_norms(centers)
    cos_cls = np.clip(f_hat @ w_hat.T, -1.0, 1.0)

    rows = np.arange(batch)
    logits = np.empty((batch, n + k))
    logits[:, :n] = s * cos_cls
    # d(logit)/d(cos), needed for the backward pass; negatives are linear in cos.
    gprime = np.full((batch, n + k), s)

    target_cos = cos_cls[rows, labels]
    if config.kind == KIND_COSFACE:
        logits[rows, labels] = s * (target_cos - m)
    else:
        ct = np.clip(target_cos, -1.0 + _COS_EPS, 1.0 - _COS_EPS)
        theta = np.arccos(ct)
        clamp_limit = math.pi - m + _ARC_CLAMP_TINY
        clamped = theta > clamp_limit
        theta_eff = np.where(clamped, clamp_limit, theta)
        logits[rows, labels] = s * np.cos(theta_eff - m)
        dlogit = np.where(clamped, 0.0, s * np.sin(theta_eff - m) / np.sin(theta))
        gprime[rows, labels] = dlogit

    if k:
        cos_clu = np.clip(f_hat @ cluster_centers.T, -1.0 + _COS_EPS, 1.0 - _COS_EPS)
        theta_p = np.arccos(cos_clu)
        beyond = theta_p > rho
        logits[:, n:] = s * np.cos(np.where(beyond, theta_p - rho, 0.0))
        # Subgradient 0 at theta == rho: inside the margin the term is flat.
        gprime[:, n:] = np.where(beyond, s * np.sin(theta_p - rho) / np.sin(theta_p), 0.0)

    row_max = logits.max(axis=1, keepdims=True)
    shifted = logits - row_max
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(denom[:, 0])
    loss = float(np.mean(lse - logits[rows, labels]))

    if not want_grads:
        return GradientBundle(np.zeros(0), np.zeros(0), loss)

    soft = exp / denom
    a = soft.copy()
    a[rows, labels] -= 1.0
    a *= gprime / batch

    cos_all = cos_cls if k == 0 else np.concatenate([cos_cls, cos_clu], axis=1)
    d_f_hat = a[:, :n] @ w_hat
    if k:
        d_f_hat = d_f_hat + a[:, n:] @ cluster_centers
    proj_f = np.sum(a * cos_all, axis=1, keepdims=True)
    d_embeddings = (d_f_hat - proj_f * f_hat) / f_norm[:, None]

    d_w_hat = a[:, :n].T @ f_hat
    proj_w = np.sum(a[:, :n] * cos_cls, axis=0)
    d_centers = (d_w_hat - proj_w[:, None] * w_hat) / w_norm[:, None]

    return GradientBundle(d_embeddings, d_centers, loss)


def classification_loss(
    embeddings: np.ndarray,
    labels: np.ndarray,
    centers: np.ndarray,
    config: LossConfig,
) -> float:
    """Mean margin-softmax loss of a batch against the local class centers."""
    empty = np.zeros((0, np.asarray(embeddings).shape[1]))
    return _core(embeddings, labels, centers, empty, 0.0, config, want_grads=False).loss


def consensus_loss(
    embeddings: np.ndarray,
    labels: np.ndarray,
    centers: np.ndarray,
    context: ConsensusContext,
    rho: float,
    config: LossConfig,
) -> float:
    """Margin-softmax loss with foreign clusters added to every denominator.

    Reduces exactly to classification_loss when the context is empty, and is
    never smaller than it otherwise: each cluster contributes a positive
    denominator term.
    """
    return _core(
        embeddings, labels, centers, context.centers, rho, config, want_grads=False
    ).loss


def loss_gradients(
    embeddings: np.ndarray,
    labels: np.ndarray,
    centers: np.ndarray,
    context: ConsensusContext,
    rho: float,
    config: LossConfig,
) -> GradientBundle:
    """Consensus loss with analytic gradients for embeddings and centers."""
    return _core(
        embeddings, labels, centers, context.centers, rho, config, want_grads=True
    )


def finite_diff_check(
    fn: Callable[[np.ndarray], float],
    point: np.ndarray,
    analytic: np.ndarray,
    h: float = 1e-5,
) -> float:
    """Worst relative disagreement between central differences and a gradient.

    Per-coordinate error |fd - analytic| is normalized by
    max(|fd|, |analytic|, 0.001 * max(1, ||analytic||_inf)) so that
    coordinates near zero are judged against the overall gradient scale
    instead of blowing up.
    """
    if h <= 0.0:
        raise DomainError(f"h={h} must be positive")
    point = np.asarray(point, dtype=float)
    analytic = np.asarray(analytic, dtype=float)
    if point.shape != analytic.shape:
        raise ShapeMismatchError("analytic gradient must match the point's shape")
    flat = point.ravel()
    fd = np.zeros(flat.size)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        hi = fn(bumped.reshape(point.shape))
        bumped[i] = flat[i] - h
        lo = fn(bumped.reshape(point.shape))
        fd[i] = (hi - lo) / (2.0 * h)
    an = analytic.ravel()
    floor = 1e-3 * max(1.0, float(np.max(np.abs(an))) if an.size else 1.0)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(an)), floor)
    if fd.size == 0:
        return 0.0
    return float(np.max(np.abs(fd - an) / denom))
