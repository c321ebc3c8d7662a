"""Frame clustering on weighted tracking parameters and the clustered training schedule."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .mesh_binding import FrameDescriptor

DEFAULT_WEIGHTS = (0.3, 0.6, 0.1)  # expression, pose, translation
VAR_EPS = 1e-12
TIE_EPS = 1e-12  # silhouette scores closer than this count as tied


@dataclass
class ClusterPlan:
    K: int
    assignments: list[int]
    silhouette: float
    feature_dim: int
    frame_ids: list[int] = field(default_factory=list)
    scores: dict[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.frame_ids:
            self.frame_ids = list(range(len(self.assignments)))
        if len(self.frame_ids) != len(self.assignments):
            raise ValidationError("frame_ids and assignments differ in length")

    def members(self, cluster: int) -> list[int]:
        return [f for f, a in zip(self.frame_ids, self.assignments) if a == cluster]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scores"] = {str(k): v for k, v in self.scores.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterPlan":
        return cls(int(d["K"]), [int(a) for a in d["assignments"]], float(d["silhouette"]),
                   int(d["feature_dim"]), [int(f) for f in d.get("frame_ids", [])],
                   {int(k): float(v) for k, v in d.get("scores", {}).items()})


@dataclass
class Epoch:
    frames: list[int]
    adc_enabled: bool
    phase: str  # cluster id as a string, or "shuffled"
    pass_index: int  # 1-based count of how many times these frames have been visited


@dataclass
class TrainingSchedule:
    epochs: list[Epoch]

    def iterations(self):
        """Yield (epoch_index, epoch, frame_id) in training order."""
        for e, ep in enumerate(self.epochs):
            for f in ep.frames:
                yield e, ep, f

    @property
    def adc_iterations(self) -> int:
        return sum(len(ep.frames) for ep in self.epochs if ep.adc_enabled)

    @property
    def total_iterations(self) -> int:
        return sum(len(ep.frames) for ep in self.epochs)

    def to_dict(self) -> dict:
        return {"epochs": [asdict(e) for e in self.epochs]}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingSchedule":
        return cls([Epoch(list(e["frames"]), bool(e["adc_enabled"]), str(e["phase"]), int(e["pass_index"]))
                    for e in d["epochs"]])


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------


def _standardize(block: np.ndarray) -> np.ndarray:
    mean = block.mean(axis=0)
    var = block.var(axis=0)
    keep = var >= VAR_EPS
    return (block[:, keep] - mean[keep]) / np.sqrt(var[keep])


def build_features(frames: list[FrameDescriptor], weights=DEFAULT_WEIGHTS) -> np.ndarray:
    """Standardize each parameter block per dimension, weight it and concatenate.

    Dimensions with (near) zero variance across the sequence are dropped.
    """
    if len(frames) < 2:
        raise ValidationError("need at least 2 frames to build clustering features")
    w_expr, w_pose, w_trans = weights
    blocks = []
    for attr, w in (("expression", w_expr), ("pose", w_pose), ("translation", w_trans)):
        try:
            raw = np.stack([np.asarray(getattr(f, attr), dtype=np.float64).reshape(-1) for f in frames])
        except ValueError as exc:
            raise ValidationError(f"inconsistent {attr} dimensions across frames") from exc
        blocks.append(w * _standardize(raw))
    return np.concatenate(blocks, axis=1)


def pca_fit(X: np.ndarray, var_keep: float = 0.95) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (projected data, components (k, d), explained variances (all))."""
    if not 0.0 < var_keep <= 1.0:
        raise ValidationError("var_keep must lie in (0, 1]")
    X = np.asarray(X, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    if Xc.shape[1] == 0:
        return np.zeros((len(X), 1)), np.zeros((1, 0)), np.zeros(1)
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    explained = s * s / max(len(X) - 1, 1)
    total = explained.sum()
    if var_keep >= 1.0:
        k = len(s)
    elif total <= 0:
        k = 1
    else:
        ratio = np.cumsum(explained) / total
        k = int(np.searchsorted(ratio, var_keep - 1e-12) + 1)
        k = min(k, len(s))
    comps = vt[:k].copy()
    # Deterministic sign: largest-magnitude loading is positive.
    pivot = comps[np.arange(k), np.argmax(np.abs(comps), axis=1)]
    comps *= np.where(pivot < 0, -1.0, 1.0)[:, None]
    return Xc @ comps.T, comps, explained


def pca_reduce(X: np.ndarray, var_keep: float = 0.95) -> np.ndarray:
    return pca_fit(X, var_keep)[0]


# ---------------------------------------------------------------------------
# K-means and silhouette
# ---------------------------------------------------------------------------


def _sq_dists(Y: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (Y * Y).sum(1)[:, None] - 2.0 * Y @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(Y: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(Y)
    centers = [Y[rng.integers(n)]]
    d2 = _sq_dists(Y, centers[0][None])[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(Y[idx])
        d2 = np.minimum(d2, _sq_dists(Y, Y[idx][None])[:, 0])
    return np.array(centers)


def _lloyd(Y: np.ndarray, centers: np.ndarray, max_iter: int) -> tuple[np.ndarray, float]:
    K = len(centers)
    labels = None
    for _ in range(max_iter):
        d2 = _sq_dists(Y, centers)
        new = np.argmin(d2, axis=1)
        counts = np.bincount(new, minlength=K)
        for empty in np.flatnonzero(counts == 0):
            # Move the point farthest from its own centroid into the empty cluster.
            own = d2[np.arange(len(Y)), new]
            own[counts[new] <= 1] = -1.0
            far = int(np.argmax(own))
            counts[new[far]] -= 1
            new[far] = empty
            counts[empty] = 1
            d2[far] = 0.0
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centers = np.stack([Y[labels == k].mean(axis=0) for k in range(K)])
    inertia = float(_sq_dists(Y, centers)[np.arange(len(Y)), labels].sum())
    return labels, inertia


def _canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Relabel clusters in order of first appearance."""
    _, first = np.unique(labels, return_index=True)
    mapping = np.empty(labels.max() + 1, dtype=np.int64)
    mapping[labels[np.sort(first)]] = np.arange(len(first))
    return mapping[labels]


def kmeans(Y: np.ndarray, K: int, seed: int = 0, n_init: int = 10, max_iter: int = 300) -> np.ndarray:
    """Best-of-``n_init`` k-means++/Lloyd clustering; labels ordered by first appearance."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if K < 1:
        raise ValidationError("K must be >= 1")
    distinct = len(np.unique(Y, axis=0))
    if K > distinct:
        raise ValidationError(f"K={K} exceeds the number of distinct rows ({distinct})")
    if K == 1:
        return np.zeros(len(Y), dtype=np.int64)
    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(n_init):
        labels, inertia = _lloyd(Y, _kmeanspp(Y, K, rng), max_iter)
        if inertia < best_inertia:
            best, best_inertia = labels, inertia
    return _canonical_labels(best)


def silhouette(Y: np.ndarray, assignments: np.ndarray) -> float:
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    labels = np.asarray(assignments)
    clusters = np.unique(labels)
    if len(clusters) < 2:
        raise ValidationError("silhouette needs at least 2 clusters")
    D = np.sqrt(_sq_dists(Y, Y))
    np.fill_diagonal(D, 0.0)
    onehot = (labels[:, None] == clusters[None, :]).astype(np.float64)
    sizes = onehot.sum(0)
    sums = D @ onehot  # (n, K) distance totals to each cluster
    own = np.searchsorted(clusters, labels)
    n = len(Y)
    own_size = sizes[own]
    a = np.divide(sums[np.arange(n), own], own_size - 1, out=np.zeros(n), where=own_size > 1)
    means = sums / sizes[None, :]
    means[np.arange(n), own] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.divide(b - a, denom, out=np.zeros(n), where=denom > 0)
    s[own_size == 1] = 0.0
    return float(s.mean())


def select_k(Y: np.ndarray, k_min: int = 5, k_max: int = 12, seed: int = 0,
             frame_ids: list[int] | None = None) -> ClusterPlan:
    """Scan K in [k_min, k_max] and keep the best silhouette (ties to smaller K)."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if len(Y) <= k_max:
        raise ValidationError(f"need more than {k_max} frames to scan K up to {k_max}, got {len(Y)}")
    if k_min < 2 or k_max < k_min:
        raise ValidationError("require 2 <= k_min <= k_max")
    distinct = len(np.unique(Y, axis=0))
    best: tuple[float, int, np.ndarray] | None = None
    scores = {}
    for K in range(k_min, k_max + 1):
        if K > distinct:
            break
        labels = kmeans(Y, K, seed)
        score = silhouette(Y, labels)
        scores[K] = score
        if best is None or score > best[0] + TIE_EPS:
            best = (score, K, labels)
    if best is None:
        raise ValidationError(f"fewer distinct frames ({distinct}) than k_min={k_min}")
    score, K, labels = best
    return ClusterPlan(K, labels.tolist(), score, Y.shape[1], list(frame_ids) if frame_ids else [], scores)


def cluster_frames(frames: list[FrameDescriptor], weights=DEFAULT_WEIGHTS, var_keep: float = 0.95,
                   k_min: int = 5, k_max: int = 12, seed: int = 0) -> ClusterPlan:
    Y = pca_reduce(build_features(frames, weights), var_keep)
    return select_k(Y, k_min, k_max, seed, [f.frame_id for f in frames])


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


def make_schedule(plan: ClusterPlan, N: int = 6, M: int = 1, seed: int = 0) -> TrainingSchedule:
    """Per cluster: N - M shuffled epochs with ADC; then M global shuffled epochs without."""
    if not 0 <= M < N:
        raise ValidationError("require 0 <= M < N")
    rng = np.random.default_rng(seed)
    epochs = []
    for c in sorted(set(plan.assignments)):
        members = plan.members(c)
        for j in range(N - M):
            epochs.append(Epoch([int(f) for f in rng.permutation(members)], True, str(c), j + 1))
    for m in range(M):
        epochs.append(Epoch([int(f) for f in rng.permutation(plan.frame_ids)], False, "shuffled", N - M + m + 1))
    return TrainingSchedule(epochs)


def make_shuffled_schedule(frame_ids: list[int], N: int = 6, adc_epochs: int | None = None,
                           seed: int = 0) -> TrainingSchedule:
    """Unclustered baseline: N shuffled passes, ADC during the first ``adc_epochs``."""
    adc_epochs = N - 1 if adc_epochs is None else adc_epochs
    rng = np.random.default_rng(seed)
    return TrainingSchedule([
        Epoch([int(f) for f in rng.permutation(frame_ids)], e < adc_epochs, "shuffled", e + 1) for e in range(N)
    ])


def save_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj.to_dict(), indent=2))
