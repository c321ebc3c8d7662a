"""Clone / split / prune selection and application for triangle-bound Gaussians.

Cloning uses the fused-error average/peak rule, splitting keeps the classic
positional-gradient rule, pruning drops near-transparent Gaussians and opacity
is never reset.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .error_metrics import ErrorTracker
from .errors import ValidationError
from .mesh_binding import TriMesh
from .splat_core import GaussianSet, quat_to_matrix
from .uv_atlas import UVAtlas, region_count, sample_uv

SPLIT_SCALE_DIVISOR = 1.6
CLONE_JITTER = 0.1


@dataclass
class AdcConfig:
    tau_avg: float = 1e-3
    peak_fraction: float = 0.03
    tau_pos: float = 2e-4
    scale_split_threshold: float = 0.01
    prune_opacity: float = 0.005
    densify_interval: int = 100
    max_gaussians: int = 100_000

    def __post_init__(self) -> None:
        for name in ("tau_avg", "tau_pos", "scale_split_threshold", "prune_opacity"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"AdcConfig.{name} must be > 0")
        if not 0.0 < self.peak_fraction < 1.0:
            raise ValidationError("AdcConfig.peak_fraction must lie in (0, 1)")
        if self.densify_interval < 1 or self.max_gaussians < 1:
            raise ValidationError("densify_interval and max_gaussians must be >= 1")


@dataclass
class DensifyReport:
    iteration: int = 0
    cloned: list[int] = field(default_factory=list)
    split: list[int] = field(default_factory=list)
    pruned: list[int] = field(default_factory=list)
    new_total: int = 0
    regions_before: dict[str, int] = field(default_factory=dict)
    regions_after: dict[str, int] = field(default_factory=dict)
    cap_reached: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DensityState:
    """Gaussians plus the per-Gaussian statistics densification consumes."""

    gaussians: GaussianSet
    tracker: ErrorTracker
    grad_accum: np.ndarray
    grad_count: np.ndarray
    # After a densification event: index of each Gaussian's source in the
    # previous set, and whether it is a newly created child or copy.
    parents: np.ndarray | None = None
    born: np.ndarray | None = None

    @classmethod
    def fresh(cls, gaussians: GaussianSet) -> "DensityState":
        n = len(gaussians)
        return cls(gaussians, ErrorTracker.zeros(n), np.zeros(n), np.zeros(n, dtype=np.int64))


def peak_set_size(n: int, fraction: float) -> int:
    # Guard against 0.03 * N landing a hair above an integer.
    return min(n, math.ceil(fraction * n - 1e-9)) if n else 0


def clone_set(avg_errors: np.ndarray, peak_errors: np.ndarray, cfg: AdcConfig) -> np.ndarray:
    avg = np.asarray(avg_errors, dtype=np.float64)
    peak = np.asarray(peak_errors, dtype=np.float64)
    if avg.shape != peak.shape:
        raise ValidationError("average and peak error arrays differ in length")
    n = len(avg)
    k = peak_set_size(n, cfg.peak_fraction)
    # Descending peak, ties to the lower index.
    top = np.lexsort((np.arange(n), -peak))[:k]
    chosen = np.zeros(n, dtype=bool)
    chosen[top] = True
    chosen |= avg > cfg.tau_avg
    return np.flatnonzero(chosen)


def split_set(grad_accum: np.ndarray, grad_count: np.ndarray, max_scales: np.ndarray, cfg: AdcConfig,
              scene_extent: float = 1.0) -> np.ndarray:
    accum = np.asarray(grad_accum, dtype=np.float64)
    count = np.asarray(grad_count)
    mean = np.divide(accum, count, out=np.zeros_like(accum), where=count > 0)
    big = np.asarray(max_scales) > cfg.scale_split_threshold * scene_extent
    return np.flatnonzero((count >= 1) & (mean > cfg.tau_pos) & big)


def prune_set(gaussians: GaussianSet | np.ndarray, cfg: AdcConfig) -> np.ndarray:
    opacity = gaussians.opacity if isinstance(gaussians, GaussianSet) else np.asarray(gaussians)
    return np.flatnonzero(opacity < cfg.prune_opacity)


def region_counts(uvs: np.ndarray, atlas: UVAtlas | None) -> dict[str, int]:
    if atlas is None:
        return {}
    return {name: region_count(uvs, mask) for name, mask in atlas.region_masks.items()}


def apply_densification(state: DensityState | GaussianSet, clone: np.ndarray, split: np.ndarray,
                        prune: np.ndarray, atlas: UVAtlas | None, mesh: TriMesh | None, rng_seed: int,
                        cfg: AdcConfig | None = None, clone_scores: np.ndarray | None = None,
                        split_scores: np.ndarray | None = None, iteration: int = 0
                        ) -> tuple[DensityState, DensifyReport]:
    """Apply one densification event and return the new state and its report.

    Prune wins over split, split wins over clone. When the result would exceed
    ``cfg.max_gaussians``, the lowest-scoring clone/split requests are dropped.
    Every Gaussian on a face that gains members gets a fresh UV sample, and all
    trackers and gradient accumulators restart from zero.
    """
    if isinstance(state, GaussianSet):
        state = DensityState.fresh(state)
    cfg = cfg or AdcConfig()
    g = state.gaussians
    n = len(g)
    rng = np.random.default_rng(rng_seed)

    def as_mask(idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64).reshape(-1)
        if len(idx) and (idx.min() < 0 or idx.max() >= n):
            raise ValidationError("densification index out of range")
        m = np.zeros(n, dtype=bool)
        m[idx] = True
        return m

    prune_m = as_mask(prune)
    split_m = as_mask(split) & ~prune_m
    clone_m = as_mask(clone) & ~prune_m & ~split_m

    report = DensifyReport(iteration=iteration, regions_before=region_counts(g.uv, atlas))

    # Budget: each clone or split request adds one Gaussian net.
    budget = cfg.max_gaussians - (n - int(prune_m.sum()))
    requests = np.concatenate([np.flatnonzero(split_m), np.flatnonzero(clone_m)])
    if len(requests) > max(budget, 0):
        report.cap_reached = True
        s_scores = _scores(split_scores, n, cfg.tau_pos)
        c_scores = _scores(clone_scores, n, cfg.tau_avg)
        score = np.concatenate([s_scores[split_m], c_scores[clone_m]])
        keep = requests[np.lexsort((requests, -score))][:max(budget, 0)]
        kept = as_mask(keep)
        split_m &= kept
        clone_m &= kept

    survivors = np.flatnonzero(~prune_m & ~split_m)
    parts = [g.take(survivors)]

    split_idx = np.flatnonzero(split_m)
    if len(split_idx):
        children = g.take(np.repeat(split_idx, 2))
        noise = rng.standard_normal((len(children), 3)) * children.scale
        children.mu = children.mu + np.einsum("nij,nj->ni", quat_to_matrix(children.rot), noise)
        children.scale = children.scale / SPLIT_SCALE_DIVISOR
        parts.append(children)

    clone_idx = np.flatnonzero(clone_m)
    if len(clone_idx):
        copies = g.take(clone_idx)
        copies.mu = copies.mu + rng.standard_normal((len(copies), 3)) * (CLONE_JITTER * copies.scale)
        parts.append(copies)

    new = GaussianSet.concat(parts)
    if len(new) and atlas is not None and mesh is not None:
        grown = np.unique(g.face_id[np.concatenate([split_idx, clone_idx])].astype(np.int64))
        if len(grown):
            sel = np.flatnonzero(np.isin(new.face_id, grown))
            new.uv[sel] = sample_uv(new.face_id[sel], atlas, mesh, rng_seed=int(rng.integers(2 ** 31)))

    report.cloned = clone_idx.tolist()
    report.split = split_idx.tolist()
    report.pruned = np.flatnonzero(prune_m).tolist()
    report.new_total = len(new)
    report.regions_after = region_counts(new.uv, atlas)
    out = DensityState.fresh(new)
    out.parents = np.concatenate([survivors, np.repeat(split_idx, 2), clone_idx]).astype(np.int64)
    out.born = np.arange(len(new)) >= len(survivors)
    return out, report


def _scores(scores: np.ndarray | None, n: int, tau: float) -> np.ndarray:
    if scores is None:
        return np.zeros(n)
    return np.asarray(scores, dtype=np.float64) / tau


def densify_step(state: DensityState, cfg: AdcConfig, atlas: UVAtlas | None, mesh: TriMesh | None,
                 rng_seed: int, scene_extent: float = 1.0, world_max_scale: np.ndarray | None = None,
                 iteration: int = 0) -> tuple[DensityState, DensifyReport]:
    """Evaluate all three criteria on ``state`` and apply them."""
    avg = state.tracker.mean
    peak = state.tracker.peak
    max_scale = world_max_scale if world_max_scale is not None else state.gaussians.scale.max(axis=1)
    c = clone_set(avg, peak, cfg)
    s = split_set(state.grad_accum, state.grad_count, max_scale, cfg, scene_extent)
    p = prune_set(state.gaussians, cfg)
    grad_mean = np.divide(state.grad_accum, state.grad_count, out=np.zeros(len(avg)),
                          where=state.grad_count > 0)
    return apply_densification(state, c, s, p, atlas, mesh, rng_seed, cfg, clone_scores=avg,
                               split_scores=grad_mean, iteration=iteration)
