"""Per-pixel error maps, summed-area tables, per-Gaussian error criteria and losses."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import ValidationError
from .splat_core import OffsetBundle
from .splatter import ScreenStats

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

LAMBDA1 = 0.2
LAMBDA2 = 0.05
LAMBDA3 = 0.01
LAMBDA4 = 0.001

PerceptualHook = Callable[[np.ndarray, np.ndarray], float]


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


@lru_cache(maxsize=32)
def _filter_matrix(n: int) -> np.ndarray:
    """(n, n) matrix applying the 1-D Gaussian window with reflect padding."""
    radius = SSIM_WINDOW // 2
    k = np.arange(SSIM_WINDOW) - radius
    w = np.exp(-(k * k) / (2 * SSIM_SIGMA ** 2))
    w /= w.sum()
    mode = "reflect" if n > 1 else "edge"
    padded = np.pad(np.eye(n), ((radius, radius), (0, 0)), mode=mode)
    F = np.zeros((n, n))
    for j in range(SSIM_WINDOW):
        F += w[j] * padded[j:j + n]
    F.setflags(write=False)
    return F


def _separable(img: np.ndarray, Fh: np.ndarray, Fw: np.ndarray) -> np.ndarray:
    H, W, C = img.shape
    rows = (Fh @ img.reshape(H, W * C)).reshape(H, W, C)
    return np.tensordot(rows, Fw, axes=(1, 1)).transpose(0, 2, 1)


def _blur(img: np.ndarray) -> np.ndarray:
    return _separable(img, _filter_matrix(img.shape[0]), _filter_matrix(img.shape[1]))


def _blur_adjoint(img: np.ndarray) -> np.ndarray:
    return _separable(img, _filter_matrix(img.shape[0]).T, _filter_matrix(img.shape[1]).T)


def _ssim_terms(x: np.ndarray, y: np.ndarray):
    mx, my = _blur(x), _blur(y)
    sxx = _blur(x * x) - mx * mx
    syy = _blur(y * y) - my * my
    sxy = _blur(x * y) - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    return mx, my, a1, a2, b1, b2


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-pixel, per-channel SSIM of two (H, W, C) images."""
    _, _, a1, a2, b1, b2 = _ssim_terms(_as_image(x), _as_image(y))
    return (a1 * a2) / (b1 * b2)


def ssim_grad(x: np.ndarray, y: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Gradient of sum(weight * ssim_map(x, y)) with respect to x."""
    x, y = _as_image(x), _as_image(y)
    mx, my, a1, a2, b1, b2 = _ssim_terms(x, y)
    s = (a1 * a2) / (b1 * b2)
    d_mx = 2 * my * a2 / (b1 * b2) - s * 2 * mx / b1
    d_sxx = -s / b2
    d_sxy = 2 * a1 / (b1 * b2)
    # sxx = blur(x^2) - mx^2 and sxy = blur(xy) - mx*my also depend on mx.
    d_mean = weight * (d_mx - 2 * mx * d_sxx - my * d_sxy)
    return _blur_adjoint(d_mean) + 2 * x * _blur_adjoint(weight * d_sxx) + y * _blur_adjoint(weight * d_sxy)


def _as_image(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[..., None] if a.ndim == 2 else a


def _check_pair(rendered: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    r, t = _as_image(rendered), _as_image(target)
    if r.shape != t.shape:
        raise ValidationError(f"image size mismatch: {r.shape} vs {t.shape}")
    return r, t


def l1_map(rendered: np.ndarray, target: np.ndarray) -> np.ndarray:
    r, t = _check_pair(rendered, target)
    return np.mean(np.abs(r - t), axis=-1)


def dssim_map(rendered: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-pixel (1 - SSIM) / 2, averaged over channels."""
    r, t = _check_pair(rendered, target)
    return np.mean((1.0 - ssim_map(r, t)) / 2.0, axis=-1)


# ---------------------------------------------------------------------------
# Error field and summed-area table
# ---------------------------------------------------------------------------


@dataclass
class ErrorField:
    E: np.ndarray  # (H, W)
    sat: Optional[np.ndarray] = None  # (H + 1, W + 1), long double

    @property
    def shape(self) -> tuple[int, int]:
        return self.E.shape


def fused_error_map(rendered: np.ndarray, target: np.ndarray, lambda1: float = LAMBDA1) -> ErrorField:
    r, t = _check_pair(rendered, target)
    E = (1.0 - lambda1) * l1_map(r, t) + lambda1 * dssim_map(r, t)
    # SSIM roundoff can dip a hair below 1 - SSIM = 0.
    return ErrorField(np.maximum(E, 0.0))


def build_sat(E: np.ndarray | ErrorField) -> ErrorField:
    grid = E.E if isinstance(E, ErrorField) else np.asarray(E, dtype=np.float64)
    if grid.ndim != 2 or not np.all(np.isfinite(grid)):
        raise ValidationError("error map must be a finite 2-D grid")
    H, W = grid.shape
    # Extended precision keeps four-corner differences accurate for tiny windows on large totals.
    sat = np.zeros((H + 1, W + 1), dtype=np.longdouble)
    np.cumsum(np.cumsum(grid, axis=1, dtype=np.longdouble), axis=0, out=sat[1:, 1:])
    return ErrorField(grid, sat)


def window_sum(ef: ErrorField, x1, x2, y1, y2):
    """Sum of E over columns [x1, x2] and rows [y1, y2] (inclusive, clipped).

    Accepts scalars or equal-length arrays of bounds.
    """
    if ef.sat is None:
        ef = build_sat(ef)
    H, W = ef.E.shape
    x1 = np.clip(np.asarray(x1), 0, W)
    y1 = np.clip(np.asarray(y1), 0, H)
    x2 = np.clip(np.asarray(x2), -1, W - 1)
    y2 = np.clip(np.asarray(y2), -1, H - 1)
    empty = (x2 < x1) | (y2 < y1)
    x2c = np.where(empty, x1 - 1, x2)
    y2c = np.where(empty, y1 - 1, y2)
    I = ef.sat
    total = I[y2c + 1, x2c + 1] - I[y1, x2c + 1] - I[y2c + 1, x1] + I[y1, x1]
    total = np.where(empty, 0.0, total).astype(np.float64)
    return float(total) if np.ndim(total) == 0 else total


def gaussian_avg_error(stats: ScreenStats, ef: ErrorField) -> np.ndarray:
    """Per-Gaussian (A_i / C_i) times the error summed over its square window.

    The window has half-extent floor(sqrt(C_i) / 2) around the rounded
    screen center; invisible Gaussians (C_i = 0) score 0.
    """
    covered = np.asarray(stats.covered)
    acc = np.asarray(stats.acc_alpha, dtype=np.float64)
    out = np.zeros(len(covered))
    vis = covered > 0
    if not np.any(vis):
        return out
    radius = np.floor(np.sqrt(covered[vis]) / 2.0).astype(np.int64)
    cx = np.floor(stats.center[vis, 0] + 0.5).astype(np.int64)
    cy = np.floor(stats.center[vis, 1] + 0.5).astype(np.int64)
    sums = window_sum(ef, cx - radius, cx + radius, cy - radius, cy + radius)
    out[vis] = acc[vis] / covered[vis] * sums
    return out


@dataclass
class ErrorTracker:
    """Running sum/count of per-iteration errors and their running peak."""

    total: np.ndarray
    count: int
    peak: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "ErrorTracker":
        return cls(np.zeros(n), 0, np.zeros(n))

    @property
    def mean(self) -> np.ndarray:
        return self.total / self.count if self.count else np.zeros_like(self.total)

    def take(self, idx) -> "ErrorTracker":
        return ErrorTracker(self.total[idx], self.count, self.peak[idx])


def tracker_update(tracker: ErrorTracker, values: np.ndarray) -> ErrorTracker:
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValidationError("tracker values must be finite")
    if tracker.count == 0:
        return ErrorTracker(values.copy(), 1, values.copy())
    return ErrorTracker(tracker.total + values, tracker.count + 1, np.maximum(tracker.peak, values))


def tracker_reset(n: int) -> ErrorTracker:
    return ErrorTracker.zeros(n)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def rgb_loss(rendered: np.ndarray, target: np.ndarray, lambda1: float = LAMBDA1, lambda2: float = LAMBDA2,
             gamma: float = 0.0, perceptual_hook: PerceptualHook | None = None) -> float:
    r, t = _check_pair(rendered, target)
    base = (1.0 - lambda1) * float(np.mean(np.abs(r - t)))
    if lambda1:
        base += lambda1 * float(np.mean(dssim_map(r, t)))
    if gamma and perceptual_hook is not None:
        base += gamma * lambda2 * float(perceptual_hook(r, t))
    return base


def rgb_loss_grad(rendered: np.ndarray, target: np.ndarray, lambda1: float = LAMBDA1, lambda2: float = LAMBDA2,
                  gamma: float = 0.0, perceptual_hook=None) -> tuple[float, np.ndarray]:
    """Loss value and its gradient with respect to ``rendered``.

    A hook contributes to the gradient only if it exposes a
    ``grad(rendered, target)`` method.
    """
    r, t = _check_pair(rendered, target)
    loss = rgb_loss(r, t, lambda1, lambda2, gamma, perceptual_hook)
    grad = (1.0 - lambda1) * np.sign(r - t) / r.size
    if lambda1:
        # mean over (p, c) of (1 - S) / 2
        w = np.full(r.shape, -0.5 / r.size)
        grad = grad + lambda1 * ssim_grad(r, t, w)
    if gamma and perceptual_hook is not None and hasattr(perceptual_hook, "grad"):
        grad = grad + gamma * lambda2 * np.asarray(perceptual_hook.grad(r, t)).reshape(r.shape)
    return loss, grad.reshape(np.shape(rendered))


def offset_reg(bundle: OffsetBundle, lambda3: float = LAMBDA3, lambda4: float = LAMBDA4) -> float:
    return float(lambda3 * np.sum(np.abs(np.asarray(bundle.d_scale) - 1.0))
                 + lambda4 * np.sum(np.abs(bundle.d_color)))


def psnr(rendered: np.ndarray, target: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(rendered) - np.asarray(target)) ** 2))
    return float("inf") if mse == 0 else -10.0 * np.log10(mse)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def heatmap(E: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """Black-red-yellow-white ramp of a scalar map, as an (H, W, 3) image."""
    E = np.asarray(E, dtype=np.float64)
    top = vmax if vmax is not None else (float(E.max()) or 1.0)
    s = np.clip(E / top, 0.0, 1.0)
    return np.stack([np.clip(3 * s, 0, 1), np.clip(3 * s - 1, 0, 1), np.clip(3 * s - 2, 0, 1)], axis=-1)


def export_error_field(ef: ErrorField, stem: str | Path) -> None:
    from .splatter import save_png
    from .uv_atlas import save_raw_planar

    stem = Path(stem)
    save_png(heatmap(ef.E), stem.with_suffix(".png"))
    save_raw_planar(ef.E, stem.with_suffix(".f32"))
