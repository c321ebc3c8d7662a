"""Shared oracles and instance generators for the test suite."""

import copy

import numpy as np

from splatbind.splatter import ALPHA_MAX, ALPHA_MIN, Splats2D, rasterize


def random_splats(rng, n, width, height, cull_prob=0.0):
    A = rng.normal(0.0, 1.2, (n, 2, 2))
    return Splats2D(
        mean2d=rng.uniform([0, 0], [width - 1, height - 1], (n, 2)),
        cov2d=A @ np.swapaxes(A, 1, 2) + 0.6 * np.eye(2),
        depth=rng.uniform(1.0, 5.0, n),
        opacity=rng.uniform(0.1, 0.95, n),
        color=rng.uniform(0.0, 1.0, (n, 3)),
        culled=rng.random(n) < cull_prob,
    )


def near_threshold(sp, width, height, h, margin=50.0):
    """True if moving any splat parameter by h could push a fragment across the skip or clamp threshold.

    The bound uses |d alpha| <= alpha * (|conic d| h + h / opacity) with a safety factor ``margin``.
    """
    ys, xs = np.mgrid[0:height, 0:width]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
    for i in np.flatnonzero(~sp.culled):
        Q = np.linalg.inv(sp.cov2d[i])
        d = pts - sp.mean2d[i]
        raw = sp.opacity[i] * np.exp(-0.5 * np.einsum("pi,ij,pj->p", d, Q, d))
        slack = margin * h * raw * (np.linalg.norm(d @ Q, axis=1) + 1.0 / sp.opacity[i])
        if np.any(np.abs(raw - ALPHA_MIN) < slack) or np.any(np.abs(raw - ALPHA_MAX) < slack):
            return True
    return False


def brute_force_render(sp, width, height, background):
    """Per-pixel loop over depth-sorted splats."""
    img = np.zeros((height, width, 3))
    order = sorted(np.flatnonzero(~sp.culled), key=lambda i: (sp.depth[i], i))
    for y in range(height):
        for x in range(width):
            T, c = 1.0, np.zeros(3)
            for i in order:
                d = np.array([x, y], float) - sp.mean2d[i]
                a = min(ALPHA_MAX, sp.opacity[i] * np.exp(-0.5 * d @ np.linalg.inv(sp.cov2d[i]) @ d))
                if a < ALPHA_MIN:
                    continue
                c += T * a * sp.color[i]
                T *= 1.0 - a
            img[y, x] = c + T * np.asarray(background)
    return img


def finite_difference(sp, width, height, background, loss, h=1e-4):
    """Central differences of loss(image) w.r.t. mean2d, color and opacity of every splat."""
    def f(s):
        return loss(rasterize(s, width, height, background, retain=False).image)

    n = len(sp.depth)
    out = {"mean2d": np.zeros((n, 2)), "color": np.zeros((n, 3)), "opacity": np.zeros(n)}
    for name, arr in out.items():
        for idx in np.ndindex(arr.shape):
            a, b = copy.deepcopy(sp), copy.deepcopy(sp)
            getattr(a, name)[idx] += h
            getattr(b, name)[idx] -= h
            arr[idx] = (f(a) - f(b)) / (2 * h)
    return out


def relative_error(analytic, numeric, floor=1e-8):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale
