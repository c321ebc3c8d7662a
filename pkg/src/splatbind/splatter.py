"""CPU reference splatting renderer with analytic gradients.

Pixel ``(row, col)`` is sampled at image coordinates ``(x, y) = (col, row)``;
cameras follow the OpenCV convention (x right, y down, looking along +z).
Images are ``(H, W, 3)`` float arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import RenderStateError, ValidationError
from .splat_core import DeformedParams, covariance

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
DILATION = 0.3
NEAR = 0.01


@dataclass
class Camera:
    R: np.ndarray  # world-to-camera rotation
    t: np.ndarray  # world-to-camera translation
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    background: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self) -> None:
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValidationError("image size must be at least 1x1")

    @classmethod
    def look_at(cls, eye, target, up, fx: float, fy: float, width: int, height: int,
                background=(1.0, 1.0, 1.0)) -> "Camera":
        eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(R, -R @ eye, fx, fy, (width - 1) / 2.0, (height - 1) / 2.0, width, height,
                   np.asarray(background, dtype=np.float64))

    def to_dict(self) -> dict:
        return {"R": self.R.tolist(), "t": self.t.tolist(), "fx": self.fx, "fy": self.fy, "cx": self.cx,
                "cy": self.cy, "width": self.width, "height": self.height, "background": self.background.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["R"], d["t"], float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), d.get("background", [1.0, 1.0, 1.0]))


@dataclass
class Splats2D:
    """Screen-space splats ready for compositing (all arrays length N)."""

    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2), dilation included
    depth: np.ndarray  # (N,)
    opacity: np.ndarray  # (N,)
    color: np.ndarray  # (N, 3)
    culled: np.ndarray  # (N,) bool


@dataclass
class ScreenStats:
    """Per-Gaussian screen statistics of one render, in input order."""

    center: np.ndarray  # (N, 2)
    covered: np.ndarray  # (N,) int
    acc_alpha: np.ndarray  # (N,)
    pos_grad_accum: np.ndarray  # (N,)
    accum_count: np.ndarray  # (N,) int

    def __len__(self) -> int:
        return len(self.covered)


@dataclass
class _Fragments:
    """Per-(splat, pixel) records kept for the backward pass.

    Fragments are sorted by pixel, then front to back. ``slot`` is the
    position of a fragment within its pixel's list.
    """

    order: np.ndarray  # drawn splat indices, front to back
    rank: np.ndarray  # (F,) index into ``order``
    pixel: np.ndarray  # (F,) flat pixel index
    slot: np.ndarray  # (F,)
    alpha: np.ndarray  # (F,)
    gauss: np.ndarray  # (F,)
    trans: np.ndarray  # (F,) transmittance before the fragment
    final_trans: np.ndarray  # (P,)
    delta: np.ndarray  # (F, 2) pixel - mean
    conic: np.ndarray  # (M, 2, 2)
    depth_slots: int
    splats: Splats2D
    background: np.ndarray  # (3,)


@dataclass
class RenderOutput:
    image: np.ndarray
    stats: ScreenStats
    fragments: _Fragments | None = None


@dataclass
class RenderGrads:
    mean2d: np.ndarray  # (N, 2)
    color: np.ndarray  # (N, 3)
    opacity: np.ndarray  # (N,)


def _jacobian(cam_pts: np.ndarray, cam: Camera) -> np.ndarray:
    x, y, z = cam_pts[:, 0], cam_pts[:, 1], cam_pts[:, 2]
    J = np.zeros((len(cam_pts), 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / (z * z)
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / (z * z)
    return J


def project(g: DeformedParams, cam: Camera) -> Splats2D:
    """EWA projection of a batch of Gaussians; culls those with depth <= 0.01."""
    mu = np.atleast_2d(g.mu)
    n = len(mu)
    cam_pts = mu @ cam.R.T + cam.t
    depth = cam_pts[:, 2]
    culled = depth <= NEAR
    z = np.where(culled, 1.0, depth)
    safe = cam_pts.copy()
    safe[:, 2] = z
    mean2d = np.stack([cam.fx * safe[:, 0] / z + cam.cx, cam.fy * safe[:, 1] / z + cam.cy], axis=1)
    J = _jacobian(safe, cam)
    sigma = covariance(np.atleast_2d(g.scale), np.atleast_2d(g.rot)) if n else np.zeros((0, 3, 3))
    T = J @ cam.R
    cov2d = T @ sigma @ np.swapaxes(T, -1, -2) + DILATION * np.eye(2)
    return Splats2D(mean2d, cov2d, depth, np.atleast_1d(np.asarray(g.opacity, dtype=np.float64)),
                    np.atleast_2d(g.color), culled)


def project_gaussian(g: DeformedParams, cam: Camera):
    """Project one Gaussian. Returns ``(mean2d, cov2d, depth)`` or ``None`` when culled."""
    s = project(DeformedParams(np.atleast_2d(g.mu), np.atleast_2d(g.scale), np.atleast_2d(g.rot),
                               np.atleast_1d(g.opacity), np.atleast_2d(g.color)), cam)
    if s.culled[0]:
        return None
    return s.mean2d[0], s.cov2d[0], float(s.depth[0])


def project_backward(grad_mean2d: np.ndarray, g: DeformedParams, cam: Camera) -> np.ndarray:
    """Chain d/d mean2d to d/d world-space mean (covariance held fixed)."""
    mu = np.atleast_2d(g.mu)
    cam_pts = mu @ cam.R.T + cam.t
    culled = cam_pts[:, 2] <= NEAR
    cam_pts[culled, 2] = 1.0
    J = _jacobian(cam_pts, cam)
    out = np.einsum("nk,nkj->nj", grad_mean2d, J @ cam.R)
    out[culled] = 0.0
    return out


def _conics(cov: np.ndarray) -> np.ndarray:
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    conic = np.empty_like(cov)
    conic[:, 0, 0] = cov[:, 1, 1] / det
    conic[:, 1, 1] = cov[:, 0, 0] / det
    conic[:, 0, 1] = -cov[:, 0, 1] / det
    conic[:, 1, 0] = -cov[:, 1, 0] / det
    return conic


def _candidate_fragments(mean: np.ndarray, cov: np.ndarray, opacity: np.ndarray, width: int, height: int):
    """(rank, x, y) for every pixel inside each splat's alpha >= 1/255 bounding box.

    o * G >= 1/255 confines the pixel to the ellipse d^T conic d <= 2 ln(255 o),
    whose axis-aligned half extents are sqrt(2 ln(255 o) * cov_xx) and
    sqrt(2 ln(255 o) * cov_yy). One pixel of slack absorbs roundoff.
    """
    level = 2.0 * np.log(np.maximum(opacity, 1e-300) / ALPHA_MIN)
    ok = level > 0
    level = np.where(ok, level, 0.0)
    rx = np.sqrt(level * cov[:, 0, 0]) + 1.0
    ry = np.sqrt(level * cov[:, 1, 1]) + 1.0
    x0 = np.clip(np.ceil(mean[:, 0] - rx), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(mean[:, 0] + rx), -1, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(mean[:, 1] - ry), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(mean[:, 1] + ry), -1, height - 1).astype(np.int64)
    nx = np.where(ok, np.maximum(x1 - x0 + 1, 0), 0)
    ny = np.where(ok, np.maximum(y1 - y0 + 1, 0), 0)
    counts = nx * ny
    rank = np.repeat(np.arange(len(mean)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    row, col = np.divmod(local, np.repeat(np.maximum(nx, 1), counts))
    return rank, np.repeat(x0, counts) + col, np.repeat(y0, counts) + row


def rasterize(splats: Splats2D, width: int, height: int, background=np.ones(3),
              retain: bool = True) -> RenderOutput:
    """Depth-sorted alpha compositing of screen-space splats."""
    n = len(splats.depth)
    P = width * height
    bg = np.asarray(background, dtype=np.float64)

    drawn = np.flatnonzero(~splats.culled)
    order = drawn[np.argsort(splats.depth[drawn], kind="stable")]
    mean = splats.mean2d[order]
    opacity = splats.opacity[order]
    conic = _conics(splats.cov2d[order])

    rank, px, py = _candidate_fragments(mean, splats.cov2d[order], opacity, width, height)
    dx = px - np.ascontiguousarray(mean[:, 0])[rank]
    dy = py - np.ascontiguousarray(mean[:, 1])[rank]
    qa, qb, qc = (np.ascontiguousarray(conic[:, i, j]) for i, j in ((0, 0), (0, 1), (1, 1)))
    power = -0.5 * (qa[rank] * dx * dx + 2.0 * qb[rank] * dx * dy + qc[rank] * dy * dy)
    gauss = np.exp(power)
    alpha = np.minimum(ALPHA_MAX, opacity[rank] * gauss)
    keep = np.flatnonzero(alpha >= ALPHA_MIN)
    rank, gauss, alpha = rank[keep], gauss[keep], alpha[keep]
    delta = np.stack([dx[keep], dy[keep]], axis=1)
    pixel = py[keep] * width + px[keep]

    # Candidates are generated in rank order, so a stable sort by pixel keeps depth order.
    srt = np.argsort(pixel, kind="stable")
    rank, delta, gauss, alpha, pixel = rank[srt], delta[srt], gauss[srt], alpha[srt], pixel[srt]
    per_pixel = np.bincount(pixel, minlength=P)
    starts = np.cumsum(per_pixel) - per_pixel
    slot = np.arange(len(pixel)) - starts[pixel]
    D = int(per_pixel.max()) if len(pixel) else 0

    one_minus = np.ones((P, D + 1))
    one_minus[pixel, slot] = 1.0 - alpha
    cum = np.ones((P, D + 1))
    if D:
        np.cumprod(one_minus[:, :-1], axis=1, out=cum[:, 1:])
    trans = cum[pixel, slot]
    final_trans = cum[:, D] * one_minus[:, D] if D else np.ones(P)
    weight = alpha * trans
    color = splats.color[order]
    image = np.empty((P, 3))
    for ch in range(3):
        image[:, ch] = np.bincount(pixel, weight * color[rank, ch], minlength=P) + final_trans * bg[ch]

    m = len(order)
    covered = np.zeros(n, dtype=np.int64)
    acc = np.zeros(n)
    covered[order] = np.bincount(rank, minlength=m)
    acc[order] = np.bincount(rank, weight, minlength=m)
    center = np.where(splats.culled[:, None], 0.0, splats.mean2d)
    stats = ScreenStats(center, covered, acc, np.zeros(n), np.zeros(n, dtype=np.int64))
    frags = None
    if retain:
        frags = _Fragments(order, rank, pixel, slot, alpha, gauss, trans, final_trans, delta, conic, D, splats, bg)
    return RenderOutput(image.reshape(height, width, 3), stats, frags)


def render(gaussians: DeformedParams, cam: Camera, record_stats: bool = True, retain: bool = True) -> RenderOutput:
    if len(np.atleast_2d(gaussians.mu)) == 0 or np.size(gaussians.mu) == 0:
        splats = Splats2D(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0), np.zeros(0), np.zeros((0, 3)),
                          np.zeros(0, dtype=bool))
    else:
        splats = project(gaussians, cam)
    return rasterize(splats, cam.width, cam.height, cam.background, retain=retain)


def render_backward(output: RenderOutput, grad_image: np.ndarray, accumulator: ScreenStats | None = None) -> RenderGrads:
    """Exact gradients of sum(grad_image * image) w.r.t. mean2d, color and opacity.

    Also adds the norm of each visible splat's mean2d gradient to the
    positional-gradient accumulators of ``output.stats`` (and of
    ``accumulator`` when given).
    """
    fr = output.fragments
    if fr is None:
        raise RenderStateError("render_backward needs a render with retained fragments")
    sp = fr.splats
    n = len(sp.depth)
    H, W = output.image.shape[:2]
    P = H * W
    g = np.asarray(grad_image, dtype=np.float64).reshape(P, 3)
    order, rank, pixel = fr.order, fr.rank, fr.pixel
    m = len(order)
    alpha = fr.alpha
    color = sp.color[order]

    weight = alpha * fr.trans
    gp = g[pixel]
    d_color = np.stack([np.bincount(rank, weight * gp[:, ch], minlength=m) for ch in range(3)], axis=1)

    gc = np.einsum("fc,fc->f", color[rank], gp)  # g(p) . c_i
    # S_i: gradient-weighted colour composited behind fragment i, background included.
    contrib = np.zeros((P, fr.depth_slots + 1))
    contrib[pixel, fr.slot] = gc * weight
    suffix = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1]
    behind = suffix[pixel, fr.slot + 1] + fr.final_trans[pixel] * (gp @ fr.background)
    d_alpha = fr.trans * gc - behind / (1.0 - alpha)
    d_alpha[alpha >= ALPHA_MAX] = 0.0

    d_opacity = np.bincount(rank, d_alpha * fr.gauss, minlength=m)
    # d alpha / d mean = alpha * conic @ delta
    qa, qb, qc = (np.ascontiguousarray(fr.conic[:, i, j])[rank] for i, j in ((0, 0), (0, 1), (1, 1)))
    dx, dy = fr.delta[:, 0], fr.delta[:, 1]
    s = d_alpha * alpha
    d_mean = np.stack([np.bincount(rank, s * (qa * dx + qb * dy), minlength=m),
                       np.bincount(rank, s * (qb * dx + qc * dy), minlength=m)], axis=1)

    out = RenderGrads(np.zeros((n, 2)), np.zeros((n, 3)), np.zeros(n))
    out.mean2d[order] = d_mean
    out.color[order] = d_color
    out.opacity[order] = d_opacity

    visible = output.stats.covered > 0
    norms = np.linalg.norm(out.mean2d, axis=1)
    for st in (output.stats, accumulator):
        if st is None:
            continue
        st.pos_grad_accum[visible] += norms[visible]
        st.accum_count[visible] += 1
    return out


# ---------------------------------------------------------------------------
# Image I/O
# ---------------------------------------------------------------------------


def save_png(image: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    img = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path)


def load_png(path: str | Path) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def load_camera(path: str | Path) -> Camera:
    return Camera.from_dict(json.loads(Path(path).read_text()))
