"""UV rasterization, UV-adaptive sampling, offset-map lookup and region masks.

Grid convention: ``grid[row, col]`` covers the texel whose center is
``u = (col + 0.5) / R``, ``v = (row + 0.5) / R``. Pixel pools are kept in
row-major order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .mesh_binding import TriMesh

log = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 256
BARY_EPS = 1e-9


@dataclass
class UVAtlas:
    resolution: int
    face_map: np.ndarray  # (R, R) int, -1 where empty
    bary_map: np.ndarray  # (R, R, 3)
    pixel_pools: list[np.ndarray]  # per face: (P_f,) flat row-major pixel indices
    region_masks: dict[str, np.ndarray] = field(default_factory=dict)
    overlap_count: int = 0

    def pool_pixels(self, face: int) -> np.ndarray:
        """(P_f, 2) array of (row, col) for the face's pool."""
        flat = self.pixel_pools[face]
        return np.stack(np.divmod(flat, self.resolution), axis=1)

    def pool_barys(self, face: int) -> np.ndarray:
        return self.bary_map.reshape(-1, 3)[self.pixel_pools[face]]

    def valid_mask(self) -> np.ndarray:
        return self.face_map >= 0


@dataclass
class OffsetMap:
    grid: np.ndarray  # (R, R, 13)

    def __post_init__(self) -> None:
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 3:
            raise ValidationError("offset map must be (H, W, C)")
        if not np.all(np.isfinite(self.grid)):
            raise ValidationError("offset map contains non-finite values")


def _barycentric(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of points p (..., 2) in triangle tri (3, 2)."""
    a, b, c = tri
    v0, v1 = b - a, c - a
    den = v0[0] * v1[1] - v1[0] * v0[1]
    d = p - a
    b1 = (d[..., 0] * v1[1] - v1[0] * d[..., 1]) / den
    b2 = (v0[0] * d[..., 1] - d[..., 0] * v0[1]) / den
    return np.stack([1.0 - b1 - b2, b1, b2], axis=-1)


def rasterize_uv(mesh: TriMesh, resolution: int = DEFAULT_RESOLUTION,
                 region_masks: dict[str, np.ndarray] | None = None) -> UVAtlas:
    """Rasterize the UV layout of ``mesh`` into face and barycentric maps.

    Pixels on edges shared by several faces go to the lowest face id. Pixels
    strictly inside more than one face are counted in ``overlap_count``.
    """
    R = int(resolution)
    if R < 2:
        raise ValidationError("resolution must be >= 2")
    uv = mesh.uv_vertices
    if np.any(uv < 0) or np.any(uv > 1):
        raise ValidationError("UV coordinates must lie in [0, 1]^2")
    face_map = np.full((R, R), -1, dtype=np.int64)
    bary_map = np.zeros((R, R, 3))
    overlaps = 0
    for f, tri in enumerate(mesh.face_uvs()):
        e0, e1 = tri[1] - tri[0], tri[2] - tri[0]
        if abs(e0[0] * e1[1] - e1[0] * e0[1]) <= 1e-14:
            continue
        lo = np.floor(tri.min(axis=0) * R - 0.5).astype(int)
        hi = np.ceil(tri.max(axis=0) * R - 0.5).astype(int)
        c0, c1 = max(lo[0], 0), min(hi[0], R - 1)
        r0, r1 = max(lo[1], 0), min(hi[1], R - 1)
        if c1 < c0 or r1 < r0:
            continue
        cols = np.arange(c0, c1 + 1)
        rows = np.arange(r0, r1 + 1)
        cc, rr = np.meshgrid(cols, rows)
        centers = np.stack([(cc + 0.5) / R, (rr + 0.5) / R], axis=-1)
        b = _barycentric(centers, tri)
        inside = np.all(b >= -BARY_EPS, axis=-1)
        strict = np.all(b > BARY_EPS, axis=-1)
        taken = face_map[r0:r1 + 1, c0:c1 + 1] >= 0
        overlaps += int(np.count_nonzero(strict & taken))
        new = inside & ~taken
        if np.any(new):
            # Clean up roundoff so components stay in the simplex.
            bn = np.clip(b[new], 0.0, None)
            bn /= bn.sum(axis=-1, keepdims=True)
            sub_f = face_map[r0:r1 + 1, c0:c1 + 1]
            sub_b = bary_map[r0:r1 + 1, c0:c1 + 1]
            sub_f[new] = f
            sub_b[new] = bn
    if overlaps:
        log.warning("rasterize_uv: %d pixels covered by overlapping UV faces; lower face id kept", overlaps)
    flat = face_map.reshape(-1)
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat[flat >= 0], minlength=mesh.n_faces)
    start = int(np.count_nonzero(flat < 0))
    pools = []
    for f in range(mesh.n_faces):
        pools.append(order[start:start + counts[f]].copy())
        start += counts[f]
    masks = {k: np.asarray(v) != 0 for k, v in (region_masks or {}).items()}
    for name, m in masks.items():
        if m.shape != (R, R):
            raise ValidationError(f"region mask {name!r} has shape {m.shape}, expected {(R, R)}")
    return UVAtlas(R, face_map, bary_map, pools, masks, overlaps)


def analytic_barycentric(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Uniform triangle sample from two uniforms: (1 - sqrt u, sqrt u (1 - v), sqrt u v)."""
    su = np.sqrt(np.asarray(u, dtype=np.float64))
    v = np.asarray(v, dtype=np.float64)
    return np.stack([1.0 - su, su * (1.0 - v), su * v], axis=-1)


def barycentric_reweight(mesh: TriMesh, faces: np.ndarray, bary: np.ndarray) -> np.ndarray:
    corners = mesh.face_uvs()[np.asarray(faces, dtype=np.int64)]
    return np.einsum("nk,nkd->nd", bary, corners)


def sample_uv(bindings: np.ndarray, atlas: UVAtlas, mesh: TriMesh, rng_seed: int = 0) -> np.ndarray:
    """Assign a UV coordinate to every Gaussian from its bound face.

    Faces with at least as many pool pixels as bound Gaussians take evenly
    spaced pool entries; smaller non-empty pools are used whole and topped up
    with replacement; faces without pixels fall back to uniform analytic
    barycentric samples.
    """
    bindings = np.asarray(bindings, dtype=np.int64).reshape(-1)
    if len(bindings) and (bindings.min() < 0 or bindings.max() >= mesh.n_faces):
        raise ValidationError("binding refers to a face not in the mesh")
    rng = np.random.default_rng(rng_seed)
    bary = np.zeros((len(bindings), 3))
    for f in np.unique(bindings):
        idx = np.flatnonzero(bindings == f)
        c_f = len(idx)
        pool = atlas.pixel_pools[f]
        if len(pool) >= c_f:
            pick = (np.arange(c_f) * len(pool)) // c_f
        elif len(pool) > 0:
            pick = np.concatenate([np.arange(len(pool)), rng.integers(0, len(pool), c_f - len(pool))])
        else:
            bary[idx] = analytic_barycentric(rng.random(c_f), rng.random(c_f))
            continue
        bary[idx] = atlas.bary_map.reshape(-1, 3)[pool[pick]]
    return np.clip(barycentric_reweight(mesh, bindings, bary), 0.0, 1.0)


def uv_in_face(uvs: np.ndarray, faces: np.ndarray, mesh: TriMesh, tol: float = 1e-6) -> np.ndarray:
    """Boolean per Gaussian: uv lies inside its face's UV triangle.

    Zero-area UV triangles contain nothing.
    """
    uvs = np.asarray(uvs, dtype=np.float64).reshape(-1, 2)
    tris = mesh.face_uvs()[np.asarray(faces, dtype=np.int64)]
    ok = np.zeros(len(uvs), dtype=bool)
    for i, (p, tri) in enumerate(zip(uvs, tris)):
        e1, e2 = tri[1] - tri[0], tri[2] - tri[0]
        if abs(e1[0] * e2[1] - e1[1] * e2[0]) < 1e-15:
            continue
        b = _barycentric(p, tri)
        ok[i] = bool(np.all(b >= -tol) and abs(b.sum() - 1.0) <= tol)
    return ok


def sample_offset_map(offset_map: OffsetMap, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup over texel centers, clamped at the borders."""
    uv = np.asarray(uv, dtype=np.float64)
    if np.any(uv < 0) or np.any(uv > 1):
        raise ValidationError("uv must lie in [0, 1]^2")
    grid = offset_map.grid
    H, W = grid.shape[:2]
    x = np.clip(uv[..., 0] * W - 0.5, 0.0, W - 1)
    y = np.clip(uv[..., 1] * H - 0.5, 0.0, H - 1)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    top = grid[y0, x0] * (1 - fx) + grid[y0, x1] * fx
    bottom = grid[y1, x0] * (1 - fx) + grid[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def fourier_encode(p: np.ndarray, num_bands: int = 4) -> np.ndarray:
    """Sinusoidal positional encoding along the last axis.

    For each input channel c the output holds, per band k, the pair
    [sin(2^k pi p_c), cos(2^k pi p_c)], giving 2 * num_bands * C channels.
    """
    if num_bands < 1:
        raise ValidationError("num_bands must be >= 1")
    p = np.asarray(p, dtype=np.float64)
    freqs = (2.0 ** np.arange(num_bands)) * np.pi
    arg = p[..., :, None] * freqs  # (..., C, L)
    enc = np.stack([np.sin(arg), np.cos(arg)], axis=-1)  # (..., C, L, 2)
    return enc.reshape(p.shape[:-1] + (-1,))


def uv_to_texel(uvs: np.ndarray, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    uvs = np.asarray(uvs, dtype=np.float64).reshape(-1, 2)
    col = np.clip(np.floor(uvs[:, 0] * resolution).astype(int), 0, resolution - 1)
    row = np.clip(np.floor(uvs[:, 1] * resolution).astype(int), 0, resolution - 1)
    return row, col


def region_count(uvs: np.ndarray, mask: np.ndarray) -> int:
    mask = np.asarray(mask) != 0
    if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
        raise ValidationError("region mask must be square")
    row, col = uv_to_texel(uvs, mask.shape[0])
    return int(np.count_nonzero(mask[row, col]))


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def load_mask_png(path: str | Path) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path).convert("L")) != 0


def save_mask_png(mask: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    Image.fromarray((np.asarray(mask) != 0).astype(np.uint8) * 255, mode="L").save(path)


def save_raw_planar(array: np.ndarray, path: str | Path) -> None:
    """Write (H, W, C) as a JSON header line followed by little-endian float32 planes."""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
    h, w, c = a.shape
    header = json.dumps({"width": w, "height": h, "channels": c}).encode() + b"\n"
    planes = np.ascontiguousarray(np.moveaxis(a, -1, 0)).astype("<f4")
    Path(path).write_bytes(header + planes.tobytes())


def load_raw_planar(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    header = json.loads(data[:nl])
    w, h, c = int(header["width"]), int(header["height"]), int(header["channels"])
    planes = np.frombuffer(data[nl + 1:], dtype="<f4")
    if planes.size != w * h * c:
        raise ValidationError(f"{path}: expected {w * h * c} floats, found {planes.size}")
    return np.moveaxis(planes.reshape(c, h, w), 0, -1).astype(np.float64)


def load_offset_map(path: str | Path) -> OffsetMap:
    grid = load_raw_planar(path)
    if grid.shape[-1] != 13:
        raise ValidationError(f"{path}: offset map must have 13 channels, found {grid.shape[-1]}")
    return OffsetMap(grid)
