"""Synthetic scenes: meshes, tracked frames, ground-truth targets and sparse initializations."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ValidationError
from ..mesh_binding import FrameDescriptor, TriMesh, load_frames, load_obj, mesh_frames
from ..splat_core import IDENTITY_QUAT, GaussianSet, DeformedParams
from ..splatter import Camera, load_png, render
from ..uv_atlas import UVAtlas, load_mask_png, rasterize_uv, sample_uv
from ..mesh_binding import lbs_deform


@dataclass
class Scene:
    mesh: TriMesh  # canonical mesh
    frames: list[FrameDescriptor]  # vertex_positions carry the tracked geometry
    camera: Camera
    targets: dict[int, np.ndarray]
    atlas: UVAtlas
    init: GaussianSet
    gt: GaussianSet | None = None
    meta: dict = field(default_factory=dict)

    @property
    def frame_ids(self) -> list[int]:
        return [f.frame_id for f in self.frames]

    def frame(self, frame_id: int) -> FrameDescriptor:
        return self._by_id[frame_id]

    def __post_init__(self) -> None:
        self._by_id = {f.frame_id: f for f in self.frames}

    @property
    def scene_extent(self) -> float:
        v = self.mesh.vertices
        return float(np.linalg.norm(v - v.mean(axis=0), axis=1).max())


# ---------------------------------------------------------------------------
# Mesh helpers
# ---------------------------------------------------------------------------


def grid_mesh(nx: int, ny: int, xy_min, xy_max, z: float, uv_min, uv_max) -> TriMesh:
    """Planar grid of 2 * nx * ny triangles with a rectangular UV chart."""
    xs = np.linspace(xy_min[0], xy_max[0], nx + 1)
    ys = np.linspace(xy_min[1], xy_max[1], ny + 1)
    us = np.linspace(uv_min[0], uv_max[0], nx + 1)
    vs = np.linspace(uv_min[1], uv_max[1], ny + 1)
    X, Y = np.meshgrid(xs, ys)
    U, V = np.meshgrid(us, vs)
    verts = np.stack([X.ravel(), Y.ravel(), np.full(X.size, z)], axis=1)
    uvs = np.stack([U.ravel(), V.ravel()], axis=1)
    faces = []
    for j in range(ny):
        for i in range(nx):
            a = j * (nx + 1) + i
            b, c, d = a + 1, a + nx + 1, a + nx + 2
            faces += [[a, b, c], [b, d, c]]
    faces = np.array(faces)
    return TriMesh(verts, faces, uvs, faces.copy())


def merge_meshes(meshes: list[TriMesh]) -> TriMesh:
    verts, faces, uvs, uv_faces = [], [], [], []
    vo = to = 0
    for m in meshes:
        verts.append(m.vertices)
        uvs.append(m.uv_vertices)
        faces.append(m.faces + vo)
        uv_faces.append(m.uv_faces + to)
        vo += len(m.vertices)
        to += len(m.uv_vertices)
    return TriMesh(np.concatenate(verts), np.concatenate(faces), np.concatenate(uvs), np.concatenate(uv_faces))


def _locate_faces(points: np.ndarray, mesh: TriMesh, face_subset: np.ndarray) -> np.ndarray:
    """Face (from ``face_subset``) whose xy-projection contains each point; nearest barycenter otherwise."""
    tris = mesh.vertices[mesh.faces[face_subset]][:, :, :2]
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    v0, v1 = b - a, c - a
    den = v0[:, 0] * v1[:, 1] - v1[:, 0] * v0[:, 1]
    d = points[:, None, :2] - a[None]
    b1 = (d[..., 0] * v1[None, :, 1] - v1[None, :, 0] * d[..., 1]) / den
    b2 = (v0[None, :, 0] * d[..., 1] - d[..., 0] * v0[None, :, 1]) / den
    inside = (b1 >= -1e-9) & (b2 >= -1e-9) & (b1 + b2 <= 1 + 1e-9)
    centers = tris.mean(axis=1)
    dist = np.linalg.norm(points[:, None, :2] - centers[None], axis=-1)
    dist[inside] -= 1e6
    return face_subset[np.argmin(dist, axis=1)]


def bind_world_gaussians(points: np.ndarray, world_sigma: float, colors: np.ndarray, opacity: float,
                         mesh: TriMesh, face_subset: np.ndarray, atlas: UVAtlas, seed: int = 0) -> GaussianSet:
    """Bind world-space isotropic Gaussians to the canonical mesh (local coordinates)."""
    faces = _locate_faces(points, mesh, face_subset)
    fr = mesh_frames(mesh).take(faces)
    local = np.einsum("nji,nj->ni", fr.r, points - fr.t) / fr.k[:, None]
    scale = np.repeat((world_sigma / fr.k)[:, None], 3, axis=1)
    n = len(points)
    g = GaussianSet(local, scale, np.tile(IDENTITY_QUAT, (n, 1)), np.full(n, opacity), colors, faces,
                    np.zeros((n, 2)))
    g.uv = sample_uv(g.face_id, atlas, mesh, rng_seed=seed)
    return g


def lattice(xy_min, xy_max, nx: int, ny: int, z: float) -> np.ndarray:
    xs = xy_min[0] + (np.arange(nx) + 0.5) * (xy_max[0] - xy_min[0]) / nx
    ys = xy_min[1] + (np.arange(ny) + 0.5) * (xy_max[1] - xy_min[1]) / ny
    X, Y = np.meshgrid(xs, ys)
    return np.stack([X.ravel(), Y.ravel(), np.full(X.size, z)], axis=1)


def deform_for_frame(g: GaussianSet, mesh: TriMesh, vertices: np.ndarray) -> DeformedParams:
    return lbs_deform(g, mesh_frames(mesh, vertices))


def render_targets(gt: GaussianSet, mesh: TriMesh, frames: list[FrameDescriptor], cam: Camera) -> dict[int, np.ndarray]:
    return {f.frame_id: render(deform_for_frame(gt, mesh, f.vertex_positions), cam, retain=False).image
            for f in frames}


def _front_camera(size: int, view_half_width: float, distance: float = 3.0) -> Camera:
    """Camera on the -z axis whose image spans [-view_half_width, view_half_width] on the z = 0 plane."""
    f = 0.5 * size * distance / view_half_width
    return Camera.look_at(eye=(0.0, 0.0, -distance), target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0),
                          fx=f, fy=f, width=size, height=size)


# ---------------------------------------------------------------------------
# Single-frame toy scene
# ---------------------------------------------------------------------------


def _toy_texture(p: np.ndarray) -> np.ndarray:
    x, y = p[:, 0], p[:, 1]
    return np.clip(np.stack([
        0.55 + 0.35 * np.sin(2.2 * x + 0.5),
        0.45 + 0.35 * np.cos(2.7 * y - 0.3),
        0.50 + 0.30 * np.sin(1.7 * (x + y)),
    ], axis=1), 0.0, 1.0)


def generate_toy_scene(seed: int = 0, size: int = 64, gt_per_side: int = 16, init_per_side: int = 8,
                       atlas_resolution: int = 128, color_noise: float = 0.15,
                       position_noise: float = 0.3, view_half_width: float = 0.9) -> Scene:
    """One static frame of a textured quad.

    Targets come from a dense lattice of Gaussians; the initialization is a
    coarser lattice with jittered positions and colors.
    """
    rng = np.random.default_rng(seed)
    mesh = grid_mesh(4, 4, (-1, -1), (1, 1), 0.0, (0, 0), (1, 1))
    atlas = rasterize_uv(mesh, atlas_resolution)
    faces = np.arange(mesh.n_faces)
    spacing = 2.0 / gt_per_side
    pts = lattice((-1, -1), (1, 1), gt_per_side, gt_per_side, 0.0)
    gt = bind_world_gaussians(pts, 0.6 * spacing, _toy_texture(pts), 0.9, mesh, faces, atlas, seed)

    init_spacing = 2.0 / init_per_side
    ipts = lattice((-1, -1), (1, 1), init_per_side, init_per_side, 0.0)
    ipts[:, :2] += rng.normal(0.0, position_noise * init_spacing, (len(ipts), 2))
    ipts[:, :2] = np.clip(ipts[:, :2], -1.0, 1.0)
    icol = np.clip(_toy_texture(ipts) + rng.normal(0.0, color_noise, (len(ipts), 3)), 0.0, 1.0)
    init = bind_world_gaussians(ipts, 0.6 * spacing, icol, 0.5, mesh, faces, atlas, seed + 1)

    frame = FrameDescriptor(0, np.zeros(1), np.zeros(1), np.zeros(3), mesh.vertices.copy())
    cam = _front_camera(size, view_half_width)
    targets = render_targets(gt, mesh, [frame], cam)
    return Scene(mesh, [frame], cam, targets, atlas, init, gt, {"generator": "toy", "seed": seed})


# ---------------------------------------------------------------------------
# Occlusion scene
# ---------------------------------------------------------------------------

INTERIOR_MIN = np.array([-1.0 / 3.0, -2.0 / 3.0])
INTERIOR_MAX = np.array([1.0 / 3.0, 0.0])
BG_UV_MAX = np.array([0.75, 1.0])
FLAP_UV_MIN = np.array([0.8, 0.0])
FLAP_UV_MAX = np.array([1.0, 0.2])
FLAP_MARGIN = 0.1
FLAP_DEPTH = -0.3
DETAIL_BAND_MIN = 0.4


def _bg_texture(p: np.ndarray, interior_contrast: float = 0.8, detail_contrast: float = 0.0) -> np.ndarray:
    """Smooth skin tones, a striped interior and an optional checkered band along the top edge."""
    x, y = p[:, 0], p[:, 1]
    skin = np.stack([0.85 + 0.08 * np.sin(1.5 * x), 0.65 + 0.1 * np.cos(1.3 * y), 0.55 + 0.05 * x], axis=1)
    inside = (x >= INTERIOR_MIN[0]) & (x <= INTERIOR_MAX[0]) & (y >= INTERIOR_MIN[1]) & (y <= INTERIOR_MAX[1])
    stripes = (np.sin(x * 9.0 * np.pi) > 0).astype(float)
    a = interior_contrast
    interior = np.stack([0.45 + 0.625 * a * stripes, 0.08 + a * stripes, 0.1 + a * stripes], axis=1)
    out = np.where(inside[:, None], interior, skin)
    if detail_contrast > 0:
        band = y >= DETAIL_BAND_MIN
        checker = ((np.floor(x * 6.0) + np.floor(y * 6.0)) % 2)[:, None]
        hair = np.array([0.35, 0.25, 0.15]) + detail_contrast * (checker - 0.5)
        out = np.where(band[:, None], hair, out)
    return np.clip(out, 0.0, 1.0)


def _flap_texture(p: np.ndarray) -> np.ndarray:
    x, y = p[:, 0], p[:, 1]
    return np.clip(np.stack([0.25 + 0.1 * x, 0.35 + 0.1 * y, 0.7 + 0.05 * x], axis=1), 0.0, 1.0)


def _flap_rest() -> tuple[np.ndarray, np.ndarray]:
    lo = INTERIOR_MIN - FLAP_MARGIN
    hi = INTERIOR_MAX + FLAP_MARGIN
    return lo, hi


def _flap_vertices(rest_vertices: np.ndarray, angle: float) -> np.ndarray:
    """Swing the flap in its plane about its top-left corner."""
    lo, hi = _flap_rest()
    pivot = np.array([lo[0], hi[1]])
    c, s = np.cos(angle), np.sin(angle)
    rel = rest_vertices[:, :2] - pivot
    out = rest_vertices.copy()
    out[:, 0] = pivot[0] + c * rel[:, 0] - s * rel[:, 1]
    out[:, 1] = pivot[1] + s * rel[:, 0] + c * rel[:, 1]
    return out


def generate_occlusion_scene(seed: int = 0, frames: int = 40, occlusion_fraction: float = 0.7, size: int = 48,
                             atlas_resolution: int = 128, bg_cells: int = 6, gt_per_side: int = 30,
                             init_per_side: int = 9, interior_init_per_side: int | None = None,
                             flap_gt_per_side: int = 12, flap_init_per_side: int = 5,
                             color_noise: float = 0.1, view_half_width: float = 1.1,
                             interior_contrast: float = 0.8, detail_contrast: float = 0.0) -> Scene:
    """Background quad with a striped interior and a swinging occluder flap.

    In a ``occlusion_fraction`` share of the frames the flap hangs over the
    interior; otherwise it is swung roughly 90 degrees away. The flap angle is
    the frame's pose block, expression is an independent slow signal.
    """
    if frames < 20:
        raise ValidationError("occlusion scene needs at least 20 frames")
    if not 0.0 <= occlusion_fraction <= 1.0:
        raise ValidationError("occlusion_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)

    def bg_texture(p):
        return _bg_texture(p, interior_contrast, detail_contrast)

    bg = grid_mesh(bg_cells, bg_cells, (-1, -1), (1, 1), 0.0, (0, 0), BG_UV_MAX)
    lo, hi = _flap_rest()
    flap = grid_mesh(2, 2, lo, hi, FLAP_DEPTH, FLAP_UV_MIN, FLAP_UV_MAX)
    mesh = merge_meshes([bg, flap])
    n_bg_faces = bg.n_faces
    bg_faces = np.arange(n_bg_faces)
    flap_faces = np.arange(n_bg_faces, mesh.n_faces)
    flap_verts = np.arange(len(bg.vertices), len(mesh.vertices))

    R = atlas_resolution
    mask = np.zeros((R, R), dtype=bool)
    u_lo, u_hi = (INTERIOR_MIN[0] + 1) / 2 * BG_UV_MAX[0], (INTERIOR_MAX[0] + 1) / 2 * BG_UV_MAX[0]
    v_lo, v_hi = (INTERIOR_MIN[1] + 1) / 2 * BG_UV_MAX[1], (INTERIOR_MAX[1] + 1) / 2 * BG_UV_MAX[1]
    centers = (np.arange(R) + 0.5) / R
    mask[np.ix_((centers >= v_lo) & (centers <= v_hi), (centers >= u_lo) & (centers <= u_hi))] = True
    atlas = rasterize_uv(mesh, R, {"mouth": mask})

    # Ground truth: dense lattices on both parts.
    bpts = lattice((-1, -1), (1, 1), gt_per_side, gt_per_side, 0.0)
    fpts = lattice(lo, hi, flap_gt_per_side, flap_gt_per_side, FLAP_DEPTH)
    gt = GaussianSet.concat([
        bind_world_gaussians(bpts, 0.6 * 2.0 / gt_per_side, bg_texture(bpts), 0.95, mesh, bg_faces, atlas, seed),
        bind_world_gaussians(fpts, 0.6 * (hi[0] - lo[0]) / flap_gt_per_side, _flap_texture(fpts), 0.99, mesh,
                             flap_faces, atlas, seed),
    ])

    ibpts = lattice((-1, -1), (1, 1), init_per_side, init_per_side, 0.0)
    ifpts = lattice(lo, hi, flap_init_per_side, flap_init_per_side, FLAP_DEPTH)

    def noisy(c):
        return np.clip(c + rng.normal(0.0, color_noise, c.shape), 0.0, 1.0)

    groups = [(ibpts, 0.6 * 2.0 / init_per_side, bg_faces, bg_texture),
              (ifpts, 0.6 * (hi[0] - lo[0]) / flap_init_per_side, flap_faces, _flap_texture)]
    if interior_init_per_side is not None:
        # Replace the interior part of the initial lattice by a coarser one.
        inside = np.all(ibpts[:, :2] >= INTERIOR_MIN, axis=1) & np.all(ibpts[:, :2] <= INTERIOR_MAX, axis=1)
        groups[0] = (ibpts[~inside],) + groups[0][1:]
        ipts = lattice(INTERIOR_MIN, INTERIOR_MAX, interior_init_per_side, interior_init_per_side, 0.0)
        groups.append((ipts, 0.6 * (INTERIOR_MAX[0] - INTERIOR_MIN[0]) / interior_init_per_side, bg_faces,
                       bg_texture))
    init = GaussianSet.concat([
        bind_world_gaussians(pts, sigma, noisy(tex(pts)), 0.7, mesh, faces, atlas, seed + 1)
        for pts, sigma, faces, tex in groups
    ])

    n_occ = int(round(occlusion_fraction * frames))
    occluded = np.zeros(frames, dtype=bool)
    occluded[rng.permutation(frames)[:n_occ]] = True
    angles = np.where(occluded, rng.uniform(-0.02, 0.02, frames), rng.uniform(1.45, 1.75, frames))
    phase = rng.uniform(0, 2 * np.pi)
    descs = []
    for i in range(frames):
        verts = mesh.vertices.copy()
        verts[flap_verts] = _flap_vertices(verts[flap_verts], angles[i])
        expr = np.array([np.sin(0.3 * i + phase), np.cos(0.17 * i + phase)]) + rng.normal(0, 0.05, 2)
        descs.append(FrameDescriptor(i, expr, np.array([angles[i]]), np.zeros(3), verts))

    cam = _front_camera(size, view_half_width)
    targets = render_targets(gt, mesh, descs, cam)
    meta = {"generator": "occlusion", "seed": seed, "occluded_frames": np.flatnonzero(occluded).tolist(),
            "occlusion_fraction": occlusion_fraction}
    return Scene(mesh, descs, cam, targets, atlas, init, gt, meta)


def interior_pixel_mask(scene: Scene) -> np.ndarray:
    """Image-space mask of the interior rectangle (projected from the background plane)."""
    cam = scene.camera
    corners = np.array([[INTERIOR_MIN[0], INTERIOR_MIN[1], 0.0], [INTERIOR_MAX[0], INTERIOR_MAX[1], 0.0]])
    pc = corners @ cam.R.T + cam.t
    px = cam.fx * pc[:, 0] / pc[:, 2] + cam.cx
    py = cam.fy * pc[:, 1] / pc[:, 2] + cam.cy
    ys, xs = np.mgrid[0:cam.height, 0:cam.width]
    return ((xs >= px.min()) & (xs <= px.max()) & (ys >= py.min()) & (ys <= py.max()))


# ---------------------------------------------------------------------------
# Scenes from files and from config dicts
# ---------------------------------------------------------------------------


def load_file_scene(spec: dict, base: Path) -> Scene:
    """Scene from an OBJ mesh, a FrameDescriptor JSON, a camera JSON and target PNGs."""
    def path(key):
        p = Path(spec[key])
        p = p if p.is_absolute() else base / p
        if not p.exists():
            raise ValidationError(f"scene file not found: {p}")
        return p

    mesh = load_obj(path("mesh"))
    frames = load_frames(path("frames"))
    for f in frames:
        if f.vertex_positions is None:
            f.vertex_positions = mesh.vertices.copy()
    cam = Camera.from_dict(json.loads(path("camera").read_text()))
    targets = {}
    for f, t in zip(frames, spec["targets"]):
        p = Path(t) if Path(t).is_absolute() else base / t
        if not p.exists():
            raise ValidationError(f"target image not found: {p}")
        targets[f.frame_id] = load_png(p)
    masks = {name: load_mask_png(base / p) for name, p in spec.get("masks", {}).items()}
    R = int(spec.get("atlas_resolution", 256))
    atlas = rasterize_uv(mesh, R, masks)
    if "gaussians" in spec:
        init = GaussianSet.from_dict(json.loads(path("gaussians").read_text()))
    else:
        per_face = int(spec.get("gaussians_per_face", 1))
        faces = np.repeat(np.arange(mesh.n_faces), per_face)
        n = len(faces)
        init = GaussianSet(np.zeros((n, 3)), np.full((n, 3), float(spec.get("init_scale", 0.3))),
                           np.tile(IDENTITY_QUAT, (n, 1)), np.full(n, 0.5), np.full((n, 3), 0.5), faces,
                           np.zeros((n, 2)))
    init.uv = sample_uv(init.face_id, atlas, mesh, rng_seed=int(spec.get("seed", 0)))
    return Scene(mesh, frames, cam, targets, atlas, init, None, {"generator": "files"})


GENERATORS = {"toy": generate_toy_scene, "occlusion": generate_occlusion_scene}


def build_scene(spec: dict, base: Path | None = None) -> Scene:
    spec = dict(spec)
    if "generator" in spec:
        name = spec.pop("generator")
        if name not in GENERATORS:
            raise ValidationError(f"unknown scene generator {name!r} (choose from {sorted(GENERATORS)})")
        return GENERATORS[name](**spec)
    return load_file_scene(spec, base or Path.cwd())
