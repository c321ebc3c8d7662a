"""Triangle frames, LBS deformation of bound Gaussians and binding regularizers."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateFaceError, ValidationError
from .splat_core import DeformedParams, GaussianPrimitive, GaussianSet, hamilton_product, matrix_to_quat

EPS_MU = 1.0
EPS_S = 0.6


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    uv_vertices: np.ndarray  # (T, 2)
    uv_faces: np.ndarray  # (F, 3) int

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.uv_vertices = np.asarray(self.uv_vertices, dtype=np.float64).reshape(-1, 2)
        self.uv_faces = np.asarray(self.uv_faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) != len(self.uv_faces):
            raise ValidationError("faces and uv_faces must have equal length")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValidationError("face vertex index out of range")
        if len(self.uv_faces) and (self.uv_faces.min() < 0 or self.uv_faces.max() >= len(self.uv_vertices)):
            raise ValidationError("uv face index out of range")
        f = self.faces
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ValidationError("face with repeated vertex index")

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        return TriMesh(vertices, self.faces, self.uv_vertices, self.uv_faces)

    def face_uvs(self) -> np.ndarray:
        """(F, 3, 2) UV corners per face."""
        return self.uv_vertices[self.uv_faces]

    def face_vertices(self, vertices: np.ndarray | None = None) -> np.ndarray:
        v = self.vertices if vertices is None else np.asarray(vertices, dtype=np.float64)
        return v[self.faces]


def load_obj(path: str | Path) -> TriMesh:
    """Read ``v``/``vt``/``f`` records from a Wavefront OBJ file.

    Faces must be triangles written as ``f a/ta b/tb c/tc`` (1-based, normals
    ignored). A face without texture indices reuses its vertex indices.
    """
    verts, uvs, faces, uv_faces = [], [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        if tag == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif tag == "vt":
            uvs.append([float(x) for x in parts[1:3]])
        elif tag == "f":
            if len(parts) != 4:
                raise ValidationError(f"{path}:{lineno}: only triangular faces are supported")
            vi, ti = [], []
            for token in parts[1:]:
                fields = token.split("/")
                vi.append(int(fields[0]) - 1)
                ti.append(int(fields[1]) - 1 if len(fields) > 1 and fields[1] else int(fields[0]) - 1)
            faces.append(vi)
            uv_faces.append(ti)
    if not uvs:
        raise ValidationError(f"{path}: mesh has no vt records")
    return TriMesh(np.array(verts), np.array(faces), np.array(uvs), np.array(uv_faces))


def save_obj(mesh: TriMesh, path: str | Path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"vt {u:.9g} {v:.9g}" for u, v in mesh.uv_vertices]
    for f, t in zip(mesh.faces, mesh.uv_faces):
        lines.append("f " + " ".join(f"{a + 1}/{b + 1}" for a, b in zip(f, t)))
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class FrameDescriptor:
    frame_id: int
    expression: np.ndarray
    pose: np.ndarray
    translation: np.ndarray
    vertex_positions: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.expression = np.atleast_1d(np.asarray(self.expression, dtype=np.float64))
        self.pose = np.atleast_1d(np.asarray(self.pose, dtype=np.float64))
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.vertex_positions is not None:
            self.vertex_positions = np.asarray(self.vertex_positions, dtype=np.float64).reshape(-1, 3)

    def to_dict(self) -> dict:
        d = {
            "frame_id": int(self.frame_id),
            "expression": self.expression.tolist(),
            "pose": self.pose.tolist(),
            "translation": self.translation.tolist(),
        }
        if self.vertex_positions is not None:
            d["vertex_positions"] = self.vertex_positions.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FrameDescriptor":
        return cls(d["frame_id"], d["expression"], d["pose"], d["translation"], d.get("vertex_positions"))


def load_frames(path: str | Path) -> list[FrameDescriptor]:
    records = json.loads(Path(path).read_text())
    frames = [FrameDescriptor.from_dict(r) for r in records]
    check_frames(frames)
    return frames


def save_frames(frames: list[FrameDescriptor], path: str | Path) -> None:
    Path(path).write_text(json.dumps([f.to_dict() for f in frames]))


def check_frames(frames: list[FrameDescriptor]) -> None:
    if not frames:
        return
    ref = frames[0]
    for f in frames[1:]:
        if (f.expression.shape != ref.expression.shape or f.pose.shape != ref.pose.shape):
            raise ValidationError(f"frame {f.frame_id}: parameter dimensions differ from frame {ref.frame_id}")


@dataclass
class TriangleFrame:
    """Rotation ``r``, barycenter ``t`` and isotropic size ``k`` of a triangle.

    All fields may carry a leading face axis.
    """

    r: np.ndarray
    t: np.ndarray
    k: np.ndarray

    def take(self, idx) -> "TriangleFrame":
        return TriangleFrame(self.r[idx], self.t[idx], self.k[idx])

    @classmethod
    def identity(cls, n: int | None = None) -> "TriangleFrame":
        if n is None:
            return cls(np.eye(3), np.zeros(3), np.float64(1.0))
        return cls(np.tile(np.eye(3), (n, 1, 1)), np.zeros((n, 3)), np.ones(n))


def triangle_frame(v0: np.ndarray, v1: np.ndarray, v2: np.ndarray) -> TriangleFrame:
    """Local frame of triangle(s) (v0, v1, v2).

    Columns of ``r`` are the unit first edge, the unit normal, and their cross
    product edge x normal (so det(r) = +1). ``k`` averages the first edge length
    and the height of v2 above it.
    """
    v0, v1, v2 = (np.asarray(v, dtype=np.float64) for v in (v0, v1, v2))
    e = v1 - v0
    cross = np.cross(e, v2 - v0)
    cross_norm = np.linalg.norm(cross, axis=-1)
    if np.any(0.5 * cross_norm <= 1e-12):
        raise DegenerateFaceError("degenerate triangle (area <= 1e-12)")
    e_len = np.linalg.norm(e, axis=-1)
    e1 = e / e_len[..., None]
    n = cross / cross_norm[..., None]
    r = np.stack([e1, n, np.cross(e1, n)], axis=-1)
    height = cross_norm / e_len
    return TriangleFrame(r=r, t=(v0 + v1 + v2) / 3.0, k=0.5 * (e_len + height))


def mesh_frames(mesh: TriMesh, vertices: np.ndarray | None = None) -> TriangleFrame:
    fv = mesh.face_vertices(vertices)
    return triangle_frame(fv[:, 0], fv[:, 1], fv[:, 2])


def relative_frame(canonical: TriangleFrame, tracked: TriangleFrame) -> TriangleFrame:
    """Frame mapping canonical world coordinates onto the tracked triangle.

    Applying the result with :func:`lbs_deform` to a point p on the canonical
    triangle gives k_rel * r_rel @ p + t_rel, which lands on the corresponding
    point of the tracked triangle.
    """
    r = tracked.r @ np.swapaxes(canonical.r, -1, -2)
    k = np.asarray(tracked.k) / np.asarray(canonical.k)
    t = tracked.t - np.asarray(k)[..., None] * np.einsum("...ij,...j->...i", r, canonical.t)
    return TriangleFrame(r=r, t=t, k=k)


def invert_frame(f: TriangleFrame) -> TriangleFrame:
    rt = np.swapaxes(f.r, -1, -2)
    k = 1.0 / np.asarray(f.k)
    return TriangleFrame(r=rt, t=-np.asarray(k)[..., None] * np.einsum("...ij,...j->...i", rt, f.t), k=k)


def lbs_deform(g: GaussianPrimitive | GaussianSet, f: TriangleFrame) -> DeformedParams:
    """Deform Gaussians by their triangle frame(s).

    For a :class:`GaussianSet`, ``f`` is either one frame per Gaussian or a
    per-face table indexed by ``g.face_id``.
    """
    r, t, k = np.asarray(f.r), np.asarray(f.t), np.asarray(f.k)
    if isinstance(g, GaussianSet) and r.ndim == 3 and len(r) != len(g):
        r, t, k = r[g.face_id], t[g.face_id], k[g.face_id]
    elif isinstance(g, GaussianSet) and r.ndim == 2:
        n = len(g)
        r, t, k = np.broadcast_to(r, (n, 3, 3)), np.broadcast_to(t, (n, 3)), np.broadcast_to(k, (n,))
    mu = np.asarray(k)[..., None] * np.einsum("...ij,...j->...i", r, g.mu) + t
    rot = hamilton_product(matrix_to_quat(r), g.rot)
    return DeformedParams(
        mu=mu,
        scale=np.asarray(k)[..., None] * g.scale,
        rot=rot,
        opacity=np.array(g.opacity, dtype=np.float64, copy=True),
        color=np.array(g.color, dtype=np.float64, copy=True),
    )


def binding_regularizers(g: GaussianPrimitive | GaussianSet, eps_mu: float = EPS_MU,
                         eps_s: float = EPS_S) -> tuple[float, float]:
    """Squared hinge penalties on local position and scale beyond thresholds."""
    if eps_mu <= 0 or eps_s <= 0:
        raise ValidationError("regularizer thresholds must be positive")
    pos = np.maximum(np.abs(g.mu) - eps_mu, 0.0)
    sc = np.maximum(np.asarray(g.scale) - eps_s, 0.0)
    return float(np.sum(pos * pos)), float(np.sum(sc * sc))


def binding_regularizer_grad_mu(mu: np.ndarray, eps_mu: float = EPS_MU) -> np.ndarray:
    """Gradient of the position penalty with respect to local ``mu``."""
    excess = np.maximum(np.abs(mu) - eps_mu, 0.0)
    return 2.0 * excess * np.sign(mu)
