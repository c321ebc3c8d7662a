"""Gaussian primitives, quaternion algebra and offset composition.

Quaternions use the (w, x, y, z) convention throughout. Every function accepts
either a single value or a batch along leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SingularCovarianceError, ValidationError

OFFSET_DIM = 13
MU_BOUND = 0.1
ALPHA_BOUND = 0.5
COLOR_BOUND = 0.7
LOG_SCALE_CLIP = 700.0  # keeps exp() positive and finite in float64

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# Quaternions
# ---------------------------------------------------------------------------


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValidationError("zero-norm quaternion")
    return q / n


def hamilton_product(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Return q1 * q2, renormalized to unit length."""
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    if np.any(np.linalg.norm(q1, axis=-1) < 1e-12) or np.any(np.linalg.norm(q2, axis=-1) < 1e-12):
        raise ValidationError("zero-norm quaternion")
    w1, x1, y1, z1 = np.moveaxis(q1, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(q2, -1, 0)
    out = np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )
    return quat_normalize(out)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion with w >= 0 (Shepperd's method)."""
    m = np.asarray(m, dtype=np.float64)
    batch = m.shape[:-2]
    m = m.reshape(-1, 3, 3)
    tr = m[:, 0, 0] + m[:, 1, 1] + m[:, 2, 2]
    diag = np.stack([tr, m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], axis=1)
    choice = np.argmax(diag, axis=1)
    q = np.empty((m.shape[0], 4))
    for k in range(4):
        sel = choice == k
        if not np.any(sel):
            continue
        a = m[sel]
        if k == 0:
            s = 2.0 * np.sqrt(1.0 + tr[sel])
            q[sel] = np.stack(
                [0.25 * s, (a[:, 2, 1] - a[:, 1, 2]) / s, (a[:, 0, 2] - a[:, 2, 0]) / s, (a[:, 1, 0] - a[:, 0, 1]) / s],
                axis=1,
            )
        elif k == 1:
            s = 2.0 * np.sqrt(1.0 + a[:, 0, 0] - a[:, 1, 1] - a[:, 2, 2])
            q[sel] = np.stack(
                [(a[:, 2, 1] - a[:, 1, 2]) / s, 0.25 * s, (a[:, 0, 1] + a[:, 1, 0]) / s, (a[:, 0, 2] + a[:, 2, 0]) / s],
                axis=1,
            )
        elif k == 2:
            s = 2.0 * np.sqrt(1.0 - a[:, 0, 0] + a[:, 1, 1] - a[:, 2, 2])
            q[sel] = np.stack(
                [(a[:, 0, 2] - a[:, 2, 0]) / s, (a[:, 0, 1] + a[:, 1, 0]) / s, 0.25 * s, (a[:, 1, 2] + a[:, 2, 1]) / s],
                axis=1,
            )
        else:
            s = 2.0 * np.sqrt(1.0 - a[:, 0, 0] - a[:, 1, 1] + a[:, 2, 2])
            q[sel] = np.stack(
                [(a[:, 1, 0] - a[:, 0, 1]) / s, (a[:, 0, 2] + a[:, 2, 0]) / s, (a[:, 1, 2] + a[:, 2, 1]) / s, 0.25 * s],
                axis=1,
            )
    q = np.where(q[:, :1] < 0, -q, q)
    return quat_normalize(q).reshape(batch + (4,))


def axis_angle_to_quat(v: np.ndarray) -> np.ndarray:
    """Axis-angle vector (direction = axis, norm = angle) to unit quaternion."""
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(a/2)/a -> 1/2 as a -> 0
    safe = np.where(angle > 1e-12, angle, 1.0)
    k = np.where(angle > 1e-12, np.sin(half) / safe, 0.5)
    return quat_normalize(np.concatenate([np.cos(half), k * v], axis=-1))


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", quat_to_matrix(q), v)


# ---------------------------------------------------------------------------
# Primitive types
# ---------------------------------------------------------------------------


@dataclass
class GaussianPrimitive:
    """A single triangle-bound Gaussian in canonical-triangle local coordinates."""

    mu: np.ndarray
    scale: np.ndarray
    rot: np.ndarray
    opacity: float
    color: np.ndarray
    face_id: int = 0
    uv: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self) -> None:
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(4)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        self.uv = np.asarray(self.uv, dtype=np.float64).reshape(2)
        self.opacity = float(self.opacity)
        if abs(np.linalg.norm(self.rot) - 1.0) > 1e-6:
            raise ValidationError("rotation quaternion must be unit length")
        if np.any(self.scale <= 0):
            raise ValidationError("scale components must be positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValidationError("opacity must lie in [0, 1]")
        if np.any(self.uv < 0) or np.any(self.uv > 1):
            raise ValidationError("uv must lie in [0, 1]^2")


@dataclass
class GaussianSet:
    """Struct-of-arrays container for N bound Gaussians.

    ``opacity`` and ``color`` are stored activated (in [0, 1]); the trainer
    keeps its own logit view of opacity.
    """

    mu: np.ndarray  # (N, 3) local coordinates of the bound triangle
    scale: np.ndarray  # (N, 3)
    rot: np.ndarray  # (N, 4)
    opacity: np.ndarray  # (N,)
    color: np.ndarray  # (N, 3)
    face_id: np.ndarray  # (N,) int
    uv: np.ndarray  # (N, 2)

    def __post_init__(self) -> None:
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(-1, 3)
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(-1, 4)
        self.opacity = np.asarray(self.opacity, dtype=np.float64).reshape(-1)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(-1, 3)
        self.face_id = np.asarray(self.face_id, dtype=np.int64).reshape(-1)
        self.uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 2)
        n = len(self.mu)
        for name in ("scale", "rot", "opacity", "color", "face_id", "uv"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"GaussianSet.{name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self) -> int:
        return len(self.mu)

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.ones((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)),
                   np.zeros(0, dtype=np.int64), np.zeros((0, 2)))

    @classmethod
    def from_primitives(cls, prims: list[GaussianPrimitive]) -> "GaussianSet":
        if not prims:
            return cls.empty()
        return cls(
            mu=np.stack([p.mu for p in prims]),
            scale=np.stack([p.scale for p in prims]),
            rot=np.stack([p.rot for p in prims]),
            opacity=np.array([p.opacity for p in prims]),
            color=np.stack([p.color for p in prims]),
            face_id=np.array([p.face_id for p in prims]),
            uv=np.stack([p.uv for p in prims]),
        )

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(self.mu[i], self.scale[i], self.rot[i], self.opacity[i], self.color[i],
                                 int(self.face_id[i]), self.uv[i])

    def take(self, idx) -> "GaussianSet":
        idx = np.asarray(idx)
        return GaussianSet(self.mu[idx], self.scale[idx], self.rot[idx], self.opacity[idx], self.color[idx],
                           self.face_id[idx], self.uv[idx])

    def copy(self) -> "GaussianSet":
        return self.take(np.arange(len(self)))

    @staticmethod
    def concat(parts: list["GaussianSet"]) -> "GaussianSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return GaussianSet.empty()
        return GaussianSet(*(np.concatenate([getattr(p, f) for p in parts])
                             for f in ("mu", "scale", "rot", "opacity", "color", "face_id", "uv")))

    def to_dict(self) -> dict:
        return {f: getattr(self, f).tolist() for f in ("mu", "scale", "rot", "opacity", "color", "face_id", "uv")}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianSet":
        n = len(d["mu"])
        return cls(
            mu=np.asarray(d["mu"], dtype=np.float64).reshape(n, 3),
            scale=np.asarray(d["scale"], dtype=np.float64).reshape(n, 3),
            rot=np.asarray(d.get("rot", [[1.0, 0.0, 0.0, 0.0]] * n), dtype=np.float64).reshape(n, 4),
            opacity=d["opacity"],
            color=np.asarray(d["color"], dtype=np.float64).reshape(n, 3),
            face_id=d.get("face_id", [0] * n),
            uv=np.asarray(d.get("uv", [[0.0, 0.0]] * n), dtype=np.float64).reshape(n, 2),
        )


@dataclass
class OffsetBundle:
    """Activated per-Gaussian offsets; fields may carry a leading batch axis."""

    d_mu: np.ndarray
    d_scale: np.ndarray
    d_rot: np.ndarray
    d_alpha: np.ndarray
    d_color: np.ndarray


@dataclass
class DeformedParams:
    """World-space Gaussian parameters (single or batched along axis 0)."""

    mu: np.ndarray
    scale: np.ndarray
    rot: np.ndarray
    opacity: np.ndarray
    color: np.ndarray

    def __len__(self) -> int:
        return len(np.atleast_2d(self.mu))

    def take(self, idx) -> "DeformedParams":
        return DeformedParams(self.mu[idx], self.scale[idx], self.rot[idx], self.opacity[idx], self.color[idx])


# ---------------------------------------------------------------------------
# Offsets and composition
# ---------------------------------------------------------------------------


def activate_offsets(raw: np.ndarray) -> OffsetBundle:
    """Map raw 13-channel texels to bounded offsets.

    Channel layout: position (3), log-scale (3), axis-angle (3), opacity (1),
    color (3). The rotation vector keeps its direction while its magnitude is
    squashed to an angle of at most pi.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != OFFSET_DIM:
        raise ValidationError(f"offset texel must have {OFFSET_DIM} channels, got {raw.shape[-1]}")
    if not np.all(np.isfinite(raw)):
        raise ValidationError("offset texel contains non-finite values")
    aa = raw[..., 6:9]
    norm = np.linalg.norm(aa, axis=-1, keepdims=True)
    safe = np.where(norm > 1e-12, norm, 1.0)
    angle = np.pi * np.tanh(norm)
    # tanh(n)/n -> 1 as n -> 0
    ratio = np.where(norm > 1e-12, angle / safe, np.pi)
    return OffsetBundle(
        d_mu=MU_BOUND * np.tanh(raw[..., 0:3]),
        d_scale=np.exp(np.clip(raw[..., 3:6], -LOG_SCALE_CLIP, LOG_SCALE_CLIP)),
        d_rot=axis_angle_to_quat(aa * ratio),
        d_alpha=ALPHA_BOUND * np.tanh(raw[..., 9]),
        d_color=COLOR_BOUND * np.tanh(raw[..., 10:13]),
    )


def identity_offsets(n: int | None = None) -> OffsetBundle:
    shape = () if n is None else (n,)
    return activate_offsets(np.zeros(shape + (OFFSET_DIM,)))


def compose_parameters(coarse: DeformedParams, off: OffsetBundle) -> DeformedParams:
    return DeformedParams(
        mu=coarse.mu + off.d_mu,
        scale=coarse.scale * off.d_scale,
        rot=hamilton_product(coarse.rot, off.d_rot),
        opacity=np.clip(coarse.opacity + off.d_alpha, 0.0, 1.0),
        color=np.clip(coarse.color + off.d_color, 0.0, 1.0),
    )


def covariance(scale: np.ndarray, rot: np.ndarray) -> np.ndarray:
    """Sigma = R S S^T R^T."""
    r = quat_to_matrix(rot)
    m = r * np.asarray(scale)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def gaussian_density(g: DeformedParams, x: np.ndarray) -> np.ndarray:
    scale = np.asarray(g.scale, dtype=np.float64)
    if np.any(scale <= 1e-12):
        raise SingularCovarianceError("scale component <= 1e-12")
    d = np.asarray(x, dtype=np.float64) - g.mu
    # R^T d / s gives the whitened offset, so the Mahalanobis term is its squared norm.
    local = np.einsum("...ji,...j->...i", quat_to_matrix(g.rot), d) / scale
    return np.exp(-0.5 * np.sum(local * local, axis=-1))


__all__ = [
    "GaussianPrimitive", "GaussianSet", "OffsetBundle", "DeformedParams", "IDENTITY_QUAT",
    "quat_normalize", "hamilton_product", "quat_to_matrix", "matrix_to_quat", "axis_angle_to_quat",
    "quat_rotate", "activate_offsets", "identity_offsets", "compose_parameters", "covariance",
    "gaussian_density",
]
