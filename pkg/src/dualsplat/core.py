"""Shared domain types: Gaussian primitives/fields, rigid transforms, cameras.

Conventions used throughout the package:

* quaternions are (w, x, y, z), unit-normalized, float64
* a ``RigidTransform`` maps points as ``x' = R x + t``
* object label 0 is the immutable background; labels 1..O are foreground objects
* pixel (row i, col j) has its center at continuous image coordinates (x=j, y=i)
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional

import numpy as np

IDENTITY_DIM = 16
BACKGROUND_LABEL = 0
UNIT_QUAT_TOL = 1e-6


class ParameterDomainError(ValueError):
    """A numeric parameter is outside its legal domain (e.g. non-unit quaternion)."""


class LabelDomainError(ValueError):
    """An object label was referenced that the target field does not contain."""


class InputError(ValueError):
    """Mismatched shapes/dimensions between related inputs."""


# ---------------------------------------------------------------------------
# quaternion algebra
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a ⊗ b, broadcasting over leading dimensions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_left_matrix(q: np.ndarray) -> np.ndarray:
    """4x4 matrix L with L @ p == q ⊗ p (left multiplication by q)."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [w, -x, -y, -z],
            [x, w, -z, y],
            [y, z, w, -x],
            [z, -y, x, w],
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion; batched over leading dims."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w,x,y,z) of a rotation matrix (Shepperd's method)."""
    m = np.asarray(m, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return quat_normalize(q)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * float(angle)
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v (..., 3) by unit quaternion q (4,)."""
    return np.asarray(v, dtype=np.float64) @ quat_to_matrix(q).T


# ---------------------------------------------------------------------------
# rigid transforms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion x -> R x + t, rotation stored as a unit quaternion."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(np.asarray(self.rotation, dtype=np.float64).reshape(4)))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3).copy())

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation_matrix().T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition: applying the result equals applying b, then a."""
    rot = quat_normalize(quat_multiply(a.rotation, b.rotation))
    trans = a.apply_points(b.translation[None])[0]
    return RigidTransform(rot, trans)


def invert(t: RigidTransform) -> RigidTransform:
    rot = quat_conjugate(t.rotation)
    trans = -quat_rotate(rot, t.translation[None])[0]
    return RigidTransform(rot, trans)


@dataclass(frozen=True)
class SceneTransform:
    """Per-object rigid transforms; labels absent from the map move by identity.

    Label 0 (background) may never appear: background is immutable under
    scene-state transitions.
    """

    per_object: Mapping[int, RigidTransform]

    def __post_init__(self):
        mapping = {int(k): v for k, v in self.per_object.items()}
        if BACKGROUND_LABEL in mapping:
            raise LabelDomainError("background (label 0) cannot carry a transform")
        object.__setattr__(self, "per_object", mapping)

    @staticmethod
    def identity() -> "SceneTransform":
        return SceneTransform({})

    def get(self, label: int) -> RigidTransform:
        return self.per_object.get(int(label), RigidTransform.identity())

    @property
    def labels(self):
        return set(self.per_object.keys())


def scene_inverse(t: SceneTransform) -> SceneTransform:
    return SceneTransform({o: invert(rt) for o, rt in t.per_object.items()})


def scene_compose(a: SceneTransform, b: SceneTransform) -> SceneTransform:
    """Per-object composition (apply b then a) over the union of labels."""
    labels = a.labels | b.labels
    return SceneTransform({o: compose(a.get(o), b.get(o)) for o in labels})


# ---------------------------------------------------------------------------
# Gaussian primitives and fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianPrimitive:
    """One anisotropic 3D Gaussian with appearance and identity payload."""

    center: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    color: np.ndarray
    identity: np.ndarray
    object_label: int

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(4))
        object.__setattr__(self, "log_scale", np.asarray(self.log_scale, dtype=np.float64).reshape(3))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64).reshape(3))
        identity = np.asarray(self.identity, dtype=np.float64).reshape(-1)
        if identity.shape[0] != IDENTITY_DIM:
            raise InputError(f"identity embedding must have {IDENTITY_DIM} components, got {identity.shape[0]}")
        object.__setattr__(self, "identity", identity)
        if self.object_label < 0:
            raise LabelDomainError("object_label must be >= 0")

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))


@dataclass(frozen=True)
class GaussianField:
    """Ordered collection of Gaussians stored as parameter arrays.

    Stored struct-of-arrays for rendering speed; ``primitive(i)`` /
    ``primitives`` give the per-Gaussian view. Treat instances as immutable:
    updates go through ``with_arrays``.
    """

    centers: np.ndarray        # (N, 3)
    rotations: np.ndarray      # (N, 4) unit quaternions (w,x,y,z)
    log_scales: np.ndarray     # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray         # (N, 3)
    identities: np.ndarray     # (N, 16)
    object_labels: np.ndarray  # (N,) int64, 0 = background
    object_count: int

    def __post_init__(self):
        n = np.asarray(self.centers).shape[0]
        conv = {
            "centers": (n, 3), "rotations": (n, 4), "log_scales": (n, 3),
            "opacity_logits": (n,), "colors": (n, 3), "identities": (n, IDENTITY_DIM),
        }
        for name, shape in conv.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(shape)
            if not np.all(np.isfinite(arr)):
                raise InputError(f"non-finite values in {name}")
            object.__setattr__(self, name, arr)
        labels = np.asarray(self.object_labels, dtype=np.int64).reshape(n)
        if n and (labels.min() < 0 or labels.max() > self.object_count):
            raise LabelDomainError(
                f"labels must lie in [0, {self.object_count}], got range "
                f"[{labels.min()}, {labels.max()}]"
            )
        object.__setattr__(self, "object_labels", labels)

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def label_set(self):
        return set(int(v) for v in np.unique(self.object_labels))

    @property
    def foreground_mask(self) -> np.ndarray:
        return self.object_labels != BACKGROUND_LABEL

    @property
    def background_mask(self) -> np.ndarray:
        return self.object_labels == BACKGROUND_LABEL

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            center=self.centers[i], rotation=self.rotations[i], log_scale=self.log_scales[i],
            opacity_logit=float(self.opacity_logits[i]), color=self.colors[i],
            identity=self.identities[i], object_label=int(self.object_labels[i]),
        )

    @property
    def primitives(self) -> List[GaussianPrimitive]:
        return [self.primitive(i) for i in range(len(self))]

    @staticmethod
    def from_primitives(prims, object_count: Optional[int] = None) -> "GaussianField":
        prims = list(prims)
        if object_count is None:
            object_count = max((p.object_label for p in prims), default=0)
        return GaussianField(
            centers=np.array([p.center for p in prims]).reshape(len(prims), 3),
            rotations=np.array([p.rotation for p in prims]).reshape(len(prims), 4),
            log_scales=np.array([p.log_scale for p in prims]).reshape(len(prims), 3),
            opacity_logits=np.array([p.opacity_logit for p in prims], dtype=np.float64),
            colors=np.array([p.color for p in prims]).reshape(len(prims), 3),
            identities=np.array([p.identity for p in prims]).reshape(len(prims), IDENTITY_DIM),
            object_labels=np.array([p.object_label for p in prims], dtype=np.int64),
            object_count=int(object_count),
        )

    def with_arrays(self, **updates) -> "GaussianField":
        return dataclasses.replace(self, **updates)

    def select(self, indices_or_mask) -> "GaussianField":
        idx = np.asarray(indices_or_mask)
        return GaussianField(
            centers=self.centers[idx], rotations=self.rotations[idx],
            log_scales=self.log_scales[idx], opacity_logits=self.opacity_logits[idx],
            colors=self.colors[idx], identities=self.identities[idx],
            object_labels=self.object_labels[idx], object_count=self.object_count,
        )


def concatenate_fields(a: GaussianField, b: GaussianField) -> GaussianField:
    return GaussianField(
        centers=np.concatenate([a.centers, b.centers]),
        rotations=np.concatenate([a.rotations, b.rotations]),
        log_scales=np.concatenate([a.log_scales, b.log_scales]),
        opacity_logits=np.concatenate([a.opacity_logits, b.opacity_logits]),
        colors=np.concatenate([a.colors, b.colors]),
        identities=np.concatenate([a.identities, b.identities]),
        object_labels=np.concatenate([a.object_labels, b.object_labels]),
        object_count=max(a.object_count, b.object_count),
    )


# ---------------------------------------------------------------------------
# covariance construction and object-aware transforms
# ---------------------------------------------------------------------------

def build_covariance(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """Covariance R S Sᵀ Rᵀ with S = diag(exp(log_scale)).

    The quaternion must already be unit length (within UNIT_QUAT_TOL); the
    log-scale parameterization keeps the result positive definite for any
    unconstrained log_scale.
    """
    rotation = np.asarray(rotation, dtype=np.float64).reshape(4)
    norm = np.linalg.norm(rotation)
    if abs(norm - 1.0) > UNIT_QUAT_TOL:
        raise ParameterDomainError(f"quaternion norm {norm:.9f} deviates from 1 beyond {UNIT_QUAT_TOL}")
    r = quat_to_matrix(rotation)
    m = r * np.exp(np.asarray(log_scale, dtype=np.float64).reshape(3))[None, :]
    cov = m @ m.T
    return 0.5 * (cov + cov.T)


def apply_scene_transform(field: GaussianField, t: SceneTransform) -> GaussianField:
    """Move each foreground object by its rigid transform; background is untouched.

    Rotates both the center and the orientation of each moved Gaussian, so
    anisotropic covariances travel with the object.
    """
    missing = t.labels - field.label_set
    if missing:
        raise LabelDomainError(f"transform references labels absent from field: {sorted(missing)}")
    centers = field.centers.copy()
    rotations = field.rotations.copy()
    for label, rt in t.per_object.items():
        mask = field.object_labels == label
        if not mask.any():
            continue
        centers[mask] = centers[mask] @ rt.rotation_matrix().T + rt.translation
        rotations[mask] = quat_multiply(rt.rotation[None, :], rotations[mask])
    return field.with_arrays(centers=centers, rotations=rotations)


def scene_transform_pullback(
    t: SceneTransform,
    object_labels: np.ndarray,
    grad_center: np.ndarray,
    grad_rotation: np.ndarray,
):
    """Adjoint of apply_scene_transform for the differentiable parameters.

    Given gradients w.r.t. the transformed centers/rotations, returns
    gradients w.r.t. the originals (x' = R x + t is linear in x; q' = q_T ⊗ q
    is linear in q).
    """
    g_center = np.array(grad_center, dtype=np.float64, copy=True)
    g_rotation = np.array(grad_rotation, dtype=np.float64, copy=True)
    for label, rt in t.per_object.items():
        mask = object_labels == label
        if not mask.any():
            continue
        g_center[mask] = g_center[mask] @ rt.rotation_matrix()
        g_rotation[mask] = g_rotation[mask] @ quat_left_matrix(rt.rotation)
    return g_center, g_rotation


# ---------------------------------------------------------------------------
# cameras and observations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Camera:
    """Pinhole camera: +z forward, +x right, +y down in the camera frame.

    A world point X projects to pixel coordinates
    ``u = fx * Xc/Zc + cx``, ``v = fy * Yc/Zc + cy`` with
    ``(Xc, Yc, Zc) = world_to_cam(X)``; pixel (i, j) is centered at (x=j, y=i).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: RigidTransform

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ParameterDomainError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ParameterDomainError("principal point must lie inside the image")

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        r = self.world_to_cam.rotation_matrix()
        return -r.T @ self.world_to_cam.translation

    def pixel_rays(self) -> np.ndarray:
        """(H, W, 3) unit ray directions in world coordinates through pixel centers."""
        ys, xs = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        d = np.stack([(xs - self.cx) / self.fx, (ys - self.cy) / self.fy, np.ones_like(xs)], axis=-1)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return d @ self.world_to_cam.rotation_matrix()


@dataclass(frozen=True)
class Observation:
    """One view's supervision bundle: RGB image in [0,1] plus integer mask."""

    image: np.ndarray  # (H, W, 3) float64
    mask: np.ndarray   # (H, W) int

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float64)
        mask = np.asarray(self.mask)
        if image.ndim != 3 or image.shape[2] != 3:
            raise InputError(f"image must be (H, W, 3), got {image.shape}")
        if mask.shape != image.shape[:2]:
            raise InputError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "mask", mask.astype(np.int64))
