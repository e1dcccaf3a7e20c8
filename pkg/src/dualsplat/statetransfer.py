"""Scene-state operators: pseudo-state synthesis, co-pruning, co-pasting,
and novel-state assembly from an optimized dual field pair.

The two optimized fields redundantly describe one scene. A target state is
built by (1) symmetric nearest-neighbor pruning of Gaussians the other
field cannot explain, (2) pasting the alternate state's ground Gaussians
into the regions this state's objects vacate, and (3) applying the
requested per-object rigid transforms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .core import (
    BACKGROUND_LABEL,
    GaussianField,
    RigidTransform,
    SceneTransform,
    apply_scene_transform,
    compose,
    concatenate_fields,
    invert,
    quat_from_axis_angle,
    quat_to_matrix,
    scene_inverse,
)

DEFAULT_TAU = 0.5
DEFAULT_TAU_PASTE = 0.05
_BRUTE_FORCE_LIMIT = 256


class PlacementError(RuntimeError):
    """Constrained pseudo-state sampling failed; carries the object label."""

    def __init__(self, label: int, message: str):
        super().__init__(message)
        self.label = label


@dataclass(frozen=True)
class PseudoState:
    """A sampled virtual configuration reachable from both observed states."""

    t_1p: SceneTransform
    t_2p: SceneTransform
    seed: int


@dataclass(frozen=True)
class PruneReport:
    removed_from_1: Tuple[int, ...]
    removed_from_2: Tuple[int, ...]
    threshold: float

    def to_json(self) -> dict:
        return {
            "removed_from_1": list(self.removed_from_1),
            "removed_from_2": list(self.removed_from_2),
            "threshold": self.threshold,
        }


def _object_bounds_3sigma(field: GaussianField, label: int) -> np.ndarray:
    """Axis-aligned (2, 3) box covering the object's 3-sigma extents.

    Robust form: 95th-percentile center spread about the centroid plus the
    median member's 3-sigma radius. Optimization occasionally inflates a
    stray Gaussian, and one outlier must not define the object's collision
    or paste footprint; a genuinely huge object (one big Gaussian) still
    yields a huge box.
    """
    mask = field.object_labels == label
    centers = field.centers[mask]
    centroid = centers.mean(axis=0)
    spread = np.percentile(np.abs(centers - centroid), 95.0, axis=0)
    # per-Gaussian axis extents from the world covariance diagonal
    rg = quat_to_matrix(field.rotations[mask] / np.linalg.norm(field.rotations[mask], axis=1, keepdims=True))
    m = rg * np.exp(field.log_scales[mask])[:, None, :]
    sigma_axis = np.sqrt(np.einsum("nij,nij->ni", m, m))
    half = spread + 3.0 * np.median(sigma_axis, axis=0)
    return np.stack([centroid - half, centroid + half])


def _yaw_about_point(yaw: float, pivot_xy: np.ndarray, target_xy: np.ndarray, z_keep: float) -> RigidTransform:
    """Rigid transform rotating by yaw about the object centroid, then moving
    the centroid to the target ground position (z unchanged)."""
    rot = quat_from_axis_angle((0.0, 0.0, 1.0), yaw)
    r = quat_to_matrix(rot)
    pivot = np.array([pivot_xy[0], pivot_xy[1], z_keep])
    target = np.array([target_xy[0], target_xy[1], z_keep])
    return RigidTransform(rot, target - r @ pivot)


def make_pseudo_state(field1: GaussianField, t_12: SceneTransform,
                      bounds: np.ndarray, seed: int,
                      max_tries: int = 1000, planar: bool = True) -> PseudoState:
    """Sample collision-free per-object poses inside ``bounds``.

    bounds is a (2, 3) min/max box that must contain every object's 3-sigma
    footprint in both observed states. Poses are uniform translations with
    uniform yaw (upright objects); ``planar=False`` additionally samples a
    random 3D rotation axis and vertical offset. Deterministic given seed.
    """
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    rng = np.random.default_rng(seed)
    labels = sorted(l for l in field1.label_set if l != BACKGROUND_LABEL)

    placed: List[Tuple[np.ndarray, np.ndarray]] = []  # (xy_lo, xy_hi) of accepted boxes
    t_1p: Dict[int, RigidTransform] = {}
    for label in labels:
        box = _object_bounds_3sigma(field1, label)
        centroid = field1.centers[field1.object_labels == label].mean(axis=0)
        half = 0.5 * (box[1] - box[0])
        corners = np.array([[sx * half[0], sy * half[1]] for sx in (-1, 1) for sy in (-1, 1)])
        box_center_xy = 0.5 * (box[0][:2] + box[1][:2])
        centroid_to_box = box_center_xy - centroid[:2]

        accepted = None
        for _ in range(max_tries):
            yaw = rng.uniform(0.0, 2.0 * np.pi)
            if planar:
                axis, angle, dz = (0.0, 0.0, 1.0), yaw, 0.0
            else:
                axis = rng.normal(size=3)
                angle = yaw
                dz = rng.uniform(-0.1, 0.1)
            c, s = np.cos(yaw), np.sin(yaw)
            rot2 = np.array([[c, -s], [s, c]])
            rot_corners = corners @ rot2.T
            ext = np.abs(rot_corners).max(axis=0)
            off = rot2 @ centroid_to_box
            lo_xy = bounds[0][:2] + ext - off
            hi_xy = bounds[1][:2] - ext - off
            if np.any(hi_xy <= lo_xy):
                continue
            target = rng.uniform(lo_xy, hi_xy)
            new_lo = target + off - ext
            new_hi = target + off + ext
            if any(np.all(new_lo <= phi) and np.all(plo <= new_hi) for plo, phi in placed):
                continue
            accepted = (target, yaw, axis, angle, dz)
            placed.append((new_lo, new_hi))
            break
        if accepted is None:
            raise PlacementError(label, f"no collision-free pose found for object {label} after {max_tries} tries")
        target, yaw, axis, angle, dz = accepted
        if planar:
            t_1p[label] = _yaw_about_point(yaw, centroid[:2], target, centroid[2])
        else:
            rot = quat_from_axis_angle(axis, angle)
            r = quat_to_matrix(rot)
            goal = np.array([target[0], target[1], centroid[2] + dz])
            t_1p[label] = RigidTransform(rot, goal - r @ centroid)

    st_1p = SceneTransform(t_1p)
    st_2p = SceneTransform({o: compose(st_1p.get(o), invert(t_12.get(o))) for o in labels})
    return PseudoState(t_1p=st_1p, t_2p=st_2p, seed=int(seed))


def _nearest_distances(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Euclidean distance from each query to its nearest point; kd-tree with
    an exhaustive path for small sets (results are identical)."""
    if points.shape[0] == 0:
        return np.full(queries.shape[0], np.inf)
    if points.shape[0] < _BRUTE_FORCE_LIMIT:
        diff = queries[:, None, :] - points[None, :, :]
        return np.sqrt((diff ** 2).sum(axis=2)).min(axis=1)
    dist, _ = cKDTree(points).query(queries, k=1)
    return dist


def co_prune(field1: GaussianField, field2: GaussianField, t_12: SceneTransform,
             tau: float = DEFAULT_TAU) -> PruneReport:
    """Mark Gaussians whose transferred center has no neighbor within tau.

    Direction 1 transfers field1 into state 2 and checks against field2;
    direction 2 is symmetric via the inverse transform.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")

    def _one_direction(src: GaussianField, dst: GaussianField, t: SceneTransform):
        if len(src) == 0 or len(dst) == 0:
            return ()
        moved = apply_scene_transform(src, t)
        dist = _nearest_distances(moved.centers, dst.centers)
        return tuple(int(i) for i in np.flatnonzero(dist > tau))

    return PruneReport(
        removed_from_1=_one_direction(field1, field2, t_12),
        removed_from_2=_one_direction(field2, field1, scene_inverse(t_12)),
        threshold=float(tau),
    )


def remove_indices(field: GaussianField, indices) -> GaussianField:
    idx = np.asarray(sorted(set(int(i) for i in indices)), dtype=np.int64)
    keep = np.ones(len(field), dtype=bool)
    if idx.size:
        keep[idx] = False
    return field.select(keep)


def co_paste(field_src: GaussianField, field_dst: GaussianField, t_sd: SceneTransform,
             tau_paste: float = DEFAULT_TAU_PASTE) -> GaussianField:
    """Copy src background Gaussians into dst where dst's own objects occlude
    its ground.

    The vacated footprint is the union of the dst objects' 3-sigma boxes
    projected to the ground plane; src background centers inside it that
    have no dst background neighbor within tau_paste are appended (labels
    stay 0). Idempotent: a second pass finds all candidates already present.
    """
    # t_sd is accepted for symmetry with the other operators, but background
    # Gaussians are invariant under scene-state transfer: both fields' ground
    # already lives in the shared world frame, so nothing needs moving.
    del t_sd
    src_bg = field_src.select(field_src.background_mask)
    if len(src_bg) == 0:
        return field_dst

    fg_labels = sorted(l for l in field_dst.label_set if l != BACKGROUND_LABEL)
    if not fg_labels:
        return field_dst
    in_footprint = np.zeros(len(src_bg), dtype=bool)
    for label in fg_labels:
        box = _object_bounds_3sigma(field_dst, label)
        xy = src_bg.centers[:, :2]
        in_footprint |= np.all((xy >= box[0][:2]) & (xy <= box[1][:2]), axis=1)
    if not in_footprint.any():
        return field_dst

    candidates = src_bg.select(in_footprint)
    dst_bg_centers = field_dst.centers[field_dst.background_mask]
    dist = _nearest_distances(candidates.centers, dst_bg_centers)
    pasted = candidates.select(dist > tau_paste)
    if len(pasted) == 0:
        return field_dst
    return concatenate_fields(field_dst, pasted)


def synthesize_target(field1: GaussianField, field2: GaussianField,
                      t_12: SceneTransform, t_1t: SceneTransform,
                      tau: float = DEFAULT_TAU, tau_paste: float = DEFAULT_TAU_PASTE,
                      prune: bool = True, paste: bool = True) -> GaussianField:
    """Assemble the target-state field in state 1's frame.

    Pipeline: co-prune both fields, paste field2's ground into field1's
    vacated footprints, then move the objects by t_1t. Pure function of its
    arguments.
    """
    f1, f2 = field1, field2
    if prune:
        report = co_prune(f1, f2, t_12, tau)
        f1 = remove_indices(f1, report.removed_from_1)
        f2 = remove_indices(f2, report.removed_from_2)
    if paste:
        f1 = co_paste(f2, f1, scene_inverse(t_12), tau_paste)
    return apply_scene_transform(f1, t_1t)
