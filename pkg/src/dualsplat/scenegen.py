"""Procedural dual-state scene generation with an exact ray-traced oracle.

Scenes are textured spheres and boxes resting on a bounded textured ground
plane. Two observed states differ by per-object planar rigid motions chosen
so no ground region is hidden in both states; a third, novel test state is
generated for evaluation. The oracle renders by analytic ray-shape
intersection (no splatting) and emits exact masks, labeled point clouds,
and the ground-truth state transition.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field as dc_field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .core import (
    Camera,
    Observation,
    RigidTransform,
    SceneTransform,
    quat_from_axis_angle,
    quat_from_matrix,
    quat_to_matrix,
)
from .metrics import psnr, ssim  # re-exported evaluation metrics

__all__ = [
    "SceneSpec", "PointCloud", "TestState", "DualSceneBundle",
    "GenerationError", "generate", "render_state", "psnr", "ssim",
    "inject_mask_noise",
]


class GenerationError(RuntimeError):
    """Scene constraints could not be satisfied within the retry budget."""


@dataclass(frozen=True)
class SceneSpec:
    """Knobs of the procedural generator; deterministic given ``seed``."""

    object_count: int = 2
    image_size: int = 64
    train_views: int = 24
    test_views: int = 8
    ring_radius: float = 2.4
    ring_height: float = 1.9
    fov_deg: float = 52.0
    ground_half: float = 1.0
    ground_spacing: float = 0.042
    object_surface_points: int = 360
    checker_cells: float = 3.0
    checker_amp: float = 0.10
    noise_amp: float = 0.08
    object_size_scale: float = 1.0
    mask_noise_px: int = 0
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.object_count <= 5):
            raise GenerationError("object_count must be in [0, 5]")


@dataclass(frozen=True)
class PointCloud:
    positions: np.ndarray  # (N, 3)
    colors: np.ndarray     # (N, 3) in [0, 1]
    labels: np.ndarray     # (N,) int

    def __len__(self):
        return self.positions.shape[0]


@dataclass(frozen=True)
class TestState:
    transform: SceneTransform          # state 1 -> test configuration
    images: Tuple[np.ndarray, ...]     # oracle float renders, test cameras
    masks: Tuple[np.ndarray, ...]


@dataclass(frozen=True)
class DualSceneBundle:
    cameras: Tuple[Camera, ...]        # training ring
    test_cameras: Tuple[Camera, ...]
    observations_1: Tuple[Observation, ...]
    observations_2: Tuple[Observation, ...]
    points_1: PointCloud
    points_2: PointCloud
    t_12: SceneTransform
    test_state: TestState
    bounds: np.ndarray                 # (2, 3) axis-aligned scene box
    spec: SceneSpec


# ---------------------------------------------------------------------------
# procedural textures (pure functions of coordinates, so they travel with
# the object between states)
# ---------------------------------------------------------------------------

def _hash01(ix, iy, iz, seed: float):
    h = np.sin(ix * 127.1 + iy * 311.7 + iz * 74.7 + seed * 269.5) * 43758.5453123
    return h - np.floor(h)


def _smooth(t):
    return t * t * (3.0 - 2.0 * t)


def _value_noise(p: np.ndarray, seed: float) -> np.ndarray:
    """Trilinear value noise in [0, 1] on unit lattice; p is (..., 3)."""
    pi = np.floor(p)
    pf = _smooth(p - pi)
    ix, iy, iz = pi[..., 0], pi[..., 1], pi[..., 2]
    fx, fy, fz = pf[..., 0], pf[..., 1], pf[..., 2]
    out = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                corner = _hash01(ix + dx, iy + dy, iz + dz, seed)
                wx = fx if dx else 1.0 - fx
                wy = fy if dy else 1.0 - fy
                wz = fz if dz else 1.0 - fz
                out = out + corner * wx * wy * wz
    return out


def _checker(p: np.ndarray, cells: float) -> np.ndarray:
    q = np.floor(p * cells)
    return np.mod(q[..., 0] + q[..., 1] + q[..., 2], 2.0)


def _texture(points: np.ndarray, base_a: np.ndarray, base_b: np.ndarray,
             cells: float, checker_amp: float, noise_amp: float, seed: float) -> np.ndarray:
    """Albedo at 3D points: checker blend of two base colors plus value noise."""
    points = np.asarray(points, dtype=np.float64)
    ck = _checker(points, cells)[..., None]
    col = base_a * (1.0 - ck) + base_b * ck
    mix = checker_amp * (2.0 * ck - 1.0)
    noise = noise_amp * (2.0 * _value_noise(points * 4.0, seed)[..., None] - 1.0)
    return np.clip(col * (1.0 + mix) + noise, 0.0, 1.0)


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Shape:
    kind: str                 # "sphere" | "box"
    size: np.ndarray          # sphere: (r,,) broadcast; box: half extents (3,)
    base_a: np.ndarray
    base_b: np.ndarray
    tex_seed: float

    @property
    def rest_z(self) -> float:
        return float(self.size[2])

    @property
    def footprint_radius(self) -> float:
        if self.kind == "sphere":
            return float(self.size[0])
        return float(np.hypot(self.size[0], self.size[1]))

    def albedo(self, local_points: np.ndarray, spec: SceneSpec) -> np.ndarray:
        scale = 1.0 / max(float(self.size.max()), 1e-6)
        return _texture(local_points * scale, self.base_a, self.base_b,
                        2.0, spec.checker_amp, spec.noise_amp, self.tex_seed)

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "sphere":
            i = np.arange(n, dtype=np.float64)
            phi = np.arccos(1.0 - 2.0 * (i + 0.5) / n)
            theta = np.pi * (1.0 + 5 ** 0.5) * i
            r = float(self.size[0])
            return np.stack([r * np.sin(phi) * np.cos(theta),
                             r * np.sin(phi) * np.sin(theta),
                             r * np.cos(phi)], axis=1)
        per_face = max(int(np.sqrt(n / 6.0)), 2)
        h = self.size
        pts = []
        lin = np.linspace(-1.0, 1.0, per_face)
        uu, vv = np.meshgrid(lin, lin)
        uu, vv = uu.ravel(), vv.ravel()
        for axis in range(3):
            for sign in (-1.0, 1.0):
                p = np.zeros((uu.size, 3))
                p[:, axis] = sign * h[axis]
                other = [a for a in range(3) if a != axis]
                p[:, other[0]] = uu * h[other[0]]
                p[:, other[1]] = vv * h[other[1]]
                pts.append(p)
        return np.concatenate(pts)


@dataclass(frozen=True)
class _Pose:
    xy: np.ndarray
    yaw: float

    def center(self, shape: _Shape) -> np.ndarray:
        return np.array([self.xy[0], self.xy[1], shape.rest_z])

    def to_world(self, shape: _Shape, local: np.ndarray) -> np.ndarray:
        r = _yaw_matrix(self.yaw)
        return local @ r.T + self.center(shape)


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _pose_transform(shape: _Shape, a: _Pose, b: _Pose) -> RigidTransform:
    """Rigid world transform mapping the object from pose a to pose b."""
    r = _yaw_matrix(b.yaw - a.yaw)
    rot = quat_from_axis_angle((0, 0, 1), b.yaw - a.yaw)
    trans = b.center(shape) - r @ a.center(shape)
    return RigidTransform(rot, trans)


# ---------------------------------------------------------------------------
# analytic ray tracing
# ---------------------------------------------------------------------------

def _trace(cam: Camera, shapes: Sequence[_Shape], poses: Sequence[_Pose],
           spec: SceneSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Exact render of one view: (H, W, 3) albedo image and integer mask."""
    h, w = cam.height, cam.width
    origin = cam.position
    dirs = cam.pixel_rays()

    t_best = np.full((h, w), np.inf)
    mask = np.zeros((h, w), dtype=np.int64)
    rgb = np.zeros((h, w, 3))

    # ground plane z = 0, bounded square
    dz = dirs[..., 2]
    tg = np.where(np.abs(dz) > 1e-12, -origin[2] / dz, np.inf)
    gx = origin[0] + tg * dirs[..., 0]
    gy = origin[1] + tg * dirs[..., 1]
    ok = (tg > 1e-6) & (np.abs(gx) <= spec.ground_half) & (np.abs(gy) <= spec.ground_half)
    t_best[ok] = tg[ok]
    gpts = np.stack([gx, gy, np.zeros_like(gx)], axis=-1)
    ground_rgb = _texture(gpts, np.array([0.62, 0.57, 0.50]), np.array([0.45, 0.42, 0.38]),
                          spec.checker_cells, spec.checker_amp, spec.noise_amp, spec.seed * 0.137 + 3.1)
    rgb[ok] = ground_rgb[ok]

    for oid, (shape, pose) in enumerate(zip(shapes, poses), start=1):
        center = pose.center(shape)
        if shape.kind == "sphere":
            oc = origin - center
            b = np.einsum("hwk,k->hw", dirs, oc)
            c = oc @ oc - float(shape.size[0]) ** 2
            disc = b * b - c
            hit = disc >= 0.0
            t = -b - np.sqrt(np.where(hit, disc, 0.0))
            hit &= (t > 1e-6) & (t < t_best)
            if hit.any():
                pts = origin + t[..., None] * dirs
                local = (pts - center) @ _yaw_matrix(pose.yaw)
                rgb[hit] = shape.albedo(local[hit], spec)
                mask[hit] = oid
                t_best[hit] = t[hit]
        else:
            r = _yaw_matrix(pose.yaw)
            o_local = (origin - center) @ r
            d_local = dirs @ r
            half = shape.size
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / d_local
                t1 = (-half - o_local) * inv
                t2 = (half - o_local) * inv
            tmin = np.minimum(t1, t2).max(axis=-1)
            tmax = np.maximum(t1, t2).min(axis=-1)
            hit = (tmax >= tmin) & (tmax > 1e-6)
            t = np.where(tmin > 1e-6, tmin, tmax)
            hit &= (t > 1e-6) & (t < t_best)
            if hit.any():
                local = o_local + t[..., None] * d_local
                rgb[hit] = shape.albedo(local[hit], spec)
                mask[hit] = oid
                t_best[hit] = t[hit]

    return rgb, mask


# ---------------------------------------------------------------------------
# placement sampling and cameras
# ---------------------------------------------------------------------------

def _sample_poses(rng, shapes: Sequence[_Shape], spec: SceneSpec,
                  forbidden: Sequence[Tuple[np.ndarray, float]],
                  gap: float = 0.06, tries: int = 1000) -> List[_Pose]:
    """Uniform collision-free placements; ``forbidden`` disks must stay clear
    (used to guarantee complementary ground visibility across states)."""
    placed: List[Tuple[np.ndarray, float]] = []
    poses: List[_Pose] = []
    margin = 0.08
    for label, shape in enumerate(shapes, start=1):
        r = shape.footprint_radius
        lim = spec.ground_half - r - margin
        if lim <= 0:
            raise GenerationError(f"object {label} too large for the ground plane")
        accepted = None
        for _ in range(tries):
            xy = rng.uniform(-lim, lim, 2)
            blockers = list(placed) + list(forbidden)
            if any(np.hypot(*(xy - q)) < r + rq + gap for q, rq in blockers):
                continue
            accepted = xy
            break
        if accepted is None:
            raise GenerationError(f"could not place object {label} after {tries} tries")
        placed.append((accepted, r))
        poses.append(_Pose(xy=accepted, yaw=float(rng.uniform(0.0, 2.0 * np.pi))))
    return poses


def _ring_camera(theta: float, spec: SceneSpec) -> Camera:
    pos = np.array([spec.ring_radius * np.cos(theta),
                    spec.ring_radius * np.sin(theta),
                    spec.ring_height])
    target = np.array([0.0, 0.0, 0.05])
    forward = target - pos
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    r_cw = np.stack([right, down, forward])   # rows: camera axes in world
    t_cw = -r_cw @ pos
    size = spec.image_size
    f = 0.5 * size / np.tan(np.deg2rad(spec.fov_deg) / 2.0)
    c = (size - 1) / 2.0
    return Camera(fx=f, fy=f, cx=c, cy=c, width=size, height=size,
                  world_to_cam=RigidTransform(quat_from_matrix(r_cw), t_cw))


# ---------------------------------------------------------------------------
# mask-noise injection
# ---------------------------------------------------------------------------

def inject_mask_noise(mask: np.ndarray, amount_px: int, rng: np.random.Generator) -> np.ndarray:
    """Erode or dilate each object's mask boundary by 1..amount_px pixels.

    Reproduces segmenter-style boundary errors. Dilation only claims ground
    pixels; erosion returns boundary pixels to ground.
    """
    noisy = np.array(mask, copy=True)
    for oid in np.unique(mask):
        if oid == 0:
            continue
        amt = int(rng.integers(1, amount_px + 1))
        region = noisy == oid
        if rng.random() < 0.5:
            grown = ndimage.binary_dilation(region, iterations=amt)
            noisy[grown & (noisy == 0)] = oid
        else:
            kept = ndimage.binary_erosion(region, iterations=amt)
            noisy[region & ~kept] = 0
    return noisy


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------

def _ground_grid(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    sp = spec.ground_spacing
    axis = np.arange(-spec.ground_half + sp / 2.0, spec.ground_half, sp)
    xx, yy = np.meshgrid(axis, axis)
    pts = np.stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)], axis=1)
    pts[:, :2] += rng.uniform(-0.25, 0.25, (pts.shape[0], 2)) * sp
    return pts


def _state_cloud(shapes, poses, spec: SceneSpec, ground_pts: np.ndarray,
                 obj_samples: List[np.ndarray]) -> PointCloud:
    """Per-state point cloud: shared ground grid minus this state's object
    footprints, plus each object's surface samples at its state pose."""
    keep = np.ones(ground_pts.shape[0], dtype=bool)
    pad = 0.4 * spec.ground_spacing
    for shape, pose in zip(shapes, poses):
        if shape.kind == "sphere":
            keep &= np.hypot(*(ground_pts[:, :2] - pose.xy).T) > float(shape.size[0]) + pad
        else:
            local = (ground_pts[:, :2] - pose.xy) @ _yaw_matrix(pose.yaw)[:2, :2]
            inside = (np.abs(local[:, 0]) <= shape.size[0] + pad) & (np.abs(local[:, 1]) <= shape.size[1] + pad)
            keep &= ~inside
    g = ground_pts[keep]
    positions = [g]
    colors = [_texture(g, np.array([0.62, 0.57, 0.50]), np.array([0.45, 0.42, 0.38]),
                       spec.checker_cells, spec.checker_amp, spec.noise_amp, spec.seed * 0.137 + 3.1)]
    labels = [np.zeros(g.shape[0], dtype=np.int64)]
    for oid, (shape, pose, local) in enumerate(zip(shapes, poses, obj_samples), start=1):
        world = pose.to_world(shape, local)
        positions.append(world)
        colors.append(shape.albedo(local, spec))
        labels.append(np.full(local.shape[0], oid, dtype=np.int64))
    return PointCloud(positions=np.concatenate(positions),
                      colors=np.concatenate(colors),
                      labels=np.concatenate(labels))


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

_PALETTE = np.array([
    [0.82, 0.25, 0.20], [0.20, 0.45, 0.78], [0.88, 0.70, 0.18],
    [0.30, 0.65, 0.35], [0.60, 0.35, 0.70],
])


def _build_scene(spec: SceneSpec):
    """Deterministic shapes and the three object configurations of a spec."""
    rng = np.random.default_rng(spec.seed)
    shapes: List[_Shape] = []
    for o in range(spec.object_count):
        kind = "sphere" if o % 2 == 0 else "box"
        if kind == "sphere":
            r = rng.uniform(0.17, 0.24) * spec.object_size_scale
            size = np.array([r, r, r])
        else:
            size = np.array([rng.uniform(0.13, 0.19), rng.uniform(0.13, 0.19),
                             rng.uniform(0.10, 0.16)]) * spec.object_size_scale
        base = _PALETTE[o % len(_PALETTE)]
        shapes.append(_Shape(kind=kind, size=size, base_a=base,
                             base_b=np.clip(base * 0.55 + 0.25, 0, 1),
                             tex_seed=float(spec.seed * 17 + o * 5 + 1)))

    poses_1 = _sample_poses(rng, shapes, spec, forbidden=[])
    # complementary visibility: state-2 footprints avoid every state-1 footprint
    forbidden = [(p.xy, s.footprint_radius) for p, s in zip(poses_1, shapes)]
    poses_2 = _sample_poses(rng, shapes, spec, forbidden=forbidden)
    poses_t = _sample_poses(rng, shapes, spec, forbidden=[])
    return rng, shapes, poses_1, poses_2, poses_t


def generate(spec: SceneSpec) -> DualSceneBundle:
    """Build a dual-state bundle with oracle supervision; deterministic by seed."""
    rng, shapes, poses_1, poses_2, poses_t = _build_scene(spec)

    t_12 = SceneTransform({o + 1: _pose_transform(shapes[o], poses_1[o], poses_2[o])
                           for o in range(spec.object_count)})
    t_1t = SceneTransform({o + 1: _pose_transform(shapes[o], poses_1[o], poses_t[o])
                           for o in range(spec.object_count)})

    thetas = 2.0 * np.pi * np.arange(spec.train_views) / max(spec.train_views, 1)
    cameras = tuple(_ring_camera(t, spec) for t in thetas)
    test_thetas = 2.0 * np.pi * (np.arange(spec.test_views) + 0.37) / max(spec.test_views, 1)
    test_cameras = tuple(_ring_camera(t, spec) for t in test_thetas)

    noise_rng = np.random.default_rng([spec.seed, 7919])

    def _observe(poses) -> Tuple[Observation, ...]:
        obs = []
        for cam in cameras:
            img, m = _trace(cam, shapes, poses, spec)
            if spec.mask_noise_px > 0:
                m = inject_mask_noise(m, spec.mask_noise_px, noise_rng)
            obs.append(Observation(image=img, mask=m))
        return tuple(obs)

    observations_1 = _observe(poses_1)
    observations_2 = _observe(poses_2)

    test_images, test_masks = [], []
    for cam in test_cameras:
        img, m = _trace(cam, shapes, poses_t, spec)
        test_images.append(img)
        test_masks.append(m)

    ground_pts = _ground_grid(spec, rng)
    obj_samples = [s.sample_surface(spec.object_surface_points, rng) for s in shapes]
    points_1 = _state_cloud(shapes, poses_1, spec, ground_pts, obj_samples)
    points_2 = _state_cloud(shapes, poses_2, spec, ground_pts, obj_samples)

    zmax = max([0.1] + [2.0 * s.rest_z + 0.2 for s in shapes])
    bounds = np.array([[-spec.ground_half, -spec.ground_half, 0.0],
                       [spec.ground_half, spec.ground_half, zmax]])

    return DualSceneBundle(
        cameras=cameras, test_cameras=test_cameras,
        observations_1=observations_1, observations_2=observations_2,
        points_1=points_1, points_2=points_2,
        t_12=t_12,
        test_state=TestState(transform=t_1t, images=tuple(test_images), masks=tuple(test_masks)),
        bounds=bounds, spec=spec,
    )


def render_state(bundle: DualSceneBundle, t_1s: SceneTransform,
                 cameras: Optional[Sequence[Camera]] = None) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Oracle renders of an arbitrary state (given as transform from state 1)."""
    spec = bundle.spec
    _, shapes, poses_1, _, _ = _build_scene(spec)

    poses_s = []
    for o, (shape, pose) in enumerate(zip(shapes, poses_1), start=1):
        rt = t_1s.get(o)
        c = rt.apply_points(pose.center(shape)[None])[0]
        dyaw = 2.0 * np.arctan2(rt.rotation[3], rt.rotation[0])
        poses_s.append(_Pose(xy=c[:2], yaw=pose.yaw + dyaw))

    cams = list(cameras) if cameras is not None else list(bundle.test_cameras)
    images, masks = [], []
    for cam in cams:
        img, m = _trace(cam, shapes, poses_s, spec)
        images.append(img)
        masks.append(m)
    return images, masks
