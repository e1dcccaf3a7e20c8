import numpy as np
import pytest

from dualsplat.core import Camera, GaussianField, RigidTransform
from dualsplat.rasterizer import RasterSettings
from dualsplat.scenegen import SceneSpec, generate
from dualsplat.trainer import TrainConfig, train


def make_random_field(n=10, seed=0, object_count=1, depth_range=(2.5, 4.0),
                      opacity_range=(-1.5, 1.5)) -> GaussianField:
    """Generic random field in front of a +z-looking camera at the origin."""
    r = np.random.default_rng(seed)
    q = r.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianField(
        centers=np.c_[r.uniform(-0.5, 0.5, (n, 2)), r.uniform(*depth_range, n)],
        rotations=q,
        log_scales=r.uniform(np.log(0.03), np.log(0.12), (n, 3)),
        opacity_logits=r.uniform(*opacity_range, n),
        colors=r.uniform(0.1, 0.9, (n, 3)),
        identities=r.normal(0, 0.3, (n, 16)),
        object_labels=r.integers(0, object_count + 1, n),
        object_count=object_count,
    )


def desk_camera(size=32, f=40.0) -> Camera:
    return Camera(fx=f, fy=f, cx=(size - 1) / 2, cy=(size - 1) / 2,
                  width=size, height=size, world_to_cam=RigidTransform.identity())


def central_difference(loss_fn, field: GaussianField, name: str, idx, h=1e-4) -> float:
    arr = getattr(field, name)
    up = arr.copy()
    up[idx] += h
    down = arr.copy()
    down[idx] -= h
    return (loss_fn(field.with_arrays(**{name: up}))
            - loss_fn(field.with_arrays(**{name: down}))) / (2 * h)


GRAD_FIELD_NAMES = {
    "centers": "center", "rotations": "rotation", "log_scales": "log_scale",
    "opacity_logits": "opacity_logit", "colors": "color", "identities": "identity",
}


@pytest.fixture(scope="session")
def small_scene():
    """Tiny but complete dual-state scene used across module tests."""
    return generate(SceneSpec(object_count=1, image_size=48, train_views=10,
                              test_views=4, ground_spacing=0.07,
                              object_surface_points=200, seed=11))


@pytest.fixture(scope="session")
def small_trained(small_scene):
    """A short but real dual-state training run (shared; ~1 minute)."""
    cfg = TrainConfig(phase1_iters=120, phase2_iters=120, seed=5,
                      final_prune=False, final_paste=False)
    return small_scene, train(small_scene, cfg), cfg
