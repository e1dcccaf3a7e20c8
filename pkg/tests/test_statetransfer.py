import numpy as np
import pytest

from dualsplat.core import (
    GaussianField,
    RigidTransform,
    SceneTransform,
    apply_scene_transform,
    compose,
    invert,
    quat_from_axis_angle,
    scene_compose,
    scene_inverse,
)
from dualsplat.metrics import psnr
from dualsplat.rasterizer import render
from dualsplat.statetransfer import (
    PlacementError,
    co_paste,
    co_prune,
    make_pseudo_state,
    remove_indices,
    synthesize_target,
)

from conftest import make_random_field


def _grid_background(nx=20, ny=20, spacing=0.05, hole_center=None, hole_radius=0.0, seed=0):
    """Flat ground-plane field, optionally with a disk of points removed."""
    xs = (np.arange(nx) - nx / 2) * spacing
    ys = (np.arange(ny) - ny / 2) * spacing
    xx, yy = np.meshgrid(xs, ys)
    pts = np.stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)], axis=1)
    if hole_radius > 0:
        keep = np.hypot(pts[:, 0] - hole_center[0], pts[:, 1] - hole_center[1]) > hole_radius
        pts = pts[keep]
    n = pts.shape[0]
    rng = np.random.default_rng(seed)
    quats = np.zeros((n, 4)); quats[:, 0] = 1.0
    return GaussianField(
        centers=pts, rotations=quats,
        log_scales=np.full((n, 3), np.log(spacing)),
        opacity_logits=np.zeros(n), colors=rng.uniform(0.2, 0.8, (n, 3)),
        identities=rng.normal(0, 0.01, (n, 16)),
        object_labels=np.zeros(n, dtype=np.int64), object_count=0,
    )


def _with_object(base: GaussianField, center, n=40, radius=0.08, label=1, seed=3):
    rng = np.random.default_rng(seed)
    pts = center + radius * rng.normal(size=(n, 3)) / 3.0
    quats = np.zeros((n, 4)); quats[:, 0] = 1.0
    obj = GaussianField(
        centers=pts, rotations=quats, log_scales=np.full((n, 3), np.log(0.02)),
        opacity_logits=np.zeros(n), colors=rng.uniform(0.2, 0.8, (n, 3)),
        identities=rng.normal(0, 0.01, (n, 16)),
        object_labels=np.full(n, label, dtype=np.int64), object_count=label,
    )
    from dualsplat.core import concatenate_fields
    merged = concatenate_fields(base, obj)
    return merged.with_arrays(object_labels=merged.object_labels), merged


class TestPseudoState:
    def _field(self):
        base = _grid_background()
        field, _ = _with_object(base, np.array([0.2, 0.1, 0.05]))
        return field

    def test_single_object_valid_pose_and_invariant(self):
        field = self._field()
        t_12 = SceneTransform({1: RigidTransform(quat_from_axis_angle((0, 0, 1), 0.4), (0.1, -0.2, 0))})
        bounds = np.array([[-2.0, -2.0, 0.0], [2.0, 2.0, 1.0]])
        ps = make_pseudo_state(field, t_12, bounds, seed=12)
        for o in [1]:
            recovered = compose(invert(ps.t_2p.get(o)), ps.t_1p.get(o))
            want = t_12.get(o)
            pts = np.random.default_rng(0).uniform(-1, 1, (10, 3))
            assert np.abs(recovered.apply_points(pts) - want.apply_points(pts)).max() < 1e-6

    def test_infeasible_placement_errors_with_label(self):
        field = self._field()
        bounds = np.array([[-0.1, -0.1, 0.0], [0.1, 0.1, 1.0]])
        with pytest.raises(PlacementError) as err:
            make_pseudo_state(field, SceneTransform({}), bounds, seed=0, max_tries=50)
        assert err.value.label == 1

    def test_deterministic_given_seed(self):
        field = self._field()
        t_12 = SceneTransform({1: RigidTransform((1, 0, 0, 0), (0.2, 0, 0))})
        bounds = np.array([[-2.0, -2.0, 0.0], [2.0, 2.0, 1.0]])
        a = make_pseudo_state(field, t_12, bounds, seed=7)
        b = make_pseudo_state(field, t_12, bounds, seed=7)
        for o in [1]:
            assert np.array_equal(a.t_1p.get(o).rotation, b.t_1p.get(o).rotation)
            assert np.array_equal(a.t_1p.get(o).translation, b.t_1p.get(o).translation)


def brute_force_prune(field1, field2, t_12, tau):
    """O(n^2) nearest-neighbor oracle for co_prune."""
    def direction(src, dst, t):
        moved = apply_scene_transform(src, t)
        removed = []
        for i in range(len(moved)):
            d = np.sqrt(((dst.centers - moved.centers[i]) ** 2).sum(axis=1)).min()
            if d > tau:
                removed.append(i)
        return tuple(removed)
    return (direction(field1, field2, t_12),
            direction(field2, field1, scene_inverse(t_12)))


class TestCoPrune:
    def test_exact_transfer_removes_nothing(self):
        field1 = make_random_field(60, seed=1, object_count=2)
        t = SceneTransform({1: RigidTransform(quat_from_axis_angle((0, 0, 1), 0.3), (0.2, 0, 0)),
                            2: RigidTransform((1, 0, 0, 0), (0, 0.3, 0))})
        field2 = apply_scene_transform(field1, t)
        report = co_prune(field1, field2, t, tau=0.5)
        assert report.removed_from_1 == () and report.removed_from_2 == ()

    def test_identity_self_prune_removes_nothing(self):
        for seed in range(5):
            f = make_random_field(50, seed=seed, object_count=1)
            report = co_prune(f, f, SceneTransform({}), tau=0.3)
            assert report.removed_from_1 == () and report.removed_from_2 == ()

    def test_single_stray_detected(self):
        base = _grid_background()
        stray = GaussianField.from_primitives(
            [base.primitive(0)], object_count=0).with_arrays(
            centers=np.array([[3.0, 3.0, 0.0]]))
        from dualsplat.core import concatenate_fields
        field1 = concatenate_fields(base, stray)
        report = co_prune(field1, base, SceneTransform({}), tau=0.5)
        assert report.removed_from_1 == (len(field1) - 1,)
        assert report.removed_from_2 == ()

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_brute_force_oracle(self, seed):
        rng = np.random.default_rng(seed)
        f1 = make_random_field(200, seed=seed, object_count=2)
        f2 = make_random_field(200, seed=seed + 100, object_count=2)
        q = rng.normal(size=4)
        t = SceneTransform({1: RigidTransform(q / np.linalg.norm(q), rng.uniform(-0.1, 0.1, 3)),
                            2: RigidTransform((1, 0, 0, 0), rng.uniform(-0.1, 0.1, 3))})
        tau = 0.15
        report = co_prune(f1, f2, t, tau)
        oracle = brute_force_prune(f1, f2, t, tau)
        assert report.removed_from_1 == oracle[0]
        assert report.removed_from_2 == oracle[1]

    def test_monotone_in_tau(self):
        f1 = make_random_field(100, seed=5, object_count=1)
        f2 = make_random_field(100, seed=6, object_count=1)
        t = SceneTransform({})
        prev = None
        for tau in (0.05, 0.1, 0.2, 0.4, 0.8):
            rm = set(co_prune(f1, f2, t, tau).removed_from_1)
            if prev is not None:
                assert rm <= prev
            prev = rm

    def test_empty_field(self):
        f = make_random_field(10, seed=7)
        empty = GaussianField.from_primitives([])
        report = co_prune(empty, f, SceneTransform({}), tau=0.5)
        assert report.removed_from_1 == ()

    def test_invalid_tau(self):
        f = make_random_field(5, seed=8)
        with pytest.raises(ValueError):
            co_prune(f, f, SceneTransform({}), tau=0.0)


class TestCoPaste:
    def test_identical_backgrounds_paste_nothing(self):
        base = _grid_background()
        field1, _ = _with_object(base, np.array([0.2, 0.1, 0.05]))
        out = co_paste(base, field1, SceneTransform({}))
        assert len(out) == len(field1)

    def test_fills_hole_matching_containment_oracle(self):
        hole_center = np.array([0.2, 0.1])
        dst_bg = _grid_background(hole_center=hole_center, hole_radius=0.12)
        dst, _ = _with_object(dst_bg, np.array([0.2, 0.1, 0.05]), radius=0.1)
        src = _grid_background()  # full coverage
        tau_paste = 0.02
        out = co_paste(src, dst, SceneTransform({}), tau_paste=tau_paste)

        # oracle: independent 2/98-percentile 3-sigma xy box + brute-force NN
        fg = dst.object_labels == 1
        sig = np.exp(dst.log_scales[fg])  # identity rotations in this fixture
        lo = np.percentile(dst.centers[fg] - 3 * sig, 2, axis=0)
        hi = np.percentile(dst.centers[fg] + 3 * sig, 98, axis=0)
        box = np.stack([lo, hi])
        dst_bg_centers = dst.centers[dst.background_mask]
        expected = 0
        for c in src.centers[src.background_mask]:
            inside = box[0][0] <= c[0] <= box[1][0] and box[0][1] <= c[1] <= box[1][1]
            if not inside:
                continue
            d = np.sqrt(((dst_bg_centers - c) ** 2).sum(axis=1)).min()
            if d > tau_paste:
                expected += 1
        assert len(out) - len(dst) == expected
        assert expected > 0
        assert set(out.object_labels[len(dst):]) == {0}

    def test_empty_src_background(self):
        base = _grid_background()
        dst, _ = _with_object(base, np.array([0.0, 0.0, 0.05]))
        src_fg_only = dst.select(dst.foreground_mask)
        out = co_paste(src_fg_only, dst, SceneTransform({}))
        assert len(out) == len(dst)

    def test_idempotent(self):
        dst_bg = _grid_background(hole_center=np.array([0.2, 0.1]), hole_radius=0.12)
        dst, _ = _with_object(dst_bg, np.array([0.2, 0.1, 0.05]), radius=0.1)
        src = _grid_background()
        once = co_paste(src, dst, SceneTransform({}))
        twice = co_paste(src, once, SceneTransform({}))
        assert len(twice) == len(once)


class TestSynthesizeTarget:
    def test_deterministic(self, small_trained):
        bundle, result, _ = small_trained
        t_1t = bundle.test_state.transform
        a = synthesize_target(result.field1, result.field2, bundle.t_12, t_1t)
        b = synthesize_target(result.field1, result.field2, bundle.t_12, t_1t)
        assert np.array_equal(a.centers, b.centers)
        assert np.array_equal(a.colors, b.colors)

    def test_identity_target_keeps_state1_quality(self, small_trained):
        bundle, result, cfg = small_trained
        settings = cfg.raster_settings()
        target = synthesize_target(result.field1, result.field2, bundle.t_12, SceneTransform({}))
        pre, post = [], []
        for cam, obs in zip(bundle.cameras[:4], bundle.observations_1[:4]):
            pre.append(psnr(np.clip(render(result.field1, cam, settings).color_image, 0, 1), obs.image))
            post.append(psnr(np.clip(render(target, cam, settings).color_image, 0, 1), obs.image))
        assert np.mean(post) >= np.mean(pre) - 0.1

    def test_t12_target_matches_field2_renders(self, small_trained):
        bundle, result, cfg = small_trained
        settings = cfg.raster_settings()
        target = synthesize_target(result.field1, result.field2, bundle.t_12, bundle.t_12)
        gaps = []
        for cam, obs in zip(bundle.cameras[:4], bundle.observations_2[:4]):
            p_t = psnr(np.clip(render(target, cam, settings).color_image, 0, 1), obs.image)
            p_2 = psnr(np.clip(render(result.field2, cam, settings).color_image, 0, 1), obs.image)
            gaps.append(abs(p_t - p_2))
        assert np.mean(gaps) <= 0.5

    def test_pseudo_frame_agreement_exact_copies(self):
        base = _grid_background()
        field1, _ = _with_object(base, np.array([0.15, 0.0, 0.05]))
        t_12 = SceneTransform({1: RigidTransform(quat_from_axis_angle((0, 0, 1), 0.7), (0.2, -0.1, 0))})
        field2 = apply_scene_transform(field1, t_12)
        bounds = np.array([[-1.0, -1.0, 0.0], [1.0, 1.0, 0.5]])
        ps = make_pseudo_state(field1, t_12, bounds, seed=3)
        moved1 = apply_scene_transform(field1, ps.t_1p)
        moved2 = apply_scene_transform(field2, ps.t_2p)
        from conftest import desk_camera
        cam = desk_camera(size=48, f=30.0)
        # look from above: shift the whole scene into view along +z
        lift = SceneTransform({})
        m1 = moved1.with_arrays(centers=moved1.centers + np.array([0, 0, 3.0]))
        m2 = moved2.with_arrays(centers=moved2.centers + np.array([0, 0, 3.0]))
        r1, r2 = render(m1, cam), render(m2, cam)
        s1 = r1.alpha_image > 0.5
        s2 = r2.alpha_image > 0.5
        iou = (s1 & s2).sum() / max((s1 | s2).sum(), 1)
        assert iou == 1.0
        assert np.abs(r1.color_image - r2.color_image).max() < 1e-9
