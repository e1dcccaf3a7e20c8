"""Two-phase dual-state optimization.

Phase 1 fits each field to its own observations independently; phase 2
jointly refines both fields with the cross-state alignment loss and a fresh
collision-free pseudo-state per iteration. Afterwards the fields are
co-pruned and cross-pasted. Fully deterministic given the config seed: view
sampling, identity init, classifier init, and pseudo-state sampling all run
on fixed RNG streams.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field as dc_field
from typing import Dict, IO, List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .core import GaussianField, InputError, quat_normalize
from .losses import (
    DEFAULT_LOSS_CONFIG,
    LossBreakdown,
    LossConfig,
    joint_loss,
    knn_graph,
    recon_loss,
)
from .rasterizer import RasterSettings, RenderGradients
from .scenegen import DualSceneBundle, PointCloud
from .segmentation import Classifier, ClassifierGradients
from .statetransfer import (
    DEFAULT_TAU,
    DEFAULT_TAU_PASTE,
    PlacementError,
    PruneReport,
    co_paste,
    co_prune,
    make_pseudo_state,
    remove_indices,
)
from .core import scene_inverse


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, message: str):
        super().__init__(message)
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    phase1_iters: int = 10_000
    phase2_iters: int = 10_000
    lr_center: float = 1.6e-4
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_logscale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_identity: float = 2.5e-3
    lr_classifier: float = 5e-4
    lambda_a: float = 1.0
    lambda_p: float = 1.0
    tau: float = DEFAULT_TAU
    tau_paste: float = DEFAULT_TAU_PASTE
    seed: int = 0
    desk_scale: float = 1.0           # multiplies both phase lengths for CI runs
    final_prune: bool = True
    final_paste: bool = True
    prune_every: int = 0              # >0: additionally co-prune during phase 2
    pseudo_every: int = 1             # apply the pseudo-state term every k-th phase-2 iteration
    checkpoint_every: int = 0
    fields: str = "both"              # "first": optimize field 1 only (ablations)
    raster_g_min: float = 0.01        # ~3-sigma footprint; plenty for training
    knn_refresh_every: int = 25       # identity-regularizer neighbor graph refresh
    loss: LossConfig = LossConfig(ce_float32=True, semantic_coverage_mask=True)

    def __post_init__(self):
        if self.phase1_iters < 0 or self.phase2_iters < 0:
            raise InputError("iteration counts must be >= 0")
        for name in ("lr_center", "lr_color", "lr_opacity", "lr_logscale",
                     "lr_rotation", "lr_identity", "lr_classifier"):
            if getattr(self, name) <= 0:
                raise InputError(f"{name} must be positive")

    def raster_settings(self) -> RasterSettings:
        return RasterSettings(g_min=self.raster_g_min, dtype="float32")


@dataclass
class AdamState:
    """First/second moment buffers per parameter group plus the step counter."""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def for_params(params: Dict[str, np.ndarray]) -> "AdamState":
        return AdamState(m={k: np.zeros_like(p) for k, p in params.items()},
                         v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: AdamState, lr: Dict[str, float]) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update over named parameter groups."""
    for key, p in params.items():
        if grads[key].shape != p.shape:
            raise InputError(f"gradient shape {grads[key].shape} != param shape {p.shape} for {key}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = {}
    for key, p in params.items():
        g = grads[key]
        state.m[key] = b1 * state.m[key] + (1 - b1) * g
        state.v[key] = b2 * state.v[key] + (1 - b2) * g * g
        m_hat = state.m[key] / (1 - b1 ** t)
        v_hat = state.v[key] / (1 - b2 ** t)
        out[key] = p - lr[key] * m_hat / (np.sqrt(v_hat) + state.eps)
    return out, state


def initialize_fields(bundle: DualSceneBundle, seed: int = 0) -> Tuple[GaussianField, GaussianField]:
    """One Gaussian per bundle point; scale from local point spacing."""
    rng = np.random.default_rng([seed, 101])

    def _one(cloud: PointCloud) -> GaussianField:
        n = len(cloud)
        if n == 0:
            raise InputError("empty point cloud")
        k = min(3, n - 1)
        if k == 0:
            mean_dist = np.full(n, 0.1)
        else:
            dist, _ = cKDTree(cloud.positions).query(cloud.positions, k=k + 1)
            mean_dist = np.maximum(dist[:, 1:].mean(axis=1), 1e-6)
        quats = np.zeros((n, 4))
        quats[:, 0] = 1.0
        return GaussianField(
            centers=cloud.positions.copy(),
            rotations=quats,
            log_scales=np.repeat(np.log(mean_dist)[:, None], 3, axis=1),
            opacity_logits=np.full(n, np.log(0.1 / 0.9)),
            colors=np.clip(cloud.colors, 0.0, 1.0),
            identities=rng.normal(0.0, 0.01, (n, 16)),
            object_labels=cloud.labels.astype(np.int64),
            object_count=int(cloud.labels.max(initial=0)),
        )

    return _one(bundle.points_1), _one(bundle.points_2)


@dataclass
class TrainResult:
    field1: GaussianField
    field2: GaussianField
    classifier: Classifier
    prune_report: Optional[PruneReport]
    history: List[LossBreakdown] = dc_field(default_factory=list)


def _field_params(field: GaussianField) -> Dict[str, np.ndarray]:
    return {
        "center": field.centers, "rotation": field.rotations, "log_scale": field.log_scales,
        "opacity_logit": field.opacity_logits, "color": field.colors, "identity": field.identities,
    }


def _params_to_field(params: Dict[str, np.ndarray], template: GaussianField) -> GaussianField:
    return template.with_arrays(
        centers=params["center"], rotations=quat_normalize(params["rotation"]),
        log_scales=params["log_scale"], opacity_logits=params["opacity_logit"],
        colors=np.clip(params["color"], 0.0, 1.0), identities=params["identity"],
    )


def _grads_to_dict(g: RenderGradients) -> Dict[str, np.ndarray]:
    return {"center": g.center, "rotation": g.rotation, "log_scale": g.log_scale,
            "opacity_logit": g.opacity_logit, "color": g.color, "identity": g.identity}


def train(bundle: DualSceneBundle, cfg: TrainConfig,
          out_dir: Optional[str] = None, log_stream: Optional[IO[str]] = None) -> TrainResult:
    """Run both phases and the final co-prune / co-paste refinement."""
    from . import io as dsio  # local import: io depends on core only

    field1, field2 = initialize_fields(bundle, seed=cfg.seed)
    clf = Classifier.initialize(seed=cfg.seed)
    settings = cfg.raster_settings()
    lrs = {"center": cfg.lr_center, "rotation": cfg.lr_rotation, "log_scale": cfg.lr_logscale,
           "opacity_logit": cfg.lr_opacity, "color": cfg.lr_color, "identity": cfg.lr_identity}

    adam1 = AdamState.for_params(_field_params(field1))
    adam2 = AdamState.for_params(_field_params(field2))
    adam_clf = AdamState.for_params({"weights": clf.weights, "bias": clf.bias})

    view_rng = np.random.default_rng([cfg.seed, 11])
    n_views = len(bundle.cameras)
    history: List[LossBreakdown] = []
    n1 = int(round(cfg.phase1_iters * cfg.desk_scale))
    n2 = int(round(cfg.phase2_iters * cfg.desk_scale))

    def _log(entry: dict):
        if log_stream is not None:
            log_stream.write(json.dumps(entry) + "\n")

    def _checkpoint(tag: str):
        if out_dir is not None:
            dsio.save_field(f"{out_dir}/field1_{tag}.dsgw", field1, clf, optimizer=adam1)
            dsio.save_field(f"{out_dir}/field2_{tag}.dsgw", field2, clf, optimizer=adam2)

    def _step_field(field, grads, adam):
        params, _ = adam_step(_field_params(field), _grads_to_dict(grads), adam, lrs)
        return _params_to_field(params, field)

    def _step_clf(clf_grads: ClassifierGradients):
        params, _ = adam_step({"weights": clf.weights, "bias": clf.bias},
                              {"weights": clf_grads.weights, "bias": clf_grads.bias},
                              adam_clf, {"weights": cfg.lr_classifier, "bias": cfg.lr_classifier})
        return Classifier(params["weights"], params["bias"])

    dual = cfg.fields != "first"
    knn1 = knn2 = None

    def _refresh_knn(it: int):
        nonlocal knn1, knn2
        if cfg.loss.lambda_knn == 0.0:
            return
        if knn1 is None or (cfg.knn_refresh_every and it % cfg.knn_refresh_every == 0):
            knn1 = knn_graph(field1.centers, cfg.loss.knn_neighbors)
            if dual:
                knn2 = knn_graph(field2.centers, cfg.loss.knn_neighbors)

    def _recon_iteration(it: int, phase: int):
        nonlocal field1, field2, clf
        t0 = time.perf_counter()
        v = int(view_rng.integers(n_views))
        cam = bundle.cameras[v]
        _refresh_knn(it)
        r1, g1, c1 = recon_loss(field1, clf, bundle.observations_1[v], cam, cfg.loss, settings, knn1)
        r2 = 0.0
        if dual:
            r2, g2, c2 = recon_loss(field2, clf, bundle.observations_2[v], cam, cfg.loss, settings, knn2)
        if not np.isfinite(r1 + r2):
            raise DivergenceError(it, f"non-finite reconstruction loss at iteration {it}")
        field1 = _step_field(field1, g1, adam1)
        if dual:
            field2 = _step_field(field2, g2, adam2)
            c1.add_(c2)
        clf = _step_clf(c1)
        bd = LossBreakdown(recon_1=r1, recon_2=r2, align_photo=0.0, align_sem=0.0,
                           pseudo_photo=0.0, pseudo_sem=0.0, total=r1 + r2,
                           lambda_a=0.0, lambda_p=0.0)
        history.append(bd)
        _log({"iter": it, "phase": phase, **bd.to_json(),
              "wall_ms": 1000.0 * (time.perf_counter() - t0)})

    for it in range(n1):
        _recon_iteration(it, phase=1)
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            _checkpoint(f"p1_{it + 1:06d}")

    recon_only_phase2 = (cfg.lambda_a == 0.0 and cfg.lambda_p == 0.0) or not dual
    for it in range(n2):
        if recon_only_phase2:
            _recon_iteration(n1 + it, phase=2)
            if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                _checkpoint(f"p2_{it + 1:06d}")
            continue
        t0 = time.perf_counter()
        v = int(view_rng.integers(n_views))
        cam = bundle.cameras[v]
        _refresh_knn(n1 + it)
        pseudo = None
        use_pseudo = cfg.lambda_p != 0.0 and (cfg.pseudo_every <= 1 or it % cfg.pseudo_every == 0)
        if use_pseudo:
            last_err = None
            for attempt in range(10):
                try:
                    pseudo = make_pseudo_state(field1, bundle.t_12, bundle.bounds,
                                               seed=it if attempt == 0 else it + attempt * 1_000_003)
                    break
                except PlacementError as err:
                    last_err = err
            if pseudo is None:
                raise last_err
        breakdown, g1, g2, cg = joint_loss(
            field1, field2, clf, bundle.t_12,
            bundle.observations_1[v], bundle.observations_2[v], cam, pseudo,
            lambda_a=cfg.lambda_a, lambda_p=cfg.lambda_p, cfg=cfg.loss, settings=settings,
            knn_neighbors_1=knn1, knn_neighbors_2=knn2)
        if not np.isfinite(breakdown.total):
            raise DivergenceError(n1 + it, f"non-finite joint loss at phase-2 iteration {it}")
        field1 = _step_field(field1, g1, adam1)
        field2 = _step_field(field2, g2, adam2)
        clf = _step_clf(cg)

        if cfg.prune_every and (it + 1) % cfg.prune_every == 0:
            report = co_prune(field1, field2, bundle.t_12, cfg.tau)
            field1, adam1 = _drop_rows(field1, adam1, report.removed_from_1)
            field2, adam2 = _drop_rows(field2, adam2, report.removed_from_2)
            knn1 = knn2 = None

        history.append(breakdown)
        _log({"iter": n1 + it, "phase": 2, **breakdown.to_json(),
              "wall_ms": 1000.0 * (time.perf_counter() - t0)})
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            _checkpoint(f"p2_{it + 1:06d}")

    report = None
    if cfg.final_prune:
        report = co_prune(field1, field2, bundle.t_12, cfg.tau)
        field1 = remove_indices(field1, report.removed_from_1)
        field2 = remove_indices(field2, report.removed_from_2)
    if cfg.final_paste:
        pasted1 = co_paste(field2, field1, scene_inverse(bundle.t_12), cfg.tau_paste)
        pasted2 = co_paste(field1, field2, bundle.t_12, cfg.tau_paste)
        field1, field2 = pasted1, pasted2

    return TrainResult(field1=field1, field2=field2, classifier=clf,
                       prune_report=report, history=history)


def _drop_rows(field: GaussianField, adam: AdamState, removed) -> Tuple[GaussianField, AdamState]:
    """Remove primitives mid-training, keeping optimizer moments aligned."""
    keep = np.ones(len(field), dtype=bool)
    idx = np.asarray(list(removed), dtype=np.int64)
    if idx.size:
        keep[idx] = False
    new_field = field.select(keep)
    adam.m = {k: (v[keep] if v.shape[:1] == keep.shape else v) for k, v in adam.m.items()}
    adam.v = {k: (v[keep] if v.shape[:1] == keep.shape else v) for k, v in adam.v.items()}
    return new_field, adam
