"""Training losses: per-state reconstruction, bidirectional cross-state
alignment, pseudo-state consistency, and their weighted combination.

Every loss returns its value together with exact analytic gradients for the
field parameters (and the shared classifier where segmentation terms are
involved); gradients through cross-state transfers are pulled back to the
original field parameters, so transfer never detaches the graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .core import (
    Camera,
    GaussianField,
    InputError,
    Observation,
    SceneTransform,
    apply_scene_transform,
    scene_inverse,
    scene_transform_pullback,
)
from .metrics import ssim_and_grad
from .rasterizer import (
    DEFAULT_SETTINGS,
    RasterSettings,
    RenderGradients,
    render,
    render_backward,
)
from .segmentation import (
    Classifier,
    ClassifierGradients,
    classify,
    classify_backward,
    cross_entropy_hard,
    cross_entropy_soft,
)
from .statetransfer import PseudoState


@dataclass(frozen=True)
class LossConfig:
    """Reconstruction recipe weights (L1 + D-SSIM + identity CE + kNN identity
    regularizer over 5 spatial neighbors) and the soft-CE symmetrization flag.

    ce_float32 runs the classification stack in single precision; training
    uses it for speed, exactness tests leave it off.
    """

    lambda_ssim: float = 0.2
    lambda_id: float = 1.0
    lambda_knn: float = 1.0
    knn_neighbors: int = 5
    symmetric_soft_ce: bool = True
    soft_ce_temperature: float = 1.0
    pseudo_semantic_weight: float = 1.0
    ce_float32: bool = False
    semantic_coverage_mask: bool = False  # restrict hard CE to observed coverage

    def _feat(self, feature_image: np.ndarray) -> np.ndarray:
        return feature_image.astype(np.float32) if self.ce_float32 else feature_image

    def _valid(self, obs_image: np.ndarray) -> Optional[np.ndarray]:
        if not self.semantic_coverage_mask:
            return None
        return obs_image.sum(axis=-1) > 0


DEFAULT_LOSS_CONFIG = LossConfig()


@dataclass
class LossBreakdown:
    recon_1: float
    recon_2: float
    align_photo: float
    align_sem: float
    pseudo_photo: float
    pseudo_sem: float
    total: float
    lambda_a: float
    lambda_p: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


def l1_and_grad(render_img: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean absolute difference and its gradient w.r.t. the render."""
    render_img = np.asarray(render_img, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if render_img.shape != target.shape:
        raise InputError(f"render {render_img.shape} vs target {target.shape}")
    diff = render_img - target
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def knn_graph(centers: np.ndarray, k: int = 5) -> np.ndarray:
    """(N, k) indices of each center's k nearest neighbors (self excluded)."""
    n = centers.shape[0]
    k = min(k, n - 1)
    _, nn = cKDTree(centers).query(centers, k=k + 1)
    return nn[:, 1:]


def knn_identity_regularizer(field: GaussianField, k: int = 5,
                             neighbors: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    """Mean squared identity difference to the k nearest spatial neighbors.

    Encourages identity embeddings to vary smoothly in space. The neighbor
    graph is a function of the (piecewise-constant) center geometry, so the
    gradient only flows into the identity embeddings; a precomputed graph
    may be passed to amortize the spatial queries across iterations.
    """
    n = len(field)
    if n <= 1:
        return 0.0, np.zeros_like(field.identities)
    nn = neighbors if neighbors is not None else knn_graph(field.centers, k)
    n_pairs = nn.size
    diff = field.identities[:, None, :] - field.identities[nn]   # (N, k, 16)
    value = float((diff ** 2).sum() / n_pairs)
    grad = 2.0 * diff.sum(axis=1) / n_pairs
    flat = nn.ravel()
    contrib = 2.0 * diff.reshape(-1, diff.shape[-1]) / n_pairs
    for c in range(contrib.shape[1]):
        grad[:, c] -= np.bincount(flat, weights=contrib[:, c], minlength=n)
    return value, grad


def _photometric_grad(color_image: np.ndarray, target: np.ndarray,
                      lambda_ssim: float) -> Tuple[float, np.ndarray]:
    """(1-lam) L1 + lam (1 - SSIM) with gradient on the rendered image."""
    l1, g_l1 = l1_and_grad(color_image, target)
    if lambda_ssim == 0.0:
        return l1, g_l1
    s, g_s = ssim_and_grad(color_image, target)
    value = (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - s)
    return value, (1.0 - lambda_ssim) * g_l1 - lambda_ssim * g_s


def recon_loss(field: GaussianField, clf: Classifier, obs: Observation, cam: Camera,
               cfg: LossConfig = DEFAULT_LOSS_CONFIG,
               settings: RasterSettings = DEFAULT_SETTINGS,
               knn_neighbors: Optional[np.ndarray] = None,
               ) -> Tuple[float, RenderGradients, ClassifierGradients]:
    """Single-state reconstruction objective for one view."""
    if obs.image.shape[:2] != (cam.height, cam.width):
        raise InputError(f"observation {obs.image.shape[:2]} does not match camera "
                         f"{(cam.height, cam.width)}")
    out = render(field, cam, settings)
    value, grad_color = _photometric_grad(out.color_image, obs.image, cfg.lambda_ssim)

    grad_feature = np.zeros_like(out.feature_image)
    clf_grads = ClassifierGradients.zeros()
    if cfg.lambda_id != 0.0:
        feat = cfg._feat(out.feature_image)
        logits = classify(feat, clf)
        ce, grad_logits = cross_entropy_hard(logits, obs.mask, cfg._valid(obs.image))
        value += cfg.lambda_id * ce
        grad_feature, clf_grads = classify_backward(feat, clf, grad_logits)
        grad_feature = cfg.lambda_id * grad_feature
        clf_grads.weights *= cfg.lambda_id
        clf_grads.bias *= cfg.lambda_id

    grads = render_backward(field, cam, grad_color, grad_feature, out)

    if cfg.lambda_knn != 0.0:
        reg, grad_identity = knn_identity_regularizer(field, cfg.knn_neighbors, knn_neighbors)
        value += cfg.lambda_knn * reg
        grads.identity += cfg.lambda_knn * grad_identity
    return float(value), grads, clf_grads


def _transferred_supervision(field: GaussianField, t: SceneTransform, clf: Classifier,
                             image: np.ndarray, mask: np.ndarray, cam: Camera,
                             settings: RasterSettings, cfg: LossConfig,
                             ) -> Tuple[float, float, RenderGradients, ClassifierGradients]:
    """Render the transferred field against the other state's ground truth;
    gradients are pulled back through the transform."""
    moved = apply_scene_transform(field, t)
    out = render(moved, cam, settings)
    photo, grad_color = l1_and_grad(out.color_image, image)

    feat = cfg._feat(out.feature_image)
    logits = classify(feat, clf)
    sem, grad_logits = cross_entropy_hard(logits, mask, cfg._valid(image))
    grad_feature, clf_grads = classify_backward(feat, clf, grad_logits)

    grads = render_backward(moved, cam, grad_color, grad_feature, out)
    grads.center, grads.rotation = scene_transform_pullback(
        t, field.object_labels, grads.center, grads.rotation)
    return photo, sem, grads, clf_grads


def align_loss(field1: GaussianField, field2: GaussianField, clf: Classifier,
               t_12: SceneTransform, obs1: Observation, obs2: Observation, cam: Camera,
               settings: RasterSettings = DEFAULT_SETTINGS,
               cfg: LossConfig = DEFAULT_LOSS_CONFIG,
               ) -> Tuple[float, float, RenderGradients, RenderGradients, ClassifierGradients]:
    """Bidirectional alignment: each field, transferred into the other state,
    must reproduce that state's image and mask. Returns (photo, sem, grads...)."""
    p1, s1, g1, c1 = _transferred_supervision(field1, t_12, clf, obs2.image, obs2.mask,
                                              cam, settings, cfg)
    p2, s2, g2, c2 = _transferred_supervision(field2, scene_inverse(t_12), clf,
                                              obs1.image, obs1.mask, cam, settings, cfg)
    return p1 + p2, s1 + s2, g1, g2, c1.add_(c2)


def pseudo_loss(field1: GaussianField, field2: GaussianField, clf: Classifier,
                pseudo: PseudoState, cam: Camera,
                settings: RasterSettings = DEFAULT_SETTINGS,
                cfg: LossConfig = DEFAULT_LOSS_CONFIG,
                ) -> Tuple[float, float, RenderGradients, RenderGradients, ClassifierGradients]:
    """Photometric + semantic agreement of the two fields in a shared virtual
    state; no ground truth involved, both branches receive gradients."""
    moved1 = apply_scene_transform(field1, pseudo.t_1p)
    moved2 = apply_scene_transform(field2, pseudo.t_2p)
    out1 = render(moved1, cam, settings)
    out2 = render(moved2, cam, settings)

    diff = out1.color_image - out2.color_image
    photo = float(np.abs(diff).mean())
    grad_c1 = np.sign(diff) / diff.size
    grad_c2 = -grad_c1

    feat1 = cfg._feat(out1.feature_image)
    feat2 = cfg._feat(out2.feature_image)
    logits1 = classify(feat1, clf)
    logits2 = classify(feat2, clf)
    sem, grad_l1, grad_l2 = cross_entropy_soft(logits1, logits2, symmetric=cfg.symmetric_soft_ce,
                                               temperature=cfg.soft_ce_temperature)
    w_sem = cfg.pseudo_semantic_weight
    sem = w_sem * sem
    grad_f1, clf_g1 = classify_backward(feat1, clf, w_sem * grad_l1)
    grad_f2, clf_g2 = classify_backward(feat2, clf, w_sem * grad_l2)

    g1 = render_backward(moved1, cam, grad_c1, grad_f1, out1)
    g2 = render_backward(moved2, cam, grad_c2, grad_f2, out2)
    g1.center, g1.rotation = scene_transform_pullback(pseudo.t_1p, field1.object_labels,
                                                      g1.center, g1.rotation)
    g2.center, g2.rotation = scene_transform_pullback(pseudo.t_2p, field2.object_labels,
                                                      g2.center, g2.rotation)
    return photo, sem, g1, g2, clf_g1.add_(clf_g2)


def joint_loss(field1: GaussianField, field2: GaussianField, clf: Classifier,
               t_12: SceneTransform, obs1: Observation, obs2: Observation,
               cam: Camera, pseudo: Optional[PseudoState] = None,
               lambda_a: float = 1.0, lambda_p: float = 1.0,
               cfg: LossConfig = DEFAULT_LOSS_CONFIG,
               settings: RasterSettings = DEFAULT_SETTINGS,
               knn_neighbors_1: Optional[np.ndarray] = None,
               knn_neighbors_2: Optional[np.ndarray] = None,
               ) -> Tuple[LossBreakdown, RenderGradients, RenderGradients, ClassifierGradients]:
    """Full objective for one sampled view: recon of both states plus the
    weighted alignment and pseudo-state terms."""
    r1, g1, c1 = recon_loss(field1, clf, obs1, cam, cfg, settings, knn_neighbors_1)
    r2, g2, c2 = recon_loss(field2, clf, obs2, cam, cfg, settings, knn_neighbors_2)
    clf_grads = c1.add_(c2)

    align_photo = align_sem = 0.0
    if lambda_a != 0.0:
        align_photo, align_sem, ga1, ga2, ca = align_loss(
            field1, field2, clf, t_12, obs1, obs2, cam, settings, cfg)
        g1.add_(ga1, lambda_a)
        g2.add_(ga2, lambda_a)
        clf_grads.add_(ca, lambda_a)

    pseudo_photo = pseudo_sem = 0.0
    if lambda_p != 0.0 and pseudo is not None:
        pseudo_photo, pseudo_sem, gp1, gp2, cp = pseudo_loss(
            field1, field2, clf, pseudo, cam, settings, cfg)
        g1.add_(gp1, lambda_p)
        g2.add_(gp2, lambda_p)
        clf_grads.add_(cp, lambda_p)

    total = (r1 + r2 + lambda_a * (align_photo + align_sem)
             + lambda_p * (pseudo_photo + pseudo_sem))
    breakdown = LossBreakdown(
        recon_1=r1, recon_2=r2, align_photo=align_photo, align_sem=align_sem,
        pseudo_photo=pseudo_photo, pseudo_sem=pseudo_sem, total=float(total),
        lambda_a=lambda_a, lambda_p=lambda_p,
    )
    return breakdown, g1, g2, clf_grads
