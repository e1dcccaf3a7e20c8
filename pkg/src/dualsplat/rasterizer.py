"""Depth-sorted alpha-compositing splat renderer with analytic gradients.

Forward: each Gaussian is projected to the image plane with the standard
perspective-affine Jacobian approximation, then composited front-to-back
per pixel:

    C(p) = sum_i c_i a'_i prod_{j<i} (1 - a'_j),   a'_i = a_i exp(-0.5 d' S2d^-1 d)

The 16-channel identity features are composited with the same weights.

Backward: ``render_backward`` returns exact partials of a scalar loss with
respect to every Gaussian parameter given upstream gradients on the color
and feature images. The contributor set is truncated where the Gaussian
falloff drops below ``g_min`` (instead of a hard 3-sigma window) so the
rendered image is continuous in the parameters down to that magnitude;
this keeps finite-difference checks meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional, Tuple

import numpy as np
from scipy import sparse

from .core import (
    Camera,
    GaussianField,
    GaussianPrimitive,
    InputError,
    quat_to_matrix,
)

_EPS = 1e-12


class StaleRenderError(RuntimeError):
    """The field passed to render_backward differs from the one rendered."""


@dataclass(frozen=True)
class RasterSettings:
    """Numerical knobs of the splatter.

    g_min: Gaussian falloff below which a pixel is not composited. The
        default keeps truncation jumps below finite-difference noise; a
        training configuration may raise it (0.011 ~ the classic 3-sigma
        window) for speed.
    t_min: transmittance early-stop threshold.
    alpha_max: projected opacity clamp, keeps logits finite.
    cov_reg: additive 2D covariance regularization in px^2.
    near_plane: camera-z culling plane in world units.
    """

    g_min: float = 1e-12
    t_min: float = 1e-4
    alpha_max: float = 0.999
    cov_reg: float = 0.3
    near_plane: float = 0.01
    dtype: str = "float64"   # per-pixel pipeline precision; "float32" for training speed

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


DEFAULT_SETTINGS = RasterSettings()


@dataclass(frozen=True)
class ProjectedGaussian:
    mean2d: np.ndarray   # (2,) pixel coords
    cov2d: np.ndarray    # (2, 2) regularized
    depth: float


@dataclass
class RenderGradients:
    """Per-primitive partials of a scalar loss; shapes mirror the field arrays."""

    center: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    identity: np.ndarray

    @staticmethod
    def zeros(n: int) -> "RenderGradients":
        return RenderGradients(
            center=np.zeros((n, 3)), rotation=np.zeros((n, 4)), log_scale=np.zeros((n, 3)),
            opacity_logit=np.zeros(n), color=np.zeros((n, 3)), identity=np.zeros((n, 16)),
        )

    def add_(self, other: "RenderGradients", scale: float = 1.0) -> "RenderGradients":
        self.center += scale * other.center
        self.rotation += scale * other.rotation
        self.log_scale += scale * other.log_scale
        self.opacity_logit += scale * other.opacity_logit
        self.color += scale * other.color
        self.identity += scale * other.identity
        return self


@dataclass
class DepthOrder:
    """Flat per-pixel contributor lists of a forward render (front-to-back)."""

    pixel: np.ndarray          # (M,) flat row-major pixel index, sorted
    index: np.ndarray          # (M,) contributing primitive index into the field
    alpha_prime: np.ndarray    # (M,) projected opacity after clamping
    transmittance: np.ndarray  # (M,) transmittance in front of each contribution
    falloff: np.ndarray        # (M,) exp(-0.5 * mahalanobis^2)
    offset: np.ndarray         # (M, 2) pixel center minus projected mean

    def at(self, row: int, col: int, width: int) -> np.ndarray:
        """Contributing primitive indices of one pixel, nearest first."""
        flat = row * width + col
        lo = np.searchsorted(self.pixel, flat, side="left")
        hi = np.searchsorted(self.pixel, flat, side="right")
        return self.index[lo:hi]


@dataclass
class RenderOutput:
    color_image: np.ndarray    # (H, W, 3)
    feature_image: np.ndarray  # (H, W, 16)
    alpha_image: np.ndarray    # (H, W)
    depth_order: DepthOrder
    _proj: dict = dc_field(repr=False, default_factory=dict)
    _fingerprint: tuple = dc_field(repr=False, default=())
    _settings: RasterSettings = DEFAULT_SETTINGS


def _field_fingerprint(field: GaussianField) -> tuple:
    return (
        len(field),
        float(field.centers.sum()), float(np.abs(field.centers).sum()),
        float(field.rotations.sum()), float(field.log_scales.sum()),
        float(field.opacity_logits.sum()), float(field.colors.sum()),
        float(field.identities.sum()), int(field.object_labels.sum()),
    )


def _project_arrays(field: GaussianField, cam: Camera, settings: RasterSettings) -> dict:
    """Vectorized projection of every Gaussian; returns per-Gaussian arrays."""
    n = len(field)
    q = field.rotations
    qnorm = np.linalg.norm(q, axis=1)
    qhat = q / np.maximum(qnorm, _EPS)[:, None]
    rg = quat_to_matrix(qhat)                       # (N,3,3)
    s = np.exp(field.log_scales)                    # (N,3)
    m = rg * s[:, None, :]
    sigma = m @ np.swapaxes(m, 1, 2)                # world covariance

    rcw = quat_to_matrix(cam.world_to_cam.rotation)
    t = field.centers @ rcw.T + cam.world_to_cam.translation
    depth = t[:, 2]
    in_front = depth > settings.near_plane
    tz = np.where(in_front, depth, 1.0)

    sig_cam = np.matmul(np.matmul(rcw, sigma), rcw.T)

    u = cam.fx * t[:, 0] / tz + cam.cx
    v = cam.fy * t[:, 1] / tz + cam.cy

    # clamp the Jacobian's expansion point to (slightly beyond) the frustum,
    # otherwise far off-axis Gaussians get huge spurious affine footprints
    tan_x, tan_y = 0.5 * cam.width / cam.fx, 0.5 * cam.height / cam.fy
    lim_x_neg, lim_x_pos = cam.cx / cam.fx + 0.3 * tan_x, (cam.width - cam.cx) / cam.fx + 0.3 * tan_x
    lim_y_neg, lim_y_pos = cam.cy / cam.fy + 0.3 * tan_y, (cam.height - cam.cy) / cam.fy + 0.3 * tan_y
    ratio_x = t[:, 0] / tz
    ratio_y = t[:, 1] / tz
    clipped_x = np.clip(ratio_x, -lim_x_neg, lim_x_pos)
    clipped_y = np.clip(ratio_y, -lim_y_neg, lim_y_pos)
    clamped_x = clipped_x != ratio_x
    clamped_y = clipped_y != ratio_y
    tx = np.where(clamped_x, tz * clipped_x, t[:, 0])
    ty = np.where(clamped_y, tz * clipped_y, t[:, 1])

    j = np.zeros((n, 2, 3))
    j[:, 0, 0] = cam.fx / tz
    j[:, 0, 2] = -cam.fx * tx / tz**2
    j[:, 1, 1] = cam.fy / tz
    j[:, 1, 2] = -cam.fy * ty / tz**2

    cov2d = np.matmul(np.matmul(j, sig_cam), j.transpose(0, 2, 1))
    cov2d[:, 0, 0] += settings.cov_reg
    cov2d[:, 1, 1] += settings.cov_reg
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)

    chi = np.sqrt(2.0 * np.log(1.0 / settings.g_min))
    rx = chi * np.sqrt(np.maximum(a, 0.0))
    ry = chi * np.sqrt(np.maximum(c, 0.0))
    x0 = np.maximum(np.ceil(u - rx), 0).astype(np.int64)
    x1 = np.minimum(np.floor(u + rx), cam.width - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(v - ry), 0).astype(np.int64)
    y1 = np.minimum(np.floor(v + ry), cam.height - 1).astype(np.int64)
    valid = in_front & (x0 <= x1) & (y0 <= y1)

    return {
        "qhat": qhat, "qnorm": qnorm, "rg": rg, "s": s, "m": m,
        "rcw": rcw, "t": t, "tx": tx, "ty": ty,
        "clamped_x": clamped_x, "clamped_y": clamped_y,
        "depth": depth, "u": u, "v": v, "j": j,
        "sig_cam": sig_cam, "conic": conic, "valid": valid,
        "x0": x0, "x1": x1, "y0": y0, "y1": y1,
        "alpha": 1.0 / (1.0 + np.exp(-field.opacity_logits)),
    }


def project_gaussian(g: GaussianPrimitive, cam: Camera,
                     settings: RasterSettings = DEFAULT_SETTINGS) -> Optional[ProjectedGaussian]:
    """Project a single Gaussian; None when culled (behind the near plane or
    with a screen footprint entirely outside the image)."""
    field = GaussianField.from_primitives([g], object_count=g.object_label)
    p = _project_arrays(field, cam, settings)
    if not p["valid"][0]:
        return None
    conic = p["conic"][0]
    det = conic[0] * conic[2] - conic[1] ** 2
    cov2d = np.array([[conic[2], -conic[1]], [-conic[1], conic[0]]]) / det
    return ProjectedGaussian(
        mean2d=np.array([p["u"][0], p["v"][0]]),
        cov2d=0.5 * (cov2d + cov2d.T),
        depth=float(p["depth"][0]),
    )


def _segment_starts(pix: np.ndarray) -> np.ndarray:
    flag = np.empty(pix.size, dtype=bool)
    if pix.size:
        flag[0] = True
        np.not_equal(pix[1:], pix[:-1], out=flag[1:])
    return flag


def _build_instances(p: dict, cam: Camera, settings: RasterSettings):
    """Flatten (gaussian, pixel) pairs sorted by pixel then camera depth."""
    valid_idx = np.flatnonzero(p["valid"])
    if valid_idx.size == 0:
        empty = np.zeros(0, dtype=np.int32)
        z = np.zeros(0, dtype=settings.np_dtype)
        return empty, empty, z, z, z, np.zeros((0, 2), dtype=settings.np_dtype)

    # depth sort with index tie-break: stable sort keeps storage order on ties
    order = np.argsort(p["depth"][valid_idx], kind="stable")
    vi = valid_idx[order].astype(np.int32)

    wr = (p["x1"] - p["x0"] + 1).astype(np.int32)[vi]
    hr = (p["y1"] - p["y0"] + 1).astype(np.int32)[vi]
    area = wr * hr
    total = int(area.sum())
    gpos = np.repeat(np.arange(vi.size, dtype=np.int32), area)
    start = np.repeat(np.cumsum(area, dtype=np.int64) - area, area)
    off = (np.arange(total, dtype=np.int64) - start).astype(np.int32)
    lw = wr[gpos]
    px = p["x0"].astype(np.int32)[vi][gpos] + off % lw
    py = p["y0"].astype(np.int32)[vi][gpos] + off // lw
    gidx = vi[gpos]

    dt = settings.np_dtype
    u = p["u"].astype(dt, copy=False)
    v = p["v"].astype(dt, copy=False)
    conic = p["conic"].astype(dt, copy=False)
    d0 = px.astype(dt) - u[gidx]
    d1 = py.astype(dt) - v[gidx]
    power = -0.5 * (conic[gidx, 0] * d0 * d0 + 2.0 * conic[gidx, 1] * d0 * d1 + conic[gidx, 2] * d1 * d1)
    keep = power >= np.log(settings.g_min)
    pix = (py * np.int32(cam.width) + px)[keep]
    gidx = gidx[keep]
    power = power[keep]
    d0 = d0[keep]
    d1 = d1[keep]

    order2 = np.argsort(pix, kind="stable")   # stable: in-pixel order stays depth order
    pix = pix[order2]
    gidx = gidx[order2]
    g = np.exp(power[order2])
    offset = np.stack([d0[order2], d1[order2]], axis=1)

    alpha_prime = np.minimum(p["alpha"].astype(dt, copy=False)[gidx] * g, dt(settings.alpha_max))
    # transmittance via segmented log-space prefix sums (float64 accumulator)
    logt = np.log1p(-alpha_prime.astype(np.float64))
    cum = np.cumsum(logt)
    excl = cum - logt
    seg_start_flag = _segment_starts(pix)
    seg_id = np.cumsum(seg_start_flag) - 1
    excl_start = excl[seg_start_flag][seg_id] if pix.size else excl
    trans = np.exp(excl - excl_start).astype(dt)

    live = trans >= settings.t_min
    return gidx[live], pix[live], alpha_prime[live], trans[live], g[live], offset[live]


def render(field: GaussianField, cam: Camera,
           settings: RasterSettings = DEFAULT_SETTINGS) -> RenderOutput:
    """Render color, identity-feature, and accumulated-alpha images.

    Contributors at each pixel are ordered by ascending camera-z of the
    Gaussian center (ties by primitive index); pixels no Gaussian touches
    stay black / zero-feature.
    """
    h, w = cam.height, cam.width
    n = len(field)
    if n == 0:
        return RenderOutput(
            color_image=np.zeros((h, w, 3)), feature_image=np.zeros((h, w, 16)),
            alpha_image=np.zeros((h, w)),
            depth_order=DepthOrder(*(np.zeros(0, dtype=np.int32),) * 2, *(np.zeros(0),) * 3,
                                   np.zeros((0, 2))),
            _proj={}, _fingerprint=_field_fingerprint(field), _settings=settings,
        )

    p = _project_arrays(field, cam, settings)
    gidx, pix, alpha_prime, trans, g, offset = _build_instances(p, cam, settings)

    dt = settings.np_dtype
    weight = alpha_prime * trans
    counts = np.bincount(pix, minlength=h * w)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    wmat = sparse.csr_matrix((weight, gidx, indptr), shape=(h * w, n))

    color = (wmat @ field.colors.astype(dt, copy=False)).reshape(h, w, 3)
    feature = (wmat @ field.identities.astype(dt, copy=False)).reshape(h, w, 16)
    alpha = np.asarray(wmat.sum(axis=1)).reshape(h, w)

    return RenderOutput(
        color_image=color, feature_image=feature, alpha_image=alpha,
        depth_order=DepthOrder(pixel=pix, index=gidx, alpha_prime=alpha_prime,
                               transmittance=trans, falloff=g, offset=offset),
        _proj=p, _fingerprint=_field_fingerprint(field), _settings=settings,
    )


def _rotation_quat_derivs(qhat: np.ndarray) -> np.ndarray:
    """(N, 4, 3, 3) partials of the rotation matrix w.r.t. unit-quaternion components."""
    w, x, y, z = qhat[:, 0], qhat[:, 1], qhat[:, 2], qhat[:, 3]
    zero = np.zeros_like(w)
    dw = np.stack([zero, -2 * z, 2 * y, 2 * z, zero, -2 * x, -2 * y, 2 * x, zero], axis=1)
    dx = np.stack([zero, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x], axis=1)
    dy = np.stack([-4 * y, 2 * x, 2 * w, 2 * x, zero, 2 * z, -2 * w, 2 * z, -4 * y], axis=1)
    dz = np.stack([-4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, zero], axis=1)
    return np.stack([dw, dx, dy, dz], axis=1).reshape(-1, 4, 3, 3)


def render_backward(field: GaussianField, cam: Camera,
                    loss_grad_color: np.ndarray, loss_grad_feature: np.ndarray,
                    output: RenderOutput) -> RenderGradients:
    """Exact adjoint of ``render`` for the upstream image gradients.

    ``output`` must come from a forward render of the same field; primitives
    contributing to no live pixel get zero gradients.
    """
    n = len(field)
    grads = RenderGradients.zeros(n)
    if output._fingerprint != _field_fingerprint(field):
        raise StaleRenderError("field was modified after the forward render")
    h, w = cam.height, cam.width
    loss_grad_color = np.asarray(loss_grad_color, dtype=np.float64)
    loss_grad_feature = np.asarray(loss_grad_feature, dtype=np.float64)
    if loss_grad_color.shape != (h, w, 3):
        raise InputError(f"loss_grad_color must be {(h, w, 3)}, got {loss_grad_color.shape}")
    if loss_grad_feature.shape != (h, w, 16):
        raise InputError(f"loss_grad_feature must be {(h, w, 16)}, got {loss_grad_feature.shape}")
    do = output.depth_order
    if n == 0 or do.pixel.size == 0:
        return grads

    p = output._proj
    settings = output._settings
    dt = settings.np_dtype
    pix, gidx = do.pixel, do.index
    alpha_prime, trans, g = do.alpha_prime, do.transmittance, do.falloff
    weight = alpha_prime * trans

    uc = loss_grad_color.reshape(-1, 3).astype(dt, copy=False)
    uf = loss_grad_feature.reshape(-1, 16).astype(dt, copy=False)

    counts = np.bincount(pix, minlength=h * w)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    wmat = sparse.csr_matrix((weight, gidx, indptr), shape=(h * w, n))
    grads.color[:] = wmat.T @ uc
    grads.identity[:] = wmat.T @ uf

    # d loss / d alpha'_i: own term minus what later contributors lose in transmittance
    ucp = uc[pix]
    ufp = uf[pix]
    colors = field.colors.astype(dt, copy=False)
    identities = field.identities.astype(dt, copy=False)
    y = (colors[gidx] * ucp).sum(axis=1) + (identities[gidx] * ufp).sum(axis=1)
    wy = (weight * y).astype(np.float64)
    cum_wy = np.cumsum(wy)
    seg_start_flag = _segment_starts(pix)
    seg_id = np.cumsum(seg_start_flag) - 1
    seg_last = np.empty(pix.size, dtype=bool)
    seg_last[-1] = True
    np.not_equal(pix[1:], pix[:-1], out=seg_last[:-1])
    suffix = (cum_wy[seg_last][seg_id] - cum_wy).astype(dt)
    g_alpha_prime = trans * y - suffix / (1.0 - alpha_prime)

    alpha_g = p["alpha"].astype(dt, copy=False)[gidx]
    unclamped = alpha_g * g < settings.alpha_max
    g_alpha_inst = np.where(unclamped, g_alpha_prime * g, dt(0.0))
    g_falloff = np.where(unclamped, g_alpha_prime * alpha_g, dt(0.0))

    g_alpha = np.bincount(gidx, weights=g_alpha_inst, minlength=n)
    alpha_full = p["alpha"]
    grads.opacity_logit[:] = g_alpha * alpha_full * (1.0 - alpha_full)

    # geometry terms: power = -1/2 d' A d with d = pixel - mean2d
    g_power = g_falloff * g
    d0 = do.offset[:, 0]
    d1 = do.offset[:, 1]
    conic = p["conic"].astype(dt, copy=False)
    a0, a1, a2 = conic[gidx, 0], conic[gidx, 1], conic[gidx, 2]
    ad0 = a0 * d0 + a1 * d1
    ad1 = a1 * d0 + a2 * d1
    g_u = np.bincount(gidx, weights=g_power * ad0, minlength=n)
    g_v = np.bincount(gidx, weights=g_power * ad1, minlength=n)
    g_a00 = np.bincount(gidx, weights=-0.5 * g_power * d0 * d0, minlength=n)
    g_a01 = np.bincount(gidx, weights=-g_power * d0 * d1, minlength=n)
    g_a11 = np.bincount(gidx, weights=-0.5 * g_power * d1 * d1, minlength=n)

    # dense per-Gaussian chain back to the 3D parameters (float64 throughout)
    valid = p["valid"]
    conic64 = p["conic"]
    amat = np.zeros((n, 2, 2))
    amat[:, 0, 0] = conic64[:, 0]
    amat[:, 0, 1] = amat[:, 1, 0] = conic64[:, 1]
    amat[:, 1, 1] = conic64[:, 2]
    g_amat = np.zeros((n, 2, 2))
    g_amat[:, 0, 0] = g_a00
    g_amat[:, 0, 1] = g_amat[:, 1, 0] = 0.5 * g_a01
    g_amat[:, 1, 1] = g_a11
    g_cov2d = -np.matmul(np.matmul(amat, g_amat), amat)

    j = p["j"]
    sig_cam = p["sig_cam"]
    g_sig_cam = np.matmul(j.transpose(0, 2, 1), np.matmul(g_cov2d, j))
    g_j = 2.0 * np.matmul(np.matmul(g_cov2d, j), sig_cam)

    t = p["t"]
    tz = np.where(valid, t[:, 2], 1.0)
    g_t = j[:, 0, :] * g_u[:, None] + j[:, 1, :] * g_v[:, None]
    fx, fy = cam.fx, cam.fy
    tx, ty = p["tx"], p["ty"]
    # J02 = -fx tx/tz^2 with tx the (possibly frustum-clamped) expansion point:
    # when clamped, tx = lim * tz, so its t-derivative moves to the tz slot
    g_tx = g_j[:, 0, 2] * (-fx / tz**2)
    g_ty = g_j[:, 1, 2] * (-fy / tz**2)
    cx_m, cy_m = p["clamped_x"], p["clamped_y"]
    g_t[:, 0] += np.where(cx_m, 0.0, g_tx)
    g_t[:, 1] += np.where(cy_m, 0.0, g_ty)
    g_t[:, 2] += (
        g_j[:, 0, 0] * (-fx / tz**2) + g_j[:, 1, 1] * (-fy / tz**2)
        + g_j[:, 0, 2] * (2.0 * fx * tx / tz**3) + g_j[:, 1, 2] * (2.0 * fy * ty / tz**3)
        + np.where(cx_m, g_tx * (tx / tz), 0.0) + np.where(cy_m, g_ty * (ty / tz), 0.0)
    )

    rcw = p["rcw"]
    grads.center[:] = g_t @ rcw
    g_sigma = np.matmul(np.matmul(rcw.T, g_sig_cam), rcw)
    g_m = 2.0 * np.matmul(g_sigma, p["m"])
    g_rmat = g_m * p["s"][:, None, :]
    g_s = (g_m * p["rg"]).sum(axis=1)
    grads.log_scale[:] = g_s * p["s"]

    derivs = _rotation_quat_derivs(p["qhat"])
    g_qhat = (g_rmat[:, None, :, :] * derivs).sum(axis=(2, 3))
    qhat, qnorm = p["qhat"], p["qnorm"]
    grads.rotation[:] = (g_qhat - qhat * (qhat * g_qhat).sum(axis=1)[:, None]) / qnorm[:, None]

    invalid = ~valid
    if invalid.any():
        grads.center[invalid] = 0.0
        grads.log_scale[invalid] = 0.0
        grads.rotation[invalid] = 0.0
    return grads
