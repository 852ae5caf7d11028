"""Photometric reprojection loss: an SSIM/L1 blend plus an L2 penalty on the
raw scale and shift parameters, with exact gradients w.r.t. the rendering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionMismatch, NoValidPixels
from .scene import Image
from .warp import WarpResult


@dataclass(frozen=True)
class GeoLossConfig:
    eta: float = 0.85
    ssim_window: int = 7
    ssim_c1: float = 0.01**2
    ssim_c2: float = 0.03**2
    gamma: float = 1e-2

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ValueError(f"ssim_window must be odd and >= 3, got {self.ssim_window}")
        if self.ssim_c1 <= 0 or self.ssim_c2 <= 0:
            raise ValueError("SSIM constants must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


@dataclass(frozen=True, eq=False)
class LossValue:
    total: float
    ssim_term: float
    l1_term: float
    reg_term: float
    grad_wrt_rendered: np.ndarray
    n_valid: int = 0


def _box_sum(x: np.ndarray, w: int) -> np.ndarray:
    """Sum over every fully contained w x w window of an (H, W, ...) array."""
    return sliding_window_view(x, (w, w), axis=(0, 1)).sum(axis=(-2, -1))


def _box_adjoint(y: np.ndarray, w: int) -> np.ndarray:
    """Transpose of ``_box_sum``: scatter each window value back onto its pixels."""
    pad = [(w - 1, w - 1), (w - 1, w - 1)] + [(0, 0)] * (y.ndim - 2)
    return _box_sum(np.pad(y, pad), w)


def _as_array(x) -> np.ndarray:
    data = x.data if isinstance(x, Image) else np.asarray(x, dtype=np.float64)
    return data[:, :, None] if data.ndim == 2 else data


def ssim(a, b, window: int = 7, c1: float = 0.01**2, c2: float = 0.03**2, valid=None):
    """Mean box-window SSIM between ``a`` and ``b`` and its gradient w.r.t. ``b``.

    Only windows lying entirely on valid pixels contribute; channels are
    averaged. Returns ``(nan, zeros)`` when no window qualifies.
    """
    a = _as_array(a)
    b = _as_array(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"SSIM inputs differ in shape: {a.shape} vs {b.shape}")
    h, w_, ch = a.shape
    if window > h or window > w_:
        raise DimensionMismatch(f"window {window} does not fit a {h}x{w_} image")
    if valid is None:
        valid = np.ones((h, w_), dtype=bool)
    n = float(window * window)

    win_ok = _box_sum((~valid).astype(np.float64), window) == 0
    count = int(win_ok.sum()) * ch
    if count == 0:
        return float("nan"), np.zeros_like(b)

    mu_a = _box_sum(a, window) / n
    mu_b = _box_sum(b, window) / n
    var_a = _box_sum(a * a, window) / n - mu_a**2
    var_b = _box_sum(b * b, window) / n - mu_b**2
    cov = _box_sum(a * b, window) / n - mu_a * mu_b

    num1 = 2 * mu_a * mu_b + c1
    num2 = 2 * cov + c2
    den1 = mu_a**2 + mu_b**2 + c1
    den2 = var_a + var_b + c2
    s = num1 * num2 / (den1 * den2)

    m = win_ok[..., None]
    value = float(np.sum(np.where(m, s, 0.0)) / count)

    scale = np.where(m, 1.0 / count, 0.0)
    d_mu_b = scale * (2 * mu_a * num2 / (den1 * den2) - s * 2 * mu_b / den1)
    d_var_b = scale * (-s / den2)
    d_cov = scale * (2 * num1 / (den1 * den2))
    grad = (
        _box_adjoint(d_mu_b - 2 * d_var_b * mu_b - d_cov * mu_a, window)
        + 2 * b * _box_adjoint(d_var_b, window)
        + a * _box_adjoint(d_cov, window)
    ) / n
    return value, grad


def image_loss(reference, rendered, valid, cfg: GeoLossConfig):
    """Image terms of the loss: ``(total, ssim_term, l1_term, gradient)``."""
    ref = _as_array(reference)
    ren = _as_array(rendered)
    if ref.shape != ren.shape:
        raise DimensionMismatch(f"reference {ref.shape} and rendering {ren.shape} differ")
    valid = np.asarray(valid, dtype=bool)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise NoValidPixels("no valid pixels in the rendering")
    ch = ref.shape[2]

    diff = np.where(valid[..., None], ren - ref, 0.0)
    l1 = float(np.abs(diff).sum() / (n_valid * ch))
    grad_l1 = np.sign(diff) / (n_valid * ch)

    if cfg.eta > 0:
        ren_masked = np.where(valid[..., None], ren, 0.0)
        s, grad_s = ssim(ref, ren_masked, cfg.ssim_window, cfg.ssim_c1, cfg.ssim_c2, valid)
        if np.isnan(s):
            ssim_term, grad_ssim = 0.0, np.zeros_like(ren)
        else:
            ssim_term, grad_ssim = (1.0 - s) / 2.0, -0.5 * grad_s
    else:
        ssim_term, grad_ssim = 0.0, np.zeros_like(ren)

    total = cfg.eta * ssim_term + (1.0 - cfg.eta) * l1
    grad = cfg.eta * grad_ssim + (1.0 - cfg.eta) * grad_l1
    grad = np.where(valid[..., None], grad, 0.0)
    return total, ssim_term, l1, grad


def regularizer(params, gamma: float) -> float:
    if params is None:
        return 0.0
    return gamma * (params.s_raw**2 + params.t_raw**2)


def geo_loss(reference: Image, rendered: WarpResult, cfg: GeoLossConfig, params=None) -> LossValue:
    """Blend of SSIM and L1 reprojection error, plus the scale/shift penalty."""
    total, ssim_term, l1, grad = image_loss(reference, rendered.image, rendered.validity, cfg)
    reg = regularizer(params, cfg.gamma)
    return LossValue(
        total=total + reg,
        ssim_term=ssim_term,
        l1_term=l1,
        reg_term=reg,
        grad_wrt_rendered=grad,
        n_valid=int(np.sum(rendered.validity)),
    )
