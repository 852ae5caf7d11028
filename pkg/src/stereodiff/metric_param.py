"""Relative-to-metric depth mapping with learnable softplus scale and shift."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import NonFiniteGradient, NoValidPixels
from .photometric import GeoLossConfig, image_loss
from .scene import DepthMap, ViewPair
from .warp import backward_warp

# softplus(S_IDENTITY) == 1
S_IDENTITY = math.log(math.e - 1.0)
T_INIT = -5.0


def softplus(z):
    """ln(1 + e^z) without overflow for large z or underflow to 0 for moderate negative z."""
    return np.logaddexp(0.0, z) if np.ndim(z) else float(np.logaddexp(0.0, z))


def inverse_softplus(y: float) -> float:
    if not y > 0:
        raise ValueError(f"softplus only reaches positive values, got {y}")
    # log(expm1(y)) loses everything for large y; y + log(1 - e^-y) does not
    return float(y + math.log(-math.expm1(-y)))


def sigmoid(z):
    """Derivative of softplus."""
    if np.ndim(z):
        return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))
    return 0.5 * (1.0 + math.tanh(0.5 * z))


@dataclass(frozen=True)
class ScaleShiftParams:
    s_raw: float = S_IDENTITY
    t_raw: float = T_INIT
    g_s: float = 1.0
    lr: float = 1e-2

    def __post_init__(self):
        if not self.g_s > 0:
            raise ValueError(f"global scale must be positive, got {self.g_s}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")

    @property
    def scale(self) -> float:
        """Effective metric multiplier g_s * softplus(s_raw)."""
        return self.g_s * softplus(self.s_raw)

    @property
    def shift(self) -> float:
        """Effective metric offset g_s * softplus(t_raw) in meters."""
        return self.g_s * softplus(self.t_raw)


def to_metric(relative, params: ScaleShiftParams) -> DepthMap:
    """g_s * (softplus(s) * x + softplus(t)) applied per pixel."""
    if isinstance(relative, DepthMap):
        x, mask = relative.data, relative.valid_mask
    else:
        x, mask = np.asarray(relative, dtype=np.float64), None
    depth = params.g_s * (softplus(params.s_raw) * x + softplus(params.t_raw))
    return DepthMap(depth, mask)


def metric_grads(relative: np.ndarray, params: ScaleShiftParams, grad_depth: np.ndarray):
    """Pull a depth gradient back to (relative map, s_raw, t_raw)."""
    g = params.g_s
    grad_x = grad_depth * g * softplus(params.s_raw)
    grad_s = float(np.sum(grad_depth * relative)) * g * sigmoid(params.s_raw)
    grad_t = float(np.sum(grad_depth)) * g * sigmoid(params.t_raw)
    return grad_x, grad_s, grad_t


def update_params(params: ScaleShiftParams, grad_s: float, grad_t: float) -> ScaleShiftParams:
    """One plain gradient-descent step on the raw parameters."""
    if not (math.isfinite(grad_s) and math.isfinite(grad_t)):
        raise NonFiniteGradient(f"non-finite scale/shift gradient ({grad_s}, {grad_t})")
    return replace(
        params,
        s_raw=params.s_raw - params.lr * grad_s,
        t_raw=params.t_raw - params.lr * grad_t,
    )


def default_candidates(g_min: float = 0.5, g_max: float = 100.0, n: int = 24) -> np.ndarray:
    return np.geomspace(g_min, g_max, n)


def scale_sweep(
    pair: ViewPair, relative, candidates, cfg: GeoLossConfig, min_valid_fraction: float = 0.5
) -> np.ndarray:
    """Image-only reprojection loss of ``g * relative`` for each candidate ``g``.

    Candidates that leave fewer than ``min_valid_fraction`` of the pixels
    inside the other view score ``inf``: a loss averaged over a handful of
    surviving pixels is not comparable with one over the whole image.
    """
    if not isinstance(relative, DepthMap):
        relative = DepthMap(np.asarray(relative), None, relative=True)
    n_pixels = relative.data.size
    losses = []
    for g in candidates:
        depth = to_metric(relative, ScaleShiftParams(S_IDENTITY, T_INIT, float(g)))
        warped = backward_warp(pair, depth)
        if warped.validity.sum() < max(1, min_valid_fraction * n_pixels):
            losses.append(np.inf)
            continue
        total, _, _, _ = image_loss(pair.left_image, warped.image, warped.validity, cfg)
        losses.append(total)
    return np.asarray(losses)


def global_scale_search(
    pair: ViewPair, relative, candidates, cfg: GeoLossConfig, min_valid_fraction: float = 0.5
) -> float:
    """Pick the candidate global scale with the lowest reprojection loss.

    The relative map is used with the initial scale/shift (softplus scale 1,
    near-zero shift). Ties go to the smaller candidate. Raises
    ``NoValidPixels`` when no candidate keeps enough pixels in view.
    """
    cand = np.asarray(list(candidates), dtype=np.float64)
    if cand.size == 0:
        raise ValueError("no candidate scales given")
    if np.any(~(cand > 0)):
        raise ValueError("candidate scales must be positive")
    cand = np.sort(cand)
    losses = scale_sweep(pair, relative, cand, cfg, min_valid_fraction)
    if not np.any(np.isfinite(losses)):
        raise NoValidPixels("no candidate scale keeps enough pixels inside the other view")
    return float(cand[int(np.argmin(losses))])


def _range_loss(pair, x, near, far, cfg, min_valid):
    warped = backward_warp(pair, DepthMap(near + (far - near) * x))
    if warped.validity.sum() < min_valid:
        return np.inf
    return image_loss(pair.left_image, warped.image, warped.validity, cfg)[0]


def scale_shift_search(
    pair: ViewPair,
    relative,
    g_s: float,
    cfg: GeoLossConfig,
    near_range=(0.5, 100.0),
    n_near: int = 64,
    min_ratio: float = 1.5,
    max_ratio: float = 8.0,
    n_ratio: int = 20,
    levels: int = 4,
    refine: int = 7,
    min_valid_fraction: float = 0.75,
    lr: float = 1e-2,
) -> ScaleShiftParams:
    """Initial raw scale and shift from a coarse-to-fine grid over the depth range.

    The relative map is mapped to ``near + (far - near) * x``; a log grid over
    the near depth and the far/near ratio is scored with the image-only
    reprojection loss, then re-gridded ``levels - 1`` times around the best
    cell. The result is expressed as raw parameters for the given ``g_s``.

    ``min_ratio`` keeps the range from collapsing to a single fronto-parallel
    plane, which a relative map unrelated to the scene would otherwise favour
    and which leaves later per-pixel updates almost no leverage (the metric
    map's sensitivity to the relative map is the scale).
    """
    if not isinstance(relative, DepthMap):
        relative = DepthMap(np.asarray(relative), None, relative=True)
    x = relative.data
    min_valid = max(1, min_valid_fraction * x.size)
    nc = np.geomspace(near_range[0], near_range[1], n_near)
    if not 1.0 < min_ratio < max_ratio:
        raise ValueError("need 1 < min_ratio < max_ratio")
    rc = np.geomspace(min_ratio, max_ratio, n_ratio)
    best = None
    for _ in range(levels):
        for n in nc:
            for r in rc:
                loss = _range_loss(pair, x, n, n * r, cfg, min_valid)
                if best is None or loss < best[0]:
                    best = (loss, n, r)
        if not np.isfinite(best[0]):
            raise NoValidPixels("no depth range keeps enough pixels inside the other view")
        step_n, step_r = nc[1] / nc[0], rc[1] / rc[0]
        nc = best[1] * np.geomspace(1.0 / step_n, step_n, refine)
        rc = np.clip(best[2] * np.geomspace(1.0 / step_r, step_r, refine), min_ratio, max_ratio)
    _, near, ratio = best
    return ScaleShiftParams(
        s_raw=inverse_softplus(near * (ratio - 1.0) / g_s),
        t_raw=inverse_softplus(near / g_s),
        g_s=g_s,
        lr=lr,
    )
